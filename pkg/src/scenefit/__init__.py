"""Scene-aware refinement of captured human motion against LiDAR points and scene meshes."""

__version__ = "0.1.0"
