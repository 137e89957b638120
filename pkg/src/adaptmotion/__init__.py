"""Motion diffusion with plug-in adaptation branches for object interaction
and co-speech gesture, fused at sampling time."""

__version__ = "0.1.0"
