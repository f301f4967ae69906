"""Window attention on the HEALPix sphere for fisheye images."""
from .healpix import ang_to_pix, nest_to_ring, pix_to_ang, ring_to_nest
from .model import HealSwin, ModelConfig

__version__ = "0.1.0"
__all__ = ["HealSwin", "ModelConfig", "ang_to_pix", "nest_to_ring", "pix_to_ang", "ring_to_nest"]
