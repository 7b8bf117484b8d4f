"""Text-conditioned joint RGB + elevation (2.5D) terrain diffusion at desk scale.

Pure-numpy stack: variance-preserving noise schedules with exact
x/epsilon/v conversions, a shared-stem two-head denoiser with hand-written
backprop, masked v-prediction training, classifier-free-guided DDIM
sampling, a latent codec, coordinate-based captioning, raster
preprocessing, and a procedural training corpus.
"""

from .errors import ParameterError, ShapeError
from .schedules import NoiseSchedule, build_schedule, noise, to_v, from_v

__all__ = [
    "ParameterError",
    "ShapeError",
    "NoiseSchedule",
    "build_schedule",
    "noise",
    "to_v",
    "from_v",
]

__version__ = "0.1.0"
