"""fusereg: 3D rigid multimodal registration with a learned similarity metric.

The package trains a convolutional regressor that predicts target
registration error (TRE) directly from a fixed/moving volume pair and uses
it as the similarity metric inside a composite differential-evolution +
BFGS optimizer, alongside classical mutual-information and MIND-SSD
baselines.
"""

from .transforms import RigidParams, apply_transform, compose, invert, is_rigid, rigid_matrix, tre
from .volume import Volume3D, load_volume, save_volume
from .resample import resample

__version__ = "0.1.0"

__all__ = [
    "RigidParams",
    "Volume3D",
    "apply_transform",
    "compose",
    "invert",
    "is_rigid",
    "load_volume",
    "resample",
    "rigid_matrix",
    "save_volume",
    "tre",
    "__version__",
]
