"""rxfusion: radar-camera 3D detection on a numpy autodiff core.

Subpackages cover the full loop: synthetic 4D spectrum generation,
Doppler compression and sparsification, pyramid encoders, deformable
cross-attention fusion, set matching losses, and KITTI-style evaluation.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, ShapeError  # noqa: F401
