"""Joint multi-person head detection and full-range head pose estimation."""

__version__ = "0.1.0"

from ._kernels import BACKEND  # noqa: E402,F401
