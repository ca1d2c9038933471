"""Self-supervised face representations from video-mined face pairs.

Pipeline stages: detection tracking, pair mining, Siamese max-margin
training, metric-learning fine-tuning and k-fold verification.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
