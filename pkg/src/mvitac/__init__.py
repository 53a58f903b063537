"""Self-supervised visuotactile representation learning.

Momentum-encoder contrastive pretraining over paired visual and tactile
images, with within-modality and cross-modality InfoNCE objectives, linear
probing, and cross-modal retrieval diagnostics. Everything runs on CPU at
desk scale and is deterministic under explicit seeds.
"""

from . import data, losses, models, tensor, training
from .errors import MvitacError

__version__ = "0.1.0"

__all__ = ["data", "losses", "models", "tensor", "training", "MvitacError",
           "__version__"]
