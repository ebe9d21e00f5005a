"""Two-stage pancreatic tumor detector: augmented feature pyramid, self-adaptive
feature fusion and a dependencies module, on a small numpy autodiff core."""
from .config import RunConfig
from .model import Detector

__all__ = ["RunConfig", "Detector"]
__version__ = "0.1.0"
