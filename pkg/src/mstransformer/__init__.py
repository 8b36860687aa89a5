"""Multi-scale Transformer encoders on a small reverse-mode autodiff core."""

__version__ = "0.1.0"

from .attention import ScaleSpec, parse_scales, resolve_scale  # noqa: E402
from .autograd import Tensor  # noqa: E402
from .model import Model, ModelConfig  # noqa: E402
from .planner import plan_scales  # noqa: E402

__all__ = ["Model", "ModelConfig", "ScaleSpec", "Tensor", "parse_scales", "plan_scales",
           "resolve_scale", "__version__"]
