"""KITPose: keypoint-interactive pose estimation at desk scale.

A self-contained implementation of keypoint-interactive attention over
channel-slice tokens, body part prompts from k-medoids++ clustering,
generalized heatmap regression supervision, and adaptive keypoint
weighting, plus a training/evaluation harness for synthetic skeleton data
and COCO-format annotations.
"""

__version__ = "0.1.0"

from .tensor import (
    Tensor,
    NumericsError,
    set_precision,
    get_precision,
    precision,
    no_grad,
    clear_tape,
    backward,
    finite_diff_gradient,
    stop_gradient,
)

__all__ = [
    "Tensor",
    "NumericsError",
    "set_precision",
    "get_precision",
    "precision",
    "no_grad",
    "clear_tape",
    "backward",
    "finite_diff_gradient",
    "stop_gradient",
    "__version__",
]
