"""Paired ROI detection in bilateral grayscale images.

Continuous-domain template matching: differentiable affine patch extraction,
normalized-cross-correlation losses, multi-start gradient search, a sliding
window baseline, and a small trainable localization network.
"""

__version__ = "0.1.0"

from .imagecore import load_image, save_png, warp, resize, horizontal_flip, pad_zeros
from .parametrize import ParamConfig, constrain, unconstrain, affine_matrix
from .loss import (
    Template,
    SubWindow,
    LossBreakdown,
    ncc_cost,
    matching_loss,
    pair_loss,
    pair_loss_grad,
    load_template,
    save_template,
)

__all__ = [
    "__version__",
    "load_image",
    "save_png",
    "warp",
    "resize",
    "horizontal_flip",
    "pad_zeros",
    "ParamConfig",
    "constrain",
    "unconstrain",
    "affine_matrix",
    "Template",
    "SubWindow",
    "LossBreakdown",
    "ncc_cost",
    "matching_loss",
    "pair_loss",
    "pair_loss_grad",
    "load_template",
    "save_template",
]
