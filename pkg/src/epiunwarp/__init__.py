"""EPI geometric distortion correction by learned registration.

A self-contained toolkit: a small reverse-mode autodiff engine with the
primitives a displacement-estimating encoder-decoder needs, the physical
field-map/voxel-shift layer with synthetic phantoms, the training
objectives and optimizer, image-similarity metrics with the ANOVA/Tukey/
Benjamini-Hochberg comparison chain, a minimal NIfTI-1 subset, and a
batch CLI.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .distortion import (DisplacementMap, FieldMap, Volume, correct,
                         phantom_brain, phantom_fieldmap, simulate_distortion,
                         vdm_from_fieldmap)
from .losses import LossConfig, local_cc_loss, mse_map_loss, smoothness_loss, total_loss
from .metrics import (MetricsReport, anova_oneway, bh_adjust, nmi, psnr, ssim,
                      slicewise_report, tukey_hsd)
from .niftiio import nifti_read, nifti_write
from .pipeline import preprocess
from .trainer import (AdamState, TrainConfig, adam_step, estimate_gdm,
                      infer_correct, lambda_sweep, train)
from .unet import UNetConfig, UNetWeights, unet_forward, unet_init, weights_load, weights_save

__version__ = "0.1.0"

__all__ = [
    "AdamState", "DisplacementMap", "FieldMap", "LossConfig", "MetricsReport",
    "Tape", "Tensor", "TrainConfig", "UNetConfig", "UNetWeights", "Volume",
    "adam_step", "anova_oneway", "backward", "bh_adjust", "correct",
    "estimate_gdm", "grad_check", "infer_correct", "lambda_sweep",
    "local_cc_loss", "mse_map_loss", "nifti_read", "nifti_write", "nmi",
    "phantom_brain", "phantom_fieldmap", "preprocess", "psnr",
    "simulate_distortion", "slicewise_report", "smoothness_loss", "ssim",
    "total_loss", "train", "tukey_hsd", "unet_forward", "unet_init",
    "vdm_from_fieldmap", "weights_load", "weights_save",
]
