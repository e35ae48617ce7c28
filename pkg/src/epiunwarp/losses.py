"""Training objectives: map regression, local cross-correlation, smoothness.

All losses are built from autodiff primitives so they are differentiable
end to end.  The local cross-correlation uses moving window sums with zero
padding at the borders; border windows are partially supported and are
included in the mean.  Per window the squared correlation

    cc = (sum(ab) - sum(a)sum(b)/n)^2 /
         ((sum(a^2) - sum(a)^2/n)(sum(b^2) - sum(b)^2/n) + eps)

is bounded in [0, 1]; the loss is -mean(cc) so minimizing it maximizes
local correlation.  ``eps`` keeps flat (e.g. background) windows finite.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _box_sum, diff, mean, mul, square, sub, window_sum
from .errors import ConfigError, ContractError, ShapeError

CC_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    mode: str = "self_supervised"
    lambda_smooth: float = 1.0
    cc_window: int = 9
    semi_mse_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("supervised", "semi_supervised", "self_supervised"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.lambda_smooth < 0:
            raise ConfigError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if self.cc_window < 1 or self.cc_window % 2 == 0:
            raise ConfigError(f"cc_window must be odd positive, got {self.cc_window}")
        if self.semi_mse_weight <= 0:
            raise ConfigError(f"semi_mse_weight must be > 0, got {self.semi_mse_weight}")


def mse_map_loss(gdm: Tensor, vdm_gt: Tensor) -> Tensor:
    """Mean squared voxel-wise difference between estimated and true maps."""
    if gdm.data.shape != vdm_gt.data.shape:
        raise ShapeError(f"mse_map_loss: shape mismatch {gdm.data.shape} vs {vdm_gt.data.shape}")
    return mean(square(sub(gdm, vdm_gt)))


def local_cc_loss(corrected: Tensor, t1w: Tensor, window=None) -> Tensor:
    """Negated mean of squared windowed cross-correlation (contrast-robust)."""
    if corrected.data.shape != t1w.data.shape:
        raise ShapeError(
            f"local_cc_loss: shape mismatch {corrected.data.shape} vs {t1w.data.shape}")
    ndim = corrected.data.ndim
    if window is None:
        window = (9,) * ndim
    elif isinstance(window, int):
        window = (window,) * ndim
    else:
        window = tuple(int(w) for w in window)
    if any(w % 2 == 0 or w < 1 for w in window):
        raise ShapeError(f"local_cc_loss: window extents must be odd positive, got {window}")

    # Effective per-window sample count: border windows are partially
    # supported, so their statistics run over the in-frame voxels only
    # (the padded zeros drop out of every sum).
    ones = Tensor(np.ones(corrected.data.shape))
    inv_n = Tensor(1.0 / _box_sum(ones.data, window))

    a, b = corrected, t1w
    sa = window_sum(a, window)
    sb = window_sum(b, window)
    saa = window_sum(square(a), window)
    sbb = window_sum(square(b), window)
    sab = window_sum(mul(a, b), window)
    cross = sub(sab, mul(mul(sa, sb), inv_n))
    var_a = sub(saa, mul(square(sa), inv_n))
    var_b = sub(sbb, mul(square(sb), inv_n))
    cc = square(cross) / (mul(var_a, var_b) + CC_EPS)
    return -1.0 * mean(cc)


def smoothness_loss(gdm: Tensor) -> Tensor:
    """Diffusion regularizer: mean squared forward difference per axis,
    averaged over axes."""
    ndim = gdm.data.ndim
    if ndim < 1:
        raise ShapeError("smoothness_loss: gdm needs at least one spatial axis")
    total = None
    for axis in range(ndim):
        term = mean(square(diff(gdm, axis)))
        total = term if total is None else total + term
    return total * (1.0 / ndim)


def total_loss(config: LossConfig, gdm: Tensor, corrected: Tensor | None,
               t1w: Tensor | None, vdm_gt: Tensor | None = None) -> dict:
    """Composite objective per training mode.

    Returns {'total': Tensor, <component name>: Tensor...} so the trainer
    can log components without recomputation.
    """
    if config.mode in ("supervised", "semi_supervised") and vdm_gt is None:
        raise ContractError(f"mode {config.mode!r} requires vdm_gt")
    if config.mode == "supervised":
        l_mse = mse_map_loss(gdm, vdm_gt)
        return {"total": l_mse, "mse_map": l_mse}
    if corrected is None or t1w is None:
        raise ContractError(f"mode {config.mode!r} requires corrected and t1w")
    window = (config.cc_window,) * gdm.data.ndim
    l_cc = local_cc_loss(corrected, t1w, window)
    if config.mode == "semi_supervised":
        l_mse = mse_map_loss(gdm, vdm_gt)
        return {"total": config.semi_mse_weight * l_mse + l_cc,
                "mse_map": l_mse, "local_cc": l_cc}
    l_smooth = smoothness_loss(gdm)
    return {"total": l_cc + config.lambda_smooth * l_smooth,
            "local_cc": l_cc, "smoothness": l_smooth}
