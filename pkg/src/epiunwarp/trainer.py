"""Optimization loop, sweep protocol and dynamic per-frame inference.

Training is strictly sequential with batch size 1; sample order is a
seeded permutation per epoch, so (seed, config, dataset) fully determine
the final weights.  2-D configurations treat each slice of a 3-D sample as
one training sample; 3-D configurations treat the whole volume as one.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Tensor, backward, linear_sample_pe
from .distortion import DisplacementMap, Volume, pull_warp
from .errors import ConfigError, ContractError, NumericError, ParameterError
from .losses import LossConfig, smoothness_loss, total_loss
from .metrics import nmi
from .unet import UNetConfig, UNetWeights, unet_forward, unet_init, weights_save


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "self_supervised"
    dims: int = 2
    learning_rate: float = 1e-5
    epochs: int = 100
    batch_size: int = 1
    lambda_smooth: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    cc_window: int = 9
    semi_mse_weight: float = 1.0
    encoder_filters: tuple | None = None
    decoder_filters: tuple | None = None
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def unet_config(self) -> UNetConfig:
        kwargs = {"dims": self.dims, "seed": self.seed, "leaky_slope": self.leaky_slope}
        if self.encoder_filters is not None:
            kwargs["encoder_filters"] = tuple(self.encoder_filters)
        if self.decoder_filters is not None:
            kwargs["decoder_filters"] = tuple(self.decoder_filters)
        return UNetConfig(**kwargs)

    def loss_config(self) -> LossConfig:
        return LossConfig(mode=self.mode, lambda_smooth=self.lambda_smooth,
                          cc_window=self.cc_window, semi_mse_weight=self.semi_mse_weight)


@dataclass
class AdamState:
    """First/second moment accumulators with reference hyperparameters."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros(p.data.shape) for p in params],
                   v=[np.zeros(p.data.shape) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update, applied in place; returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.data.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype, copy=False)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    total: float
    components: dict
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (epoch, path, val_nmi or None)

    def totals(self):
        return [r.total for r in self.epochs]


def _expand_samples(dataset, dims):
    """Normalize to a list of (t1w array, epi array, vdm array|None)."""
    if not dataset:
        raise ParameterError("train: dataset is empty")
    samples = []
    for entry in dataset:
        t1w, epi, vdm = entry if len(entry) == 3 else (entry[0], entry[1], None)
        t_arr = t1w.data if isinstance(t1w, Volume) else np.asarray(t1w, dtype=np.float64)
        e_arr = epi.data if isinstance(epi, Volume) else np.asarray(epi, dtype=np.float64)
        v_arr = None
        if vdm is not None:
            v_arr = vdm.data if isinstance(vdm, DisplacementMap) else np.asarray(vdm, dtype=np.float64)
        if t_arr.shape != e_arr.shape:
            raise ParameterError(
                f"train: t1w shape {t_arr.shape} != epi shape {e_arr.shape}")
        if v_arr is not None and v_arr.shape != e_arr.shape:
            raise ParameterError(
                f"train: vdm shape {v_arr.shape} != epi shape {e_arr.shape}")
        if dims == 2 and t_arr.ndim == 3:
            for s in range(t_arr.shape[2]):
                samples.append((t_arr[:, :, s], e_arr[:, :, s],
                                None if v_arr is None else v_arr[:, :, s]))
        elif t_arr.ndim == dims:
            samples.append((t_arr, e_arr, v_arr))
        else:
            raise ParameterError(
                f"train: rank-{t_arr.ndim} sample incompatible with dims={dims}")
    return samples


def train(dataset, config: TrainConfig, val_dataset=None, checkpoint_dir=None,
          unet_config: UNetConfig | None = None,
          loss_config: LossConfig | None = None):
    """Train a displacement estimator; returns (weights, history)."""
    loss_cfg = loss_config or config.loss_config()
    if loss_cfg.mode in ("supervised", "semi_supervised"):
        for entry in dataset:
            if len(entry) < 3 or entry[2] is None:
                raise ContractError(f"mode {loss_cfg.mode!r} requires vdm_gt for every sample")
    samples = _expand_samples(dataset, config.dims)
    weights = unet_init(unet_config or config.unet_config())
    weights.meta["mode"] = loss_cfg.mode
    weights.meta["lambda_smooth"] = repr(loss_cfg.lambda_smooth)
    params = weights.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    supervised_only = loss_cfg.mode == "supervised"

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        totals = []
        comp_sums: dict = {}
        for step, idx in enumerate(order):
            t_arr, e_arr, v_arr = samples[idx]
            t1 = Tensor(t_arr)
            ep = Tensor(e_arr)
            vg = None if v_arr is None else Tensor(v_arr)
            for p in params:
                p.grad = None
            with Tape() as tape:
                gdm = unet_forward(weights, t1, ep)
                corrected = None if supervised_only else linear_sample_pe(ep, gdm, 0)
                parts = total_loss(loss_cfg, gdm, corrected, t1, vg)
            loss_value = parts["total"].item()
            if not np.isfinite(loss_value):
                detail = ", ".join(f"{k}={v.item():.6g}" for k, v in parts.items() if k != "total")
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"total={loss_value}, {detail}")
            backward(tape, parts["total"])
            adam_step(params, [p.grad for p in params], state, config.learning_rate)
            totals.append(loss_value)
            for k, v in parts.items():
                if k != "total":
                    comp_sums[k] = comp_sums.get(k, 0.0) + v.item()
        n = len(order)
        record = EpochRecord(
            epoch=epoch,
            total=float(np.mean(totals)),
            components={k: s / n for k, s in comp_sums.items()},
            seconds=time.perf_counter() - t0,
        )
        history.epochs.append(record)
        if (checkpoint_dir is not None and config.checkpoint_every > 0
                and (epoch + 1) % config.checkpoint_every == 0):
            path = f"{checkpoint_dir}/checkpoint_{epoch + 1:04d}.bin"
            weights_save(weights, path)
            val = None
            if val_dataset:
                val = validation_nmi(weights, val_dataset)
            history.checkpoints.append((epoch + 1, path, val))
    return weights, history


def estimate_gdm(weights: UNetWeights, t_arr: np.ndarray, e_arr: np.ndarray) -> np.ndarray:
    """Slice-wise for 2-D configs on 3-D arrays, direct otherwise (no tape)."""
    dims = weights.config.dims
    if dims == 2 and t_arr.ndim == 3:
        out = np.empty_like(e_arr)
        for s in range(t_arr.shape[2]):
            out[:, :, s] = unet_forward(
                weights, Tensor(t_arr[:, :, s]), Tensor(e_arr[:, :, s])).data
        return out
    return unet_forward(weights, Tensor(t_arr), Tensor(e_arr)).data


def validation_nmi(weights: UNetWeights, dataset) -> float:
    """Mean NMI between corrected EPI and reference over a held-out set."""
    vals = []
    for entry in dataset:
        t1w, epi = entry[0], entry[1]
        t_arr = t1w.data if isinstance(t1w, Volume) else np.asarray(t1w, dtype=np.float64)
        e_arr = epi.data if isinstance(epi, Volume) else np.asarray(epi, dtype=np.float64)
        gdm = estimate_gdm(weights, t_arr, e_arr)
        corrected = pull_warp(e_arr, gdm, 0)
        vals.append(nmi(corrected, t_arr))
    return float(np.mean(vals))


@dataclass
class SweepEntry:
    lambda_smooth: float
    max_abs_gdm: float
    mean_smoothness: float
    mean_nmi: float


@dataclass
class SweepReport:
    entries: list

    def by_lambda(self):
        return {e.lambda_smooth: e for e in self.entries}


def lambda_sweep(dataset, lambdas=(0.0, 0.5, 1.0, 1.5), epochs: int = 25,
                 base_config: TrainConfig | None = None, eval_dataset=None) -> SweepReport:
    """Train one self-supervised model per regularization weight.

    Each run reuses the same seed, so differences across the grid are due
    to the regularizer alone.
    """
    base = base_config or TrainConfig(mode="self_supervised")
    if base.mode != "self_supervised":
        raise ContractError("lambda_sweep applies to self-supervised mode only")
    entries = []
    for lam in lambdas:
        cfg = replace(base, lambda_smooth=float(lam), epochs=int(epochs))
        weights, _ = train(dataset, cfg)
        max_abs = 0.0
        smooth_vals = []
        nmi_vals = []
        for entry in (eval_dataset if eval_dataset is not None else dataset):
            t1w, epi = entry[0], entry[1]
            t_arr = t1w.data if isinstance(t1w, Volume) else np.asarray(t1w, dtype=np.float64)
            e_arr = epi.data if isinstance(epi, Volume) else np.asarray(epi, dtype=np.float64)
            gdm = estimate_gdm(weights, t_arr, e_arr)
            max_abs = max(max_abs, float(np.abs(gdm).max()))
            smooth_vals.append(smoothness_loss(Tensor(gdm)).item())
            nmi_vals.append(nmi(pull_warp(e_arr, gdm, 0), t_arr))
        entries.append(SweepEntry(float(lam), max_abs,
                                  float(np.mean(smooth_vals)), float(np.mean(nmi_vals))))
    return SweepReport(entries)


@dataclass
class DynamicCorrectionResult:
    corrected: Volume
    gdms: list
    estimation_seconds: np.ndarray
    correction_seconds: np.ndarray


def infer_correct(weights: UNetWeights, epi_series: Volume, t1w: Volume) -> DynamicCorrectionResult:
    """Estimate a fresh displacement map per time frame and correct each one."""
    if epi_series.data.ndim != 4:
        raise ParameterError(
            f"infer_correct: epi_series must be 4-D, got rank {epi_series.data.ndim}")
    if t1w.data.shape != epi_series.spatial_shape:
        raise ParameterError(
            f"infer_correct: t1w shape {t1w.data.shape} != series spatial shape "
            f"{epi_series.spatial_shape}")
    n_frames = epi_series.n_frames
    corrected = np.empty_like(epi_series.data)
    gdms = []
    est_s = np.empty(n_frames)
    cor_s = np.empty(n_frames)
    for t in range(n_frames):
        frame = epi_series.data[..., t]
        t0 = time.perf_counter()
        gdm = estimate_gdm(weights, t1w.data, frame)
        t1 = time.perf_counter()
        corrected[..., t] = pull_warp(frame, gdm, epi_series.pe_axis)
        t2 = time.perf_counter()
        gdms.append(DisplacementMap(gdm, pe_axis=epi_series.pe_axis, kind="gdm_estimated"))
        est_s[t] = t1 - t0
        cor_s[t] = t2 - t1
    return DynamicCorrectionResult(epi_series.like(corrected), gdms, est_s, cor_s)
