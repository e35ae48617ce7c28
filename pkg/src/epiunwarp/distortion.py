"""Physical-domain layer: field-map conversion, warping, synthetic phantoms.

Conventions:
  - A displacement map is in voxel units along the phase-encode (PE) axis.
  - "Correction" is a pull-warp: corrected(i, ...) samples the distorted
    image at i + gdm(i, ...) along PE.
  - The simulator warps the truth by -d, so correcting a simulated image
    with the generating map approximately inverts the distortion (exactly,
    for integer constant maps).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor, linear_sample_pe
from .errors import ParameterError, ShapeError


@dataclass
class Volume:
    """Dense image with acquisition metadata.

    2-D slice, 3-D volume, or 4-D time series (time is the last axis).
    ``bw_pe`` is the bandwidth per voxel along PE in Hz, i.e. 1/(echo
    spacing x number of phase encodes).
    """

    data: np.ndarray
    pe_axis: int = 0
    bw_pe: float = 1.0
    voxel_size: tuple = None
    intensity_range: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim not in (2, 3, 4):
            raise ShapeError(f"Volume must be 2-D..4-D, got rank {self.data.ndim}")
        if self.bw_pe <= 0:
            raise ParameterError(f"bw_pe must be positive, got {self.bw_pe}")
        if not 0 <= self.pe_axis < self.spatial_rank:
            raise ParameterError(
                f"pe_axis {self.pe_axis} invalid for spatial rank {self.spatial_rank}")
        if self.voxel_size is None:
            self.voxel_size = (1.0,) * self.spatial_rank

    @property
    def spatial_rank(self) -> int:
        return 3 if self.data.ndim == 4 else self.data.ndim

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[:3] if self.data.ndim == 4 else self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[3] if self.data.ndim == 4 else 1

    def frame(self, t: int) -> np.ndarray:
        return self.data[..., t] if self.data.ndim == 4 else self.data

    def like(self, data: np.ndarray) -> "Volume":
        return Volume(data, pe_axis=self.pe_axis, bw_pe=self.bw_pe,
                      voxel_size=self.voxel_size, intensity_range=self.intensity_range)


@dataclass
class FieldMap:
    """Off-resonance map in Hz on the same grid as its companion EPI."""

    data: np.ndarray
    voxel_size: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("FieldMap contains non-finite values")


@dataclass
class DisplacementMap:
    """Signed per-voxel shift in voxels along the PE axis."""

    data: np.ndarray
    pe_axis: int = 0
    kind: str = "vdm_ground_truth"  # or "gdm_estimated"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("DisplacementMap contains non-finite values")


def vdm_from_fieldmap(fm: FieldMap, bw_pe: float, pe_axis: int = 0) -> DisplacementMap:
    """Displacement in voxels: off-resonance divided by per-voxel PE bandwidth."""
    if bw_pe <= 0:
        raise ParameterError(f"bw_pe must be positive, got {bw_pe}")
    return DisplacementMap(fm.data / bw_pe, pe_axis=pe_axis, kind="vdm_ground_truth")


def pull_warp(data: np.ndarray, disp: np.ndarray, pe_axis: int) -> np.ndarray:
    """Shared non-recording warp path (same numerics as the autodiff op)."""
    return linear_sample_pe(Tensor(data), Tensor(disp), pe_axis).data


def correct(epi: Volume, gdm: DisplacementMap) -> Volume:
    """Unwarp an EPI volume (per frame for 4-D) with the given displacement map."""
    if gdm.data.shape != epi.spatial_shape:
        raise ShapeError(
            f"correct: displacement shape {gdm.data.shape} != EPI spatial shape {epi.spatial_shape}")
    if gdm.pe_axis != epi.pe_axis:
        raise ShapeError(f"correct: pe_axis mismatch {gdm.pe_axis} vs {epi.pe_axis}")
    if epi.data.ndim == 4:
        out = np.empty_like(epi.data)
        for t in range(epi.n_frames):
            out[..., t] = pull_warp(epi.data[..., t], gdm.data, epi.pe_axis)
    else:
        out = pull_warp(epi.data, gdm.data, epi.pe_axis)
    return epi.like(out)


def simulate_distortion(truth: Volume, d: DisplacementMap,
                        intensity_modulation: bool = False) -> Volume:
    """Forward-distort a ground-truth volume by the displacement map ``d``.

    Pull-warps by -d; with ``intensity_modulation`` the result is scaled by
    the Jacobian of the sampling map (clamped at zero) so signal mass is
    approximately conserved, mimicking pile-up and thinning.
    """
    if d.data.shape != truth.spatial_shape:
        raise ShapeError(
            f"simulate_distortion: displacement shape {d.data.shape} != "
            f"truth spatial shape {truth.spatial_shape}")
    delta = -d.data
    jac = None
    if intensity_modulation:
        jac = np.maximum(1.0 + np.gradient(delta, axis=d.pe_axis), 0.0)
    if truth.data.ndim == 4:
        out = np.empty_like(truth.data)
        for t in range(truth.n_frames):
            frame = pull_warp(truth.data[..., t], delta, d.pe_axis)
            out[..., t] = frame * jac if jac is not None else frame
    else:
        out = pull_warp(truth.data, delta, d.pe_axis)
        if jac is not None:
            out = out * jac
    return truth.like(out)


# --------------------------------------------------------------------------
# Synthetic phantoms
# --------------------------------------------------------------------------

def _grids(size):
    """Normalized [-1, 1] coordinate grids, one per axis."""
    axes = [np.linspace(-1.0, 1.0, n) for n in size]
    return np.meshgrid(*axes, indexing="ij")


def _ellipse(grids, center, semi):
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
    return r2 <= 1.0


def phantom_brain(seed: int, size=(64, 64), noise_sigma: float = 0.01):
    """Deterministic skull/ventricle/tissue phantom pair.

    Returns (t1w, epi_truth, mask).  Both images share geometry but use
    different per-compartment intensities (roughly T1- vs T2*-like
    contrast); the EPI additionally carries a smooth multiplicative bias
    and additive Gaussian noise.
    """
    size = tuple(int(s) for s in size)
    nd = len(size)
    if nd not in (2, 3):
        raise ParameterError(f"phantom size must be 2-D or 3-D, got {size}")
    rng = np.random.default_rng(seed)
    grids = _grids(size)

    # Slice axis semi-axis > 1: the volume covers brain slices only, so
    # every slice of a 3-D phantom contains brain (and no mask slice is
    # empty), matching how acquisitions are cropped upstream.
    center = rng.uniform(-0.03, 0.03, nd)
    if nd == 3:
        center[2] = 0.0
    head_ax = np.array([0.88, 0.88, 1.18][:nd]) * (1.0 + rng.uniform(-0.01, 0.01, nd))
    brain_ax = head_ax * 0.94
    head = _ellipse(grids, center, head_ax)
    brain = _ellipse(grids, center, brain_ax)
    skull = head & ~brain
    white = _ellipse(grids, center + rng.uniform(-0.03, 0.03, nd), brain_ax * 0.62)
    vent_off = np.zeros(nd)
    vent_off[1] = 0.18
    vent_ax = brain_ax * np.array([0.28, 0.13, 0.45][:nd])
    vent = (_ellipse(grids, center + vent_off, vent_ax)
            | _ellipse(grids, center - vent_off, vent_ax))
    gray = brain & ~white & ~vent
    white = white & brain & ~vent
    vent = vent & brain

    # Shared blob geometry with modality-specific magnitudes.  Signs are
    # coupled negatively, matching the inverted compartment palettes below:
    # real tissue shows the same structures in both contrasts with a locally
    # consistent intensity relationship, which is what makes windowed
    # cross-correlation informative.  Dense enough that local similarity
    # determines the displacement everywhere inside the brain.
    n_blobs = 16
    blob_t1 = np.zeros(size)
    blob_epi = np.zeros(size)
    for _ in range(n_blobs):
        while True:
            p = rng.uniform(-1.0, 1.0, nd)
            if np.sum(p ** 2) <= 1.0:
                break
        c = center + p * brain_ax * 0.8
        sig = rng.uniform(0.05, 0.16)
        r2 = sum(((g - ci) / sig) ** 2 for g, ci in zip(grids, c))
        bump = np.exp(-0.5 * r2)
        sign = rng.choice([-1.0, 1.0])
        blob_t1 += sign * rng.uniform(0.5, 1.0) * bump
        blob_epi -= sign * rng.uniform(0.5, 1.0) * bump

    # Fine-grained parenchymal texture on the same shared-geometry,
    # negatively-coupled terms; correlation length ~2 voxels keeps it
    # localizing but robust to interpolation smear.
    fine = gaussian_filter(rng.normal(size=size), 2.0)
    fine = fine / fine.std()
    fine_sign = rng.choice([-1.0, 1.0])

    t1w = np.zeros(size)
    t1w[skull] = 0.95
    t1w[gray] = 0.45
    t1w[white] = 0.72
    t1w[vent] = 0.12
    t1w += (0.15 * blob_t1 + fine_sign * rng.uniform(0.10, 0.14) * fine) * brain

    epi = np.zeros(size)
    epi[skull] = 0.08
    epi[gray] = 0.55
    epi[white] = 0.40
    epi[vent] = 0.88
    epi += (0.15 * blob_epi - fine_sign * rng.uniform(0.10, 0.14) * fine) * brain

    t1w = gaussian_filter(t1w, 0.7)
    epi = gaussian_filter(epi, 0.7)

    # Smooth intensity bias plus noise on the EPI only.
    bias_coef = rng.uniform(-0.08, 0.08, nd)
    bias = 1.0 + sum(c * g for c, g in zip(bias_coef, grids))
    epi = epi * bias + rng.normal(0.0, noise_sigma, size)

    t1w = np.clip(t1w, 0.0, 1.0)
    epi = np.clip(epi, 0.0, 1.0)
    mask = brain.astype(np.float64)
    return Volume(t1w), Volume(epi), Volume(mask)


# Canonical susceptibility hotspot sites in normalized coordinates: one
# anterior (frontal sinus analogue), two posterior-lateral (ear canal
# analogues).  Fields across "subjects" share this geometry with
# per-subject amplitudes and positional jitter, like real B0 maps do.
# Sites sit over textured parenchyma, where local similarity can pin the
# displacement, rather than on the locally symmetric skull rim.
_HOTSPOT_SITES = ((0.42, 0.0, -0.35), (-0.30, 0.45, -0.30), (-0.30, -0.45, -0.30))
_HOTSPOT_SIGNS = (1.0, -1.0, -1.0)


def phantom_fieldmap(seed: int, size=(64, 64), max_hz: float = 30.0,
                     smoothness: float = 8.0) -> FieldMap:
    """Smooth off-resonance field, scaled so max |field| == max_hz.

    Hotspots near air-tissue interface analogues (fixed canonical sites,
    per-seed amplitude and jitter) plus a small random low-order
    polynomial; the raw field is blurred with a Gaussian of width
    ``smoothness`` voxels, which bounds the per-voxel gradient of the
    normalized field below max_hz / smoothness.
    """
    size = tuple(int(s) for s in size)
    nd = len(size)
    if max_hz < 0:
        raise ParameterError(f"max_hz must be >= 0, got {max_hz}")
    if smoothness <= 0:
        raise ParameterError(f"smoothness must be positive, got {smoothness}")
    rng = np.random.default_rng(seed)
    if max_hz == 0:
        return FieldMap(np.zeros(size))
    grids = _grids(size)

    lin = rng.normal(0.0, 0.15, nd)
    quad = rng.normal(0.0, 0.15, nd)
    raw = sum(c * g for c, g in zip(lin, grids))
    raw = raw + sum(c * g * g for c, g in zip(quad, grids))

    for site, sign in zip(_HOTSPOT_SITES, _HOTSPOT_SIGNS):
        c = np.array(site[:nd]) + rng.uniform(-0.08, 0.08, nd)
        sig_vox = 2.0
        r2 = sum(((g - ci) * (n - 1) / 2.0 / sig_vox) ** 2
                 for g, ci, n in zip(grids, c, size))
        raw = raw + sign * rng.uniform(0.5, 1.0) * np.exp(-0.5 * r2)

    smoothed = gaussian_filter(raw, smoothness)
    peak = np.abs(smoothed).max()
    if peak == 0.0:
        return FieldMap(np.zeros(size))
    return FieldMap(smoothed * (max_hz / peak))
