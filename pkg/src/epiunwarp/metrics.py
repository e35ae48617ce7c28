"""Image similarity metrics and the statistical comparison toolchain.

NMI uses a joint histogram over equal-width bins spanning each image's
(masked) range, natural-log entropies, and the 2*I/(H_A+H_B) normalization
so values live in [0, 1].  Degenerate conventions: two constant images
give 1, exactly one constant image gives 0.

The group comparison follows one-way ANOVA, Tukey's HSD via an embedded
critical-value table (alpha = 0.05, conservative lookup at the largest
tabulated df not exceeding the actual df), and Benjamini-Hochberg
adjustment of the pairwise p-values.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import ParameterError, ShapeError

# Studentized range critical values q_{0.05}(k, df); rows are k = 2..10,
# columns follow _TUKEY_DFS.  Standard table, 4 decimals.
_TUKEY_DFS = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10,
              11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 24, 30, 40, 60, 120)
_TUKEY_Q05 = {
    2: (17.9693, 6.0849, 4.5007, 3.9265, 3.6354, 3.4605, 3.3441, 3.2612, 3.1992,
        3.1511, 3.1127, 3.0813, 3.0552, 3.0332, 3.0143, 2.9980, 2.9837, 2.9712,
        2.9600, 2.9500, 2.9188, 2.8882, 2.8582, 2.8288, 2.8000),
    3: (26.9755, 8.3308, 5.9096, 5.0402, 4.6017, 4.3392, 4.1649, 4.0410, 3.9485,
        3.8768, 3.8196, 3.7729, 3.7341, 3.7014, 3.6734, 3.6491, 3.6280, 3.6093,
        3.5927, 3.5779, 3.5317, 3.4864, 3.4421, 3.3987, 3.3561),
    4: (32.8187, 9.7980, 6.8245, 5.7571, 5.2183, 4.8956, 4.6813, 4.5288, 4.4149,
        4.3266, 4.2561, 4.1987, 4.1509, 4.1105, 4.0760, 4.0461, 4.0200, 3.9970,
        3.9766, 3.9583, 3.9013, 3.8454, 3.7907, 3.7371, 3.6846),
    5: (37.0815, 10.8811, 7.5017, 6.2870, 5.6731, 5.3049, 5.0601, 4.8858, 4.7554,
        4.6543, 4.5736, 4.5077, 4.4529, 4.4066, 4.3670, 4.3327, 4.3027, 4.2763,
        4.2528, 4.2319, 4.1663, 4.1021, 4.0391, 3.9774, 3.9169),
    6: (40.4076, 11.7343, 8.0371, 6.7064, 6.0329, 5.6284, 5.3591, 5.1672, 5.0235,
        4.9120, 4.8230, 4.7502, 4.6897, 4.6385, 4.5947, 4.5568, 4.5237, 4.4944,
        4.4685, 4.4452, 4.3727, 4.3015, 4.2316, 4.1632, 4.0960),
    7: (43.1186, 12.4349, 8.4783, 7.0526, 6.3299, 5.8953, 5.6057, 5.3991, 5.2444,
        5.1242, 5.0281, 4.9496, 4.8842, 4.8290, 4.7816, 4.7406, 4.7048, 4.6731,
        4.6450, 4.6199, 4.5413, 4.4642, 4.3885, 4.3141, 4.2412),
    8: (45.3973, 13.0273, 8.8525, 7.3465, 6.5823, 6.1222, 5.8153, 5.5962, 5.4319,
        5.3042, 5.2021, 5.1187, 5.0491, 4.9903, 4.9399, 4.8962, 4.8580, 4.8243,
        4.7944, 4.7676, 4.6838, 4.6014, 4.5205, 4.4411, 4.3630),
    9: (47.3566, 13.5390, 9.1766, 7.6015, 6.8014, 6.3192, 5.9973, 5.7673, 5.5947,
        5.4605, 5.3531, 5.2653, 5.1921, 5.1301, 5.0770, 5.0310, 4.9907, 4.9552,
        4.9236, 4.8954, 4.8069, 4.7199, 4.6345, 4.5504, 4.4678),
    10: (49.0710, 13.9885, 9.4620, 7.8263, 6.9947, 6.4931, 6.1579, 5.9183, 5.7384,
         5.5984, 5.4863, 5.3946, 5.3181, 5.2534, 5.1979, 5.1498, 5.1077, 5.0705,
         5.0375, 5.0079, 4.9152, 4.8241, 4.7345, 4.6463, 4.5595),
}

PSNR_CAP_DB = 99.0


def _entropy(p):
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def nmi(a, b, bins: int = 32, mask=None) -> float:
    """Normalized mutual information, 2*I(A;B)/(H(A)+H(B)), in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"nmi: shape mismatch {a.shape} vs {b.shape}")
    if bins < 2:
        raise ParameterError(f"nmi: bins must be >= 2, got {bins}")
    if mask is not None:
        sel = np.asarray(mask) > 0
        if sel.shape != a.shape:
            raise ShapeError(f"nmi: mask shape {sel.shape} != image shape {a.shape}")
        if not sel.any():
            raise ParameterError("nmi: mask selects no voxels")
        av, bv = a[sel], b[sel]
    else:
        av, bv = a.ravel(), b.ravel()
    a_const = av.min() == av.max()
    b_const = bv.min() == bv.max()
    if a_const and b_const:
        return 1.0
    if a_const or b_const:
        return 0.0
    hist, _, _ = np.histogram2d(
        av, bv, bins=bins,
        range=[[av.min(), av.max()], [bv.min(), bv.max()]])
    pxy = hist / hist.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    h_a = _entropy(px)
    h_b = _entropy(py)
    h_ab = _entropy(pxy.ravel())
    info = h_a + h_b - h_ab
    return 2.0 * info / (h_a + h_b)


def ssim(a, b, window: int = 8, windowing: str = "blocks",
         dynamic_range: float = 1.0) -> float:
    """Structural similarity with C1=(0.01 L)^2, C2=(0.03 L)^2.

    ``windowing`` is "blocks" (non-overlapping window x window tiles) or
    "gaussian" (sliding Gaussian window, sigma = 1.5, fully supported
    positions only).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if any(window > e for e in a.shape):
        raise ParameterError(f"ssim: window {window} larger than image {a.shape}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    if windowing == "blocks":
        trimmed = tuple((e // window) * window for e in a.shape)
        sl = tuple(slice(0, t) for t in trimmed)
        at, bt = a[sl], b[sl]
        # Fold each axis into (tiles, window) and move window axes last.
        shape = []
        for t in trimmed:
            shape.extend([t // window, window])
        at = at.reshape(shape)
        bt = bt.reshape(shape)
        win_axes = tuple(range(1, len(shape), 2))
        nw = window ** a.ndim
        mu_a = at.mean(axis=win_axes)
        mu_b = bt.mean(axis=win_axes)
        var_a = at.var(axis=win_axes, ddof=1)
        var_b = bt.var(axis=win_axes, ddof=1)
        cov = ((at * bt).sum(axis=win_axes) - nw * mu_a * mu_b) / (nw - 1)
    elif windowing == "gaussian":
        if a.ndim != 2:
            raise ParameterError("ssim: gaussian windowing supports 2-D images")
        half = window // 2
        ax = np.arange(window) - half
        g1 = np.exp(-0.5 * (ax / 1.5) ** 2)
        g1 /= g1.sum()
        kern = np.outer(g1, g1)

        def wfilt(img):
            from numpy.lib.stride_tricks import sliding_window_view
            win = sliding_window_view(img, (window, window))
            return np.einsum("ijuv,uv->ij", win, kern)

        mu_a = wfilt(a)
        mu_b = wfilt(b)
        var_a = wfilt(a * a) - mu_a ** 2
        var_b = wfilt(b * b) - mu_b ** 2
        cov = wfilt(a * b) - mu_a * mu_b
    else:
        raise ParameterError(f"ssim: unknown windowing {windowing!r}")

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b, dynamic_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(dynamic_range ** 2 / mse))


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------

def _validate_groups(groups, who):
    if len(groups) < 2:
        raise ParameterError(f"{who}: need >= 2 groups, got {len(groups)}")
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    for i, g in enumerate(arrays):
        if g.size < 2:
            raise ParameterError(f"{who}: group {i} has {g.size} samples, need >= 2")
    return arrays


def anova_oneway(groups):
    """One-way ANOVA; returns (F, p) with p from the F survival function."""
    arrays = _validate_groups(groups, "anova_oneway")
    k = len(arrays)
    n_total = sum(g.size for g in arrays)
    grand = sum(g.sum() for g in arrays) / n_total
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in arrays)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    dfb = k - 1
    dfw = n_total - k
    if ssw == 0.0:
        if ssb == 0.0:
            return 0.0, 1.0
        return math.inf, 0.0
    f_stat = (ssb / dfb) / (ssw / dfw)
    # P(F > f) via the regularized incomplete beta.
    x = dfw / (dfw + dfb * f_stat)
    p = float(betainc(dfw / 2.0, dfb / 2.0, x))
    return float(f_stat), min(max(p, 0.0), 1.0)


@dataclass
class PairComparison:
    index_a: int
    index_b: int
    mean_diff: float  # mean(b) - mean(a)
    q_statistic: float
    significant: bool


def tukey_hsd(groups, alpha: float = 0.05):
    """All pairwise comparisons via the studentized range table.

    The critical value is looked up at the largest tabulated df that does
    not exceed the within-group df (conservative).
    """
    if alpha != 0.05:
        raise ParameterError(f"tukey_hsd: supported alpha levels: 0.05 (got {alpha})")
    arrays = _validate_groups(groups, "tukey_hsd")
    k = len(arrays)
    if k > 10:
        raise ParameterError(f"tukey_hsd: table covers k <= 10 groups, got {k}")
    n_total = sum(g.size for g in arrays)
    dfw = n_total - k
    ssw = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    msw = ssw / dfw
    df_idx = 0
    for i, df in enumerate(_TUKEY_DFS):
        if df <= dfw:
            df_idx = i
    q_crit = _TUKEY_Q05[k][df_idx]
    results = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = arrays[j].mean() - arrays[i].mean()
            se2 = (msw / 2.0) * (1.0 / arrays[i].size + 1.0 / arrays[j].size)
            if se2 == 0.0:
                q = 0.0 if diff == 0.0 else math.inf
            else:
                q = abs(diff) / math.sqrt(se2)
            results.append(PairComparison(i, j, float(diff), float(q), q > q_crit))
    return results


def bh_adjust(pvals):
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ParameterError("bh_adjust: expected a non-empty 1-D list of p-values")
    if np.any((p < 0) | (p > 1)):
        raise ParameterError("bh_adjust: p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out.tolist()


# --------------------------------------------------------------------------
# Slice-wise reporting
# --------------------------------------------------------------------------

@dataclass
class PairStat:
    method_a: str
    method_b: str
    mean_diff: float
    q_statistic: float
    tukey_significant: bool
    p_raw: float
    p_adjusted: float


@dataclass
class StatsBlock:
    anova_f: float
    anova_p: float
    pairs: list


@dataclass
class MetricsReport:
    methods: list
    per_slice: dict            # method -> metric -> list of per-slice values
    aggregates: dict           # method -> metric -> (mean, sd)
    baseline: str | None = None
    stats: StatsBlock | None = None

    def to_tsv(self) -> str:
        lines = ["section\tmethod\tmetric\tslice\tvalue"]
        for method in self.methods:
            for metric, values in self.per_slice[method].items():
                for s, v in enumerate(values):
                    lines.append(f"per_slice\t{method}\t{metric}\t{s}\t{v:.10g}")
        for method in self.methods:
            for metric, (mean_v, sd_v) in self.aggregates[method].items():
                lines.append(f"aggregate\t{method}\t{metric}_mean\t-\t{mean_v:.10g}")
                lines.append(f"aggregate\t{method}\t{metric}_sd\t-\t{sd_v:.10g}")
        if self.stats is not None:
            lines.append(f"anova\t-\tF\t-\t{self.stats.anova_f:.10g}")
            lines.append(f"anova\t-\tp\t-\t{self.stats.anova_p:.10g}")
            for pr in self.stats.pairs:
                lines.append(
                    f"pair\t{pr.method_a} vs {pr.method_b}\tmean_diff\t-\t{pr.mean_diff:.10g}")
                lines.append(
                    f"pair\t{pr.method_a} vs {pr.method_b}\tq\t-\t{pr.q_statistic:.10g}")
                lines.append(
                    f"pair\t{pr.method_a} vs {pr.method_b}\ttukey_significant\t-\t"
                    f"{int(pr.tukey_significant)}")
                lines.append(
                    f"pair\t{pr.method_a} vs {pr.method_b}\tp_raw\t-\t{pr.p_raw:.10g}")
                lines.append(
                    f"pair\t{pr.method_a} vs {pr.method_b}\tp_adjusted\t-\t{pr.p_adjusted:.10g}")
        return "\n".join(lines) + "\n"

    def render_text(self) -> str:
        out = ["Method comparison (slice-wise)", ""]
        header = f"{'method':<20}" + "".join(
            f"{m + ' mean±sd':>22}" for m in sorted(
                {metric for pm in self.per_slice.values() for metric in pm}))
        out.append(header)
        metric_names = sorted({m for pm in self.per_slice.values() for m in pm})
        for method in self.methods:
            row = f"{method:<20}"
            for metric in metric_names:
                if metric in self.aggregates[method]:
                    mean_v, sd_v = self.aggregates[method][metric]
                    row += f"{mean_v:>14.4f} ± {sd_v:<6.4f}"
                else:
                    row += f"{'-':>22}"
            out.append(row)
        if self.stats is not None:
            out.append("")
            out.append(f"one-way ANOVA on per-slice NMI: F = {self.stats.anova_f:.4f}, "
                       f"p = {self.stats.anova_p:.4g}")
            out.append(f"{'pair':<40}{'mean diff':>12}{'Tukey':>8}{'p (BH)':>12}")
            for pr in self.stats.pairs:
                out.append(f"{pr.method_a + ' vs ' + pr.method_b:<40}"
                           f"{pr.mean_diff:>12.5f}"
                           f"{'*' if pr.tukey_significant else '':>8}"
                           f"{pr.p_adjusted:>12.4g}")
        return "\n".join(out) + "\n"


def _as_slices(stack, who):
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim == 2:
        return [arr]
    if arr.ndim == 3:
        return [arr[:, :, s] for s in range(arr.shape[2])]
    raise ShapeError(f"{who}: expected a 2-D slice or 3-D stack, got rank {arr.ndim}")


def slicewise_report(methods: dict, reference_t1w, baseline: str | None = None,
                     mask=None, bins: int = 32, alpha: float = 0.05) -> MetricsReport:
    """Per-slice NMI vs the reference for every method, SSIM/PSNR vs an
    optional baseline method, and the ANOVA/Tukey/BH comparison of the
    per-slice NMI across methods."""
    if not methods:
        raise ParameterError("slicewise_report: no methods given")
    ref_slices = _as_slices(reference_t1w, "reference_t1w")
    mask_slices = None if mask is None else _as_slices(mask, "mask")
    method_slices = {}
    for name, stack in methods.items():
        sl = _as_slices(stack, f"method {name!r}")
        if len(sl) != len(ref_slices):
            raise ShapeError(
                f"slicewise_report: method {name!r} has {len(sl)} slices, "
                f"reference has {len(ref_slices)}")
        method_slices[name] = sl
    if baseline is not None and baseline not in methods:
        raise ParameterError(f"slicewise_report: baseline {baseline!r} not among methods")

    names = list(methods)
    per_slice = {name: {} for name in names}
    for name in names:
        vals = []
        for s, (m_sl, r_sl) in enumerate(zip(method_slices[name], ref_slices)):
            m = None if mask_slices is None else mask_slices[min(s, len(mask_slices) - 1)]
            vals.append(nmi(m_sl, r_sl, bins=bins, mask=m))
        per_slice[name]["nmi"] = vals
    if baseline is not None:
        base = method_slices[baseline]
        for name in names:
            if name == baseline:
                continue
            ssim_vals = [ssim(m_sl, b_sl) for m_sl, b_sl in zip(method_slices[name], base)]
            psnr_vals = [psnr(m_sl, b_sl) for m_sl, b_sl in zip(method_slices[name], base)]
            per_slice[name]["ssim_vs_baseline"] = ssim_vals
            per_slice[name]["psnr_vs_baseline"] = psnr_vals

    aggregates = {}
    for name in names:
        aggregates[name] = {}
        for metric, vals in per_slice[name].items():
            arr = np.asarray(vals)
            aggregates[name][metric] = (float(arr.mean()),
                                        float(arr.std(ddof=1)) if arr.size > 1 else 0.0)

    stats = None
    groups = [per_slice[name]["nmi"] for name in names]
    if len(names) >= 2 and all(len(g) >= 2 for g in groups):
        f_stat, p_raw = anova_oneway(groups)
        tukey = tukey_hsd(groups, alpha=alpha)
        pair_p = [anova_oneway([groups[pc.index_a], groups[pc.index_b]])[1] for pc in tukey]
        adj = bh_adjust(pair_p)
        pairs = [
            PairStat(names[pc.index_a], names[pc.index_b], pc.mean_diff,
                     pc.q_statistic, pc.significant, pair_p[i], adj[i])
            for i, pc in enumerate(tukey)
        ]
        stats = StatsBlock(f_stat, p_raw, pairs)
    return MetricsReport(names, per_slice, aggregates, baseline, stats)
