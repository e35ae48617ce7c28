"""Batch command-line interface.

Subcommands: simulate, train, sweep, correct, evaluate, bench.
Every run writes a resolved-config snapshot next to its outputs, so any
run can be reproduced bit for bit from (snapshot, seed).

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from .distortion import (DisplacementMap, FieldMap, Volume, correct, phantom_brain,
                         phantom_fieldmap, pull_warp, simulate_distortion,
                         vdm_from_fieldmap)
from .errors import (ConfigError, ContractError, NiftiParseError, NumericError,
                     ParameterError, ShapeError, WeightsFormatError)
from .ioutil import write_text_atomic
from .metrics import slicewise_report
from .niftiio import nifti_read, nifti_write
from .pipeline import parse_config_file, preprocess, write_resolved_config
from .trainer import TrainConfig, estimate_gdm, infer_correct, lambda_sweep, train
from .unet import weights_load, weights_save


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p):
    p.add_argument("--config", help="plain-text key=value config file")
    p.add_argument("--out", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="epiunwarp",
                     description="EPI geometric distortion correction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[], help="generate synthetic phantom datasets")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--dims", type=int, choices=(2, 3))
    p.add_argument("--max-hz", type=float)
    p.add_argument("--bw-pe", type=float)
    p.add_argument("--smoothness", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--modulation", action="store_const", const=True)

    p = sub.add_parser("train", help="train a displacement estimator")
    _add_common(p)
    p.add_argument("--data", help="dataset directory from `simulate`")
    p.add_argument("--mode", choices=("supervised", "semi_supervised", "self_supervised"))
    p.add_argument("--dims", type=int, choices=(2, 3))
    p.add_argument("--lambda", dest="lambda_smooth", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder-filters")
    p.add_argument("--decoder-filters")
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("sweep", help="regularization-weight sweep (self-supervised)")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--lambdas")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dims", type=int, choices=(2, 3))
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder-filters")
    p.add_argument("--decoder-filters")

    p = sub.add_parser("correct", help="correct an EPI volume or series")
    _add_common(p)
    p.add_argument("--weights", help="trained weights (dynamic correction)")
    p.add_argument("--static-vdm", help="field-map NIfTI for static baseline correction")
    p.add_argument("--bw-pe", type=float)
    p.add_argument("--epi", required=False)
    p.add_argument("--t1w", required=False)

    p = sub.add_parser("evaluate", help="compare correction methods against a reference")
    _add_common(p)
    p.add_argument("--t1w")
    p.add_argument("--method", action="append", default=None,
                   help="name=path, repeatable")
    p.add_argument("--baseline", help="method name used as SSIM/PSNR reference")
    p.add_argument("--mask")
    p.add_argument("--bins", type=int)

    p = sub.add_parser("bench", help="time per-frame estimation and correction")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--epi")
    p.add_argument("--t1w")
    return parser


class _Resolver:
    """CLI value > config-file value > default; records the resolved set."""

    def __init__(self, args):
        self.args = args
        self.file = parse_config_file(args.config) if getattr(args, "config", None) else {}
        self.resolved = {}

    def get(self, key, default=None, cast=str, required=False, attr=None):
        attr = attr or key.replace("-", "_")
        value = getattr(self.args, attr, None)
        if value is None and key in self.file:
            raw = self.file[key]
            value = (raw.lower() in ("1", "true", "yes")) if cast is bool else cast(raw)
        if value is None:
            value = default
        if required and value is None:
            raise UsageError(f"missing required option --{key}")
        if value is not None:
            self.resolved[key] = value
        return value

    def snapshot(self, outdir, command):
        self.resolved["command"] = command
        write_resolved_config(os.path.join(outdir, "resolved_config.txt"), self.resolved)


def _outdir(res) -> str:
    out = res.get("out", required=True)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    res = _Resolver(args)
    out = _outdir(res)
    seed = res.get("seed", 0, int)
    count = res.get("count", 1, int)
    dims = res.get("dims", 2, int)
    max_hz = res.get("max-hz", 30.0, float)
    bw_pe = res.get("bw-pe", 13.62, float)
    smoothness = res.get("smoothness", 8.0, float)
    noise = res.get("noise", 0.01, float)
    frames = res.get("frames", 0, int)
    modulation = bool(res.get("modulation", False, bool))
    size = (64, 64) if dims == 2 else (64, 64, 32)

    for k in range(count):
        pdir = os.path.join(out, f"phantom_{k:03d}")
        os.makedirs(pdir, exist_ok=True)
        pseed = seed + k
        t1w, epi_truth, mask = phantom_brain(pseed, size, noise_sigma=noise)
        fm = phantom_fieldmap(10_000 + pseed, size, max_hz=max_hz, smoothness=smoothness)
        vdm = vdm_from_fieldmap(fm, bw_pe)
        distorted = simulate_distortion(epi_truth, vdm, intensity_modulation=modulation)
        nifti_write(t1w, os.path.join(pdir, "t1w.nii"))
        nifti_write(epi_truth, os.path.join(pdir, "epi_truth.nii"))
        nifti_write(distorted, os.path.join(pdir, "epi_distorted.nii"))
        nifti_write(mask, os.path.join(pdir, "mask.nii"))
        nifti_write(Volume(fm.data), os.path.join(pdir, "fieldmap.nii"), dtype=np.float64)
        nifti_write(Volume(vdm.data), os.path.join(pdir, "vdm.nii"), dtype=np.float64)
        if frames > 0:
            rng = np.random.default_rng(20_000 + pseed)
            series = np.empty(distorted.data.shape + (frames,))
            for t in range(frames):
                series[..., t] = np.clip(
                    distorted.data + rng.normal(0.0, noise, distorted.data.shape), 0.0, 1.0)
            nifti_write(Volume(series, bw_pe=bw_pe), os.path.join(pdir, "epi_series.nii"))
    res.snapshot(out, "simulate")
    print(f"simulate: wrote {count} phantom(s) to {out}")
    return 0


def _load_dataset(data_dir, need_vdm):
    if not os.path.isdir(data_dir):
        raise ParameterError(f"dataset directory not found: {data_dir}")
    entries = sorted(d for d in os.listdir(data_dir) if d.startswith("phantom_"))
    if not entries:
        raise ParameterError(f"no phantom_* subdirectories in {data_dir}")
    dataset = []
    masks = []
    for name in entries:
        pdir = os.path.join(data_dir, name)
        t1w = nifti_read(os.path.join(pdir, "t1w.nii"))
        epi = nifti_read(os.path.join(pdir, "epi_distorted.nii"))
        epi, t1w = preprocess(epi, t1w)
        vdm = None
        vdm_path = os.path.join(pdir, "vdm.nii")
        if os.path.exists(vdm_path):
            vdm = DisplacementMap(nifti_read(vdm_path).data)
        elif need_vdm:
            raise ParameterError(f"{vdm_path}: missing ground-truth map for supervised mode")
        dataset.append((t1w, epi, vdm))
        mask_path = os.path.join(pdir, "mask.nii")
        masks.append(nifti_read(mask_path).data if os.path.exists(mask_path) else None)
    return dataset, masks


def _parse_filters(text):
    return tuple(int(x) for x in text.split(",")) if text else None


def cmd_train(args) -> int:
    res = _Resolver(args)
    out = _outdir(res)
    data_dir = res.get("data", required=True)
    mode = res.get("mode", "self_supervised")
    dims = res.get("dims", 2, int)
    config = TrainConfig(
        mode=mode,
        dims=dims,
        learning_rate=res.get("lr", 1e-5, float),
        epochs=res.get("epochs", 100, int),
        lambda_smooth=res.get("lambda", 1.0, float, attr="lambda_smooth"),
        seed=res.get("seed", 0, int),
        checkpoint_every=res.get("checkpoint-every", 0, int),
        encoder_filters=_parse_filters(res.get("encoder-filters")),
        decoder_filters=_parse_filters(res.get("decoder-filters")),
    )
    dataset, _ = _load_dataset(data_dir, need_vdm=mode != "self_supervised")
    weights, history = train(dataset, config, checkpoint_dir=out)
    weights_save(weights, os.path.join(out, "weights.bin"))
    lines = [
        json.dumps({"epoch": r.epoch, "total": r.total,
                    "components": r.components, "seconds": r.seconds})
        for r in history.epochs
    ]
    write_text_atomic(os.path.join(out, "history.jsonl"), "\n".join(lines) + "\n")
    res.snapshot(out, "train")
    print(f"train: {config.epochs} epochs, final loss {history.epochs[-1].total:.6g}, "
          f"weights at {os.path.join(out, 'weights.bin')}")
    return 0


def cmd_sweep(args) -> int:
    res = _Resolver(args)
    out = _outdir(res)
    data_dir = res.get("data", required=True)
    lambdas = tuple(float(x) for x in res.get("lambdas", "0,0.5,1,1.5").split(","))
    epochs = res.get("epochs", 25, int)
    base = TrainConfig(
        mode="self_supervised",
        dims=res.get("dims", 2, int),
        learning_rate=res.get("lr", 1e-5, float),
        seed=res.get("seed", 0, int),
        encoder_filters=_parse_filters(res.get("encoder-filters")),
        decoder_filters=_parse_filters(res.get("decoder-filters")),
    )
    dataset, _ = _load_dataset(data_dir, need_vdm=False)
    report = lambda_sweep(dataset, lambdas=lambdas, epochs=epochs, base_config=base)
    lines = ["lambda\tmax_abs_gdm\tmean_smoothness\tmean_nmi"]
    for e in report.entries:
        lines.append(f"{e.lambda_smooth:g}\t{e.max_abs_gdm:.6g}"
                     f"\t{e.mean_smoothness:.6g}\t{e.mean_nmi:.6g}")
    text = "\n".join(lines) + "\n"
    write_text_atomic(os.path.join(out, "sweep.tsv"), text)
    res.snapshot(out, "sweep")
    print(text, end="")
    return 0


def cmd_correct(args) -> int:
    res = _Resolver(args)
    out = _outdir(res)
    epi = nifti_read(res.get("epi", required=True))
    t1w = nifti_read(res.get("t1w", required=True))
    static_vdm = res.get("static-vdm")
    weights_path = res.get("weights")
    if (static_vdm is None) == (weights_path is None):
        raise UsageError("correct: give exactly one of --weights or --static-vdm")
    epi, t1w = preprocess(epi, t1w)

    if static_vdm is not None:
        bw_pe = res.get("bw-pe", required=True, cast=float)
        fm_vol = nifti_read(static_vdm)
        vdm = vdm_from_fieldmap(FieldMap(fm_vol.data), bw_pe)
        if vdm.data.shape != epi.spatial_shape:
            raise ShapeError(
                f"correct: field map shape {vdm.data.shape} != EPI spatial shape "
                f"{epi.spatial_shape}")
        corrected = correct(epi, vdm)
        nifti_write(corrected, os.path.join(out, "corrected.nii"))
        nifti_write(Volume(vdm.data), os.path.join(out, "gdm.nii"), dtype=np.float64)
        n_maps = 1
    else:
        weights = weights_load(weights_path)
        if epi.data.ndim == 4:
            result = infer_correct(weights, epi, t1w)
            corrected = result.corrected
            stack = np.stack([g.data for g in result.gdms], axis=-1)
            nifti_write(corrected, os.path.join(out, "corrected.nii"))
            nifti_write(Volume(stack), os.path.join(out, "gdm.nii"), dtype=np.float64)
            timing = {
                "frames": int(epi.n_frames),
                "estimation_seconds_total": float(result.estimation_seconds.sum()),
                "correction_seconds_total": float(result.correction_seconds.sum()),
            }
            write_text_atomic(os.path.join(out, "timing.json"),
                              json.dumps(timing, indent=2) + "\n")
            n_maps = len(result.gdms)
        else:
            gdm = estimate_gdm(weights, t1w.data, epi.data)
            corrected = epi.like(pull_warp(epi.data, gdm, epi.pe_axis))
            nifti_write(corrected, os.path.join(out, "corrected.nii"))
            nifti_write(Volume(gdm), os.path.join(out, "gdm.nii"), dtype=np.float64)
            n_maps = 1
    res.snapshot(out, "correct")
    print(f"correct: wrote corrected.nii and {n_maps} displacement map(s) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    res = _Resolver(args)
    out = _outdir(res)
    t1w_path = res.get("t1w", required=True)
    specs = getattr(args, "method", None) or []
    if not specs and "methods" in res.file:
        specs = [s.strip() for s in res.file["methods"].split(";") if s.strip()]
    if not specs:
        raise UsageError("evaluate: need at least one --method name=path")
    res.resolved["methods"] = ";".join(specs)
    methods = {}
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"evaluate: --method expects name=path, got {spec!r}")
        name, _, path = spec.partition("=")
        methods[name] = nifti_read(path).data
    reference = nifti_read(t1w_path).data
    mask_path = res.get("mask")
    mask = nifti_read(mask_path).data if mask_path else None
    baseline = res.get("baseline")
    bins = res.get("bins", 32, int)
    report = slicewise_report(methods, reference, baseline=baseline, mask=mask, bins=bins)
    write_text_atomic(os.path.join(out, "report.tsv"), report.to_tsv())
    text = report.render_text()
    write_text_atomic(os.path.join(out, "report.txt"), text)
    res.snapshot(out, "evaluate")
    print(text, end="")
    return 0


def _mmss(seconds: float) -> str:
    m, s = divmod(int(round(seconds)), 60)
    return f"{m:02d}:{s:02d}"


def cmd_bench(args) -> int:
    res = _Resolver(args)
    out = _outdir(res)
    weights = weights_load(res.get("weights", required=True))
    epi = nifti_read(res.get("epi", required=True))
    t1w = nifti_read(res.get("t1w", required=True))
    if epi.data.ndim != 4:
        raise ParameterError("bench: --epi must be a 4-D series")
    epi, t1w = preprocess(epi, t1w)
    result = infer_correct(weights, epi, t1w)
    est, cor = result.estimation_seconds, result.correction_seconds
    total = est.sum() + cor.sum()
    rows = [
        ("GDM estimation [s]", est),
        ("EPI correction [s]", cor),
    ]
    lines = [f"{'stage':<24}{'total [s]':>12}{'per-frame mean ± sd [s]':>28}"]
    tsv = ["stage\ttotal_s\tframe_mean_s\tframe_sd_s"]
    for name, arr in rows:
        lines.append(f"{name:<24}{arr.sum():>12.3f}"
                     f"{arr.mean():>18.5f} ± {arr.std(ddof=1) if arr.size > 1 else 0.0:.5f}")
        tsv.append(f"{name}\t{arr.sum():.6f}\t{arr.mean():.6f}"
                   f"\t{arr.std(ddof=1) if arr.size > 1 else 0.0:.6f}")
    lines.append(f"{'Total [mm:ss]':<24}{_mmss(total):>12}")
    tsv.append(f"Total\t{total:.6f}\t-\t-")
    text = "\n".join(lines) + "\n"
    write_text_atomic(os.path.join(out, "bench.txt"), text)
    write_text_atomic(os.path.join(out, "bench.tsv"), "\n".join(tsv) + "\n")
    res.snapshot(out, "bench")
    print(text, end="")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "correct": cmd_correct,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (NiftiParseError, WeightsFormatError, ShapeError, ParameterError,
            ConfigError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
