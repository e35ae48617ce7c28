"""Encoder-decoder displacement estimator.

Two single-channel images (anatomical reference and distorted EPI) are
concatenated into a two-channel input; stride-2 convolutions halve the
resolution on the way down, nearest upsampling and skip concatenations
restore it on the way up, and a final single-filter linear convolution
emits the displacement map in voxel units along the phase-encode axis.

Weight persistence is a raw little-endian float32 blob plus a plain-text
manifest describing tensor order, shapes, byte offsets and the producing
configuration.
"""

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat_channels, conv_nd, leaky_relu, reshape, upsample_nearest
from .errors import ConfigError, ShapeError, WeightsFormatError
from .ioutil import write_bytes_atomic, write_text_atomic

_MANIFEST_HEADER = "epiunwarp-weights v1"


@dataclass(frozen=True)
class UNetConfig:
    dims: int = 2
    encoder_filters: tuple = (16, 32, 32, 32)
    decoder_filters: tuple = (32, 32, 32, 16, 16)
    leaky_slope: float = 0.2
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if self.kernel_size != 3:
            raise ConfigError(f"kernel_size is fixed at 3, got {self.kernel_size}")
        enc = tuple(int(f) for f in self.encoder_filters)
        dec = tuple(int(f) for f in self.decoder_filters)
        object.__setattr__(self, "encoder_filters", enc)
        object.__setattr__(self, "decoder_filters", dec)
        if not enc or any(f < 1 for f in enc) or any(f < 1 for f in dec):
            raise ConfigError("filter counts must be positive")
        if len(dec) != len(enc) + 1:
            raise ConfigError(
                f"decoder_filters must have len(encoder_filters)+1 entries "
                f"({len(enc) + 1}), got {len(dec)}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0,1), got {self.leaky_slope}")

    def layer_channels(self):
        """(name, in_channels, out_channels) for every conv layer, in order."""
        enc, dec = self.encoder_filters, self.decoder_filters
        depth = len(enc)
        layers = []
        c = 2
        for i, f in enumerate(enc):
            layers.append((f"enc{i}", c, f))
            c = f
        for j in range(depth + 1):
            if j > 0:
                skip = 2 if j == depth else enc[depth - 1 - j]
                c = dec[j - 1] + skip
            layers.append((f"dec{j}", c, dec[j]))
        layers.append(("out", dec[depth], 1))
        return layers


class UNetWeights:
    """Ordered named parameter tensors plus the producing config.

    Tensors are float32 by default (the persistent dtype); float64 copies
    for gradient testing come from :meth:`astype`.
    """

    def __init__(self, config: UNetConfig, tensors: dict, meta: dict | None = None):
        self.config = config
        self.tensors = tensors
        self.meta = dict(meta or {})

    def names(self):
        return list(self.tensors)

    def parameters(self):
        return list(self.tensors.values())

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def astype(self, dtype) -> "UNetWeights":
        cast = {
            name: Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self.tensors.items()
        }
        return UNetWeights(self.config, cast, self.meta)


def _expected_shapes(config: UNetConfig):
    n = config.dims
    shapes = {}
    for name, c_in, c_out in config.layer_channels():
        shapes[f"{name}.kernel"] = (c_out, c_in) + (3,) * n
        shapes[f"{name}.bias"] = (c_out,)
    return shapes


def unet_init(config: UNetConfig, dtype=np.float32) -> UNetWeights:
    """Deterministic initialization from config.seed.

    Hidden kernels are fan-in-scaled uniform; the final single-filter layer
    is near zero (sigma 1e-5) so the initial displacement map is ~0 and the
    initial corrected image is ~the input.
    """
    rng = np.random.default_rng(config.seed)
    n = config.dims
    tensors = {}
    for name, c_in, c_out in config.layer_channels():
        kshape = (c_out, c_in) + (3,) * n
        if name == "out":
            kern = rng.normal(0.0, 1e-5, size=kshape)
        else:
            bound = np.sqrt(1.0 / (c_in * 3 ** n))
            kern = rng.uniform(-bound, bound, size=kshape)
        tensors[f"{name}.kernel"] = Tensor(kern.astype(dtype), requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return UNetWeights(config, tensors)


def unet_forward(weights: UNetWeights, t1w: Tensor, epi: Tensor) -> Tensor:
    """Estimate the displacement map; output matches the input spatial extent."""
    cfg = weights.config
    if t1w.data.shape != epi.data.shape:
        raise ShapeError(f"unet_forward: input shapes differ {t1w.data.shape} vs {epi.data.shape}")
    if t1w.data.ndim != cfg.dims:
        raise ConfigError(
            f"unet_forward: {t1w.data.ndim}-D input incompatible with dims={cfg.dims} config")
    spatial = t1w.data.shape
    slope = cfg.leaky_slope
    w = weights.tensors

    x = concat_channels(reshape(t1w, (1,) + spatial), reshape(epi, (1,) + spatial))
    depth = len(cfg.encoder_filters)
    skips = [x]
    strides_used = []
    h = x
    for i in range(depth):
        st = tuple(2 if e % 2 == 0 else 1 for e in h.data.shape[1:])
        h = leaky_relu(conv_nd(h, w[f"enc{i}.kernel"], w[f"enc{i}.bias"], stride=st), slope)
        strides_used.append(st)
        skips.append(h)
    for j in range(depth):
        h = leaky_relu(conv_nd(h, w[f"dec{j}.kernel"], w[f"dec{j}.bias"], stride=1), slope)
        h = upsample_nearest(h, strides_used[depth - 1 - j])
        h = concat_channels(h, skips[depth - 1 - j])
    h = leaky_relu(conv_nd(h, w[f"dec{depth}.kernel"], w[f"dec{depth}.bias"], stride=1), slope)
    g = conv_nd(h, w["out.kernel"], w["out.bias"], stride=1)
    return reshape(g, spatial)


# --------------------------------------------------------------------------
# Persistence: float32 blob + text manifest
# --------------------------------------------------------------------------

def _manifest_path(path):
    return str(path) + ".manifest"


def weights_save(weights: UNetWeights, path):
    """Write the binary blob at ``path`` and its manifest at ``path``.manifest."""
    cfg = weights.config
    chunks = []
    lines = [
        _MANIFEST_HEADER,
        f"dims={cfg.dims}",
        "encoder_filters=" + ",".join(str(f) for f in cfg.encoder_filters),
        "decoder_filters=" + ",".join(str(f) for f in cfg.decoder_filters),
        f"leaky_slope={cfg.leaky_slope!r}",
        f"kernel_size={cfg.kernel_size}",
        f"seed={cfg.seed}",
        f"mode={weights.meta.get('mode', '-')}",
        f"lambda_smooth={weights.meta.get('lambda_smooth', '-')}",
    ]
    offset = 0
    for name, t in weights.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in t.data.shape)
        lines.append(f"tensor={name} shape={shape} offset={offset}")
        chunks.append(raw)
        offset += len(raw)
    write_bytes_atomic(path, b"".join(chunks))
    write_text_atomic(_manifest_path(path), "\n".join(lines) + "\n")


def _parse_manifest(path):
    mpath = _manifest_path(path)
    if not os.path.exists(mpath):
        raise WeightsFormatError(f"missing manifest file: {mpath}")
    with open(mpath, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise WeightsFormatError(f"{mpath}: not a weights manifest")
    fields = {}
    tensors = []
    for ln in lines[1:]:
        key, _, value = ln.partition("=")
        if key == "tensor":
            name, shape_part, offset_part = value.split(" ")
            shape = tuple(int(s) for s in shape_part.removeprefix("shape=").split(","))
            tensors.append((name, shape, int(offset_part.removeprefix("offset="))))
        else:
            fields[key] = value
    return fields, tensors


def weights_load(path, config: UNetConfig | None = None) -> UNetWeights:
    """Load weights; validates every tensor shape against the config.

    With an explicit ``config``, any disagreement with the manifest raises
    before any tensor is materialized (no partial loads).
    """
    fields, entries = _parse_manifest(path)
    file_config = UNetConfig(
        dims=int(fields["dims"]),
        encoder_filters=tuple(int(f) for f in fields["encoder_filters"].split(",")),
        decoder_filters=tuple(int(f) for f in fields["decoder_filters"].split(",")),
        leaky_slope=float(fields["leaky_slope"]),
        kernel_size=int(fields["kernel_size"]),
        seed=int(fields["seed"]),
    )
    if config is not None:
        for attr in ("dims", "encoder_filters", "decoder_filters", "kernel_size"):
            if getattr(config, attr) != getattr(file_config, attr):
                raise WeightsFormatError(
                    f"{path}: config mismatch on {attr}: "
                    f"file has {getattr(file_config, attr)}, expected {getattr(config, attr)}")
        file_config = config
    expected = _expected_shapes(file_config)
    if [name for name, _, _ in entries] != list(expected):
        raise WeightsFormatError(f"{path}: tensor list does not match config layer plan")
    for name, shape, _ in entries:
        if shape != expected[name]:
            raise WeightsFormatError(
                f"{path}: tensor {name} has shape {shape}, config requires {expected[name]}")
    with open(path, "rb") as fh:
        blob = fh.read()
    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise WeightsFormatError(
                f"{path}: tensor {name} extends past end of blob ({end} > {len(blob)})")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    meta = {}
    if fields.get("mode", "-") != "-":
        meta["mode"] = fields["mode"]
    if fields.get("lambda_smooth", "-") != "-":
        meta["lambda_smooth"] = fields["lambda_smooth"]
    return UNetWeights(file_config, tensors, meta)
