"""Learned ISP network: a flat chain of enhancement attention modules followed by an
attention UNet, mapping a one-channel Bayer mosaic to an sRGB image.

Forward topology::

    raw [N,1,H,W]
      -> stem conv 3x3 (1 -> stem_width)
      -> EAM x eam_count                  (full resolution, variants with EAM)
      -> entry conv 3x3 (only if stem_width != unet_widths[0])
      -> UNet: per level, blocks then stride-2 conv; decoder mirrors with
         nearest-x2 + conv, skip concat, 1x1 merge, blocks
      -> head conv 3x3 (-> 3) -> clamp [0, 1]

UNet blocks are SCA blocks for the ``UNet+SCA`` and ``DelNet`` variants and
plain residual conv blocks otherwise.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

VARIANTS = ("UNet", "UNet+SCA", "UNet+EAM", "DelNet")


class ConfigError(ValueError):
    pass


class InputRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    # defaults are calibrated to 0.508e12 Mult-Adds / 2.74e6 params at 2976x4000
    stem_width: int = 12
    eam_count: int = 2
    eam_dilations: tuple[int, ...] = (1, 2, 3)
    unet_levels: int = 6
    unet_widths: tuple[int, ...] = (8, 16, 32, 64, 128, 240)
    sca_per_level: int = 1
    variant: str = "DelNet"
    spatial_kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "eam_dilations", tuple(int(d) for d in self.eam_dilations))
        object.__setattr__(self, "unet_widths", tuple(int(w) for w in self.unet_widths))
        self.validate()

    @property
    def has_sca(self) -> bool:
        return self.variant in ("UNet+SCA", "DelNet")

    @property
    def has_eam(self) -> bool:
        return self.variant in ("UNet+EAM", "DelNet")

    @property
    def divisor(self) -> int:
        return 2 ** (self.unet_levels - 1)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.stem_width < 1:
            raise ConfigError("stem_width must be >= 1")
        if self.unet_levels < 1:
            raise ConfigError("unet_levels must be >= 1")
        if len(self.unet_widths) != self.unet_levels:
            raise ConfigError(f"unet_widths has {len(self.unet_widths)} entries for "
                              f"{self.unet_levels} levels")
        if any(b <= a for a, b in zip(self.unet_widths, self.unet_widths[1:])):
            raise ConfigError(f"unet_widths must be strictly increasing, got {self.unet_widths}")
        if self.unet_widths[0] < 1:
            raise ConfigError("unet_widths must be positive")
        if self.sca_per_level < 0 or self.eam_count < 0:
            raise ConfigError("block counts must be non-negative")
        if self.has_eam and (self.eam_count < 1 or not self.eam_dilations):
            raise ConfigError("variants with EAM need eam_count >= 1 and at least one dilation")
        if self.has_sca and self.sca_per_level < 1:
            raise ConfigError("variants with SCA need sca_per_level >= 1")
        if any(d < 1 for d in self.eam_dilations):
            raise ConfigError("dilations must be >= 1")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial_kernel must be a positive odd integer")

    def with_variant(self, variant: str) -> "ArchConfig":
        return replace(self, variant=variant)

    def check_input(self, h: int, w: int) -> None:
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"input extents {h}x{w} must be divisible by {self.divisor} "
                             f"for {self.unet_levels} UNet levels", (h, w))

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ArchConfig":
        known = cls.__dataclass_fields__
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown ArchConfig key {key!r}")
            if key == "variant":
                kwargs[key] = raw.strip()
            elif key in ("eam_dilations", "unet_widths"):
                kwargs[key] = tuple(int(v) for v in str(raw).split(",") if v.strip())
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


DEFAULT_CONFIG = ArchConfig()


# -- parameters ----------------------------------------------------------------


class ModelParams(Mapping):
    """Ordered, immutable name -> Tensor map of learnable weights."""

    def __init__(self, tensors: Mapping[str, Tensor], seed: int | None = None):
        self._tensors = dict(tensors)
        self.seed = seed

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def num_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def replace(self, updates: Mapping[str, Tensor]) -> "ModelParams":
        merged = dict(self._tensors)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = v
        return ModelParams(merged, self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), requires_grad=True)
                            for k, v in self._tensors.items()}, self.seed)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.num_scalars()} scalars)"


PRELU_INIT = 0.25
# He et al. fan-in gain for a conv feeding a PReLU with slope PRELU_INIT
PRELU_GAIN = 2.0 / (1.0 + PRELU_INIT ** 2)
# last conv of every residual branch starts small so stacked blocks stay near identity
RESIDUAL_GAIN = 0.01
# the output head starts near mid-grey so the [0,1] clamp passes gradients everywhere
HEAD_GAIN = 0.01
HEAD_BIAS = 0.5


@dataclass
class _Spec:
    """Shape plan used by :func:`init_params`."""
    shapes: dict[str, tuple] = field(default_factory=dict)

    def conv(self, name: str, cin: int, cout: int, k: int, gain: float = 1.0) -> None:
        self.shapes[f"{name}.weight"] = ("conv", (cout, cin, k, k), gain)
        self.shapes[f"{name}.bias"] = ("bias", (cout,), 0.0)

    def prelu(self, name: str, c: int) -> None:
        self.shapes[f"{name}.slope"] = ("slope", (c,), PRELU_INIT)


def _plan_res(spec: _Spec, prefix: str, c: int, sca: bool, spatial_kernel: int) -> None:
    spec.conv(f"{prefix}.conv1", c, c, 3, PRELU_GAIN)
    spec.prelu(f"{prefix}.prelu", c)
    spec.conv(f"{prefix}.conv2", c, c, 3, RESIDUAL_GAIN)
    if sca:
        spec.conv(f"{prefix}.ca", c, c, 1)
        spec.conv(f"{prefix}.sa", 2, 1, spatial_kernel)


def _plan_eam(spec: _Spec, prefix: str, c: int, dilations) -> None:
    for k, _ in enumerate(dilations):
        spec.conv(f"{prefix}.branch{k}", c, c, 3, PRELU_GAIN)
        spec.prelu(f"{prefix}.branch{k}.prelu", c)
    spec.conv(f"{prefix}.merge", len(dilations) * c, c, 3, RESIDUAL_GAIN)
    spec.conv(f"{prefix}.local1", c, c, 3, PRELU_GAIN)
    spec.prelu(f"{prefix}.local.prelu", c)
    spec.conv(f"{prefix}.local2", c, c, 3, RESIDUAL_GAIN)
    spec.conv(f"{prefix}.ca", c, c, 1)


def block_prefixes(config: ArchConfig):
    """UNet block names in execution order as ``(prefix, level)`` pairs."""
    out = []
    kind = "sca" if config.has_sca else "res"
    for lvl in range(config.unet_levels):
        out += [(f"unet.enc{lvl}.{kind}{j}", lvl) for j in range(config.sca_per_level)]
    for lvl in reversed(range(config.unet_levels - 1)):
        out += [(f"unet.dec{lvl}.{kind}{j}", lvl) for j in range(config.sca_per_level)]
    return out


def _plan(config: ArchConfig) -> _Spec:
    spec = _Spec()
    s, widths = config.stem_width, config.unet_widths
    spec.conv("stem", 1, s, 3)
    if config.has_eam:
        for i in range(config.eam_count):
            _plan_eam(spec, f"eam.{i}", s, config.eam_dilations)
    if s != widths[0]:
        spec.conv("entry", s, widths[0], 3)
    levels = config.unet_levels
    kind = "sca" if config.has_sca else "res"
    for lvl in range(levels):
        for j in range(config.sca_per_level):
            _plan_res(spec, f"unet.enc{lvl}.{kind}{j}", widths[lvl], config.has_sca,
                      config.spatial_kernel)
        if lvl < levels - 1:
            spec.conv(f"unet.down{lvl}", widths[lvl], widths[lvl + 1], 3)
    for lvl in reversed(range(levels - 1)):
        spec.conv(f"unet.up{lvl}", widths[lvl + 1], widths[lvl], 3)
        spec.conv(f"unet.merge{lvl}", 2 * widths[lvl], widths[lvl], 1)
        for j in range(config.sca_per_level):
            _plan_res(spec, f"unet.dec{lvl}.{kind}{j}", widths[lvl], config.has_sca,
                      config.spatial_kernel)
    spec.conv("head", widths[0], 3, 3, HEAD_GAIN)
    spec.shapes["head.bias"] = ("bias", (3,), HEAD_BIAS)
    return spec


def param_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, (_, shape, _) in _plan(config).shapes.items()}


def init_params(config: ArchConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He fan-in normal conv weights, zero biases, PReLU slopes of 0.25.

    Weight std is ``sqrt(gain / fan_in)``: gain ``2/(1+0.25**2)`` for convs
    followed by a PReLU, 1 for linear convs, and :data:`RESIDUAL_GAIN` for the
    conv closing each residual branch. The output head is the one exception to
    zero biases: it starts at :data:`HEAD_BIAS`.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (kind, shape, gain) in _plan(config).shapes.items():
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        else:
            data = np.full(shape, gain)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ModelParams(tensors, seed)


# -- blocks ----------------------------------------------------------------------


def _conv(x: Tensor, p: Mapping[str, Tensor], name: str, dilation: int = 1, stride: int = 1) -> Tensor:
    w = p[f"{name}.weight"]
    k = w.shape[-1]
    return ops.conv2d(x, w, p[f"{name}.bias"], stride=stride,
                      padding=ops.same_padding(k, dilation), dilation=dilation)


def _check_width(x: Tensor, p: Mapping[str, Tensor], name: str, block: str) -> None:
    c = p[f"{name}.weight"].shape[1]
    if x.ndim != 4 or x.shape[1] != c:
        prefix = name.rsplit(".", 1)[0]
        raise ShapeError(f"{block} {prefix!r}: input {x.shape} does not match configured width {c}",
                         x.shape)


def channel_attention(t: Tensor, p, prefix: str) -> Tensor:
    return ops.mul(t, ops.sigmoid(_conv(ops.global_avg_pool(t), p, f"{prefix}.ca")))


def spatial_attention(t: Tensor, p, prefix: str) -> Tensor:
    pooled = ops.concat_channels(ops.channel_pool(t, "mean"), ops.channel_pool(t, "max"))
    return ops.mul(t, ops.sigmoid(_conv(pooled, p, f"{prefix}.sa")))


def res_block(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """conv3x3 -> PReLU -> conv3x3 with an identity skip (the plain-UNet block)."""
    _check_width(x, p, f"{prefix}.conv1", "res_block")
    t = _conv(ops.prelu(_conv(x, p, f"{prefix}.conv1"), p[f"{prefix}.prelu.slope"]), p, f"{prefix}.conv2")
    return ops.add(x, t)


def sca_block(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Spatial and channel attention block.

    The transformed features are reweighted per channel (global average pool,
    1x1 conv, sigmoid) and per pixel (channel mean/max maps, conv, sigmoid);
    the two results are summed and added to the block input.
    """
    _check_width(x, p, f"{prefix}.conv1", "sca_block")
    t = _conv(ops.prelu(_conv(x, p, f"{prefix}.conv1"), p[f"{prefix}.prelu.slope"]), p, f"{prefix}.conv2")
    return ops.add(x, ops.add(channel_attention(t, p, prefix), spatial_attention(t, p, prefix)))


def eam_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, dilations) -> Tensor:
    """Enhancement attention module.

    Parallel dilated 3x3 branches, concat, 3x3 merge, a conv pair with a local
    skip, channel attention, then a residual add with the block input.
    """
    _check_width(x, p, f"{prefix}.branch0", "eam_block")
    branches = [ops.prelu(_conv(x, p, f"{prefix}.branch{k}", dilation=d),
                          p[f"{prefix}.branch{k}.prelu.slope"])
                for k, d in enumerate(dilations)]
    merged = _conv(ops.concat_channels(*branches), p, f"{prefix}.merge")
    local = _conv(ops.prelu(_conv(merged, p, f"{prefix}.local1"), p[f"{prefix}.local.prelu.slope"]),
                  p, f"{prefix}.local2")
    local = ops.add(merged, local)
    return ops.add(x, channel_attention(local, p, prefix))


# -- model -------------------------------------------------------------------------


def forward(raw: Tensor, config: ArchConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Map a ``[N,1,H,W]`` mosaic in [0,1] to ``[N,3,H,W]`` RGB in [0,1]."""
    if raw.ndim != 4 or raw.shape[1] != 1:
        raise ShapeError(f"forward: expected [N,1,H,W] raw input, got {raw.shape}", raw.shape)
    config.check_input(raw.shape[2], raw.shape[3])
    lo, hi = float(raw.data.min()), float(raw.data.max())
    if lo < 0.0 or hi > 1.0 or not np.isfinite(lo + hi):
        raise InputRangeError(f"raw values must lie in [0,1], got [{lo}, {hi}]")

    block = sca_block if config.has_sca else res_block
    x = _conv(raw, params, "stem")
    if config.has_eam:
        for i in range(config.eam_count):
            x = eam_block(x, params, f"eam.{i}", config.eam_dilations)
    if config.stem_width != config.unet_widths[0]:
        x = _conv(x, params, "entry")

    levels = config.unet_levels
    prefixes = block_prefixes(config)
    enc = [p for p in prefixes if p[0].startswith("unet.enc")]
    dec = [p for p in prefixes if p[0].startswith("unet.dec")]
    skips = []
    for lvl in range(levels):
        for prefix, _ in (e for e in enc if e[1] == lvl):
            x = block(x, params, prefix)
        if lvl < levels - 1:
            skips.append(x)
            x = ops.downsample(x, params[f"unet.down{lvl}.weight"], params[f"unet.down{lvl}.bias"])
    for lvl in reversed(range(levels - 1)):
        x = ops.upsample(x, params[f"unet.up{lvl}.weight"], params[f"unet.up{lvl}.bias"])
        x = _conv(ops.concat_channels(x, skips[lvl]), params, f"unet.merge{lvl}")
        for prefix, _ in (d for d in dec if d[1] == lvl):
            x = block(x, params, prefix)
    return ops.clamp(_conv(x, params, "head"), 0.0, 1.0)


# -- weights file --------------------------------------------------------------------

WEIGHTS_MAGIC = b"DLW1"
WEIGHTS_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def config_path_for(path) -> Path:
    return Path(str(path) + ".cfg")


def encode_entries(tensors: Mapping[str, Tensor]) -> bytes:
    """``u32 count`` then per tensor: u16 name length, name, u32 rank, extents, f32 data."""
    chunks = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(t.data.astype("<f4").tobytes())
    return b"".join(chunks)


def save_params(path, params: ModelParams, config: ArchConfig | None = None) -> None:
    """Write a DLW1 weights file (float32) and, if given, the config alongside."""
    header = WEIGHTS_MAGIC + struct.pack("<I", WEIGHTS_VERSION)
    Path(path).write_bytes(header + encode_entries(params))
    if config is not None:
        text = config.to_text()
        if params.seed is not None:
            text += f"# seed = {params.seed}\n"
        config_path_for(path).write_text(text)


def decode_entries(buf: bytes, off: int) -> dict[str, Tensor]:
    """Inverse of :func:`encode_entries` starting at byte ``off``; must consume the rest of ``buf``."""
    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(buf):
            raise WeightsFormatError(f"truncated file: {what} needs {n} bytes at offset {offset}, "
                                     f"file has {len(buf)}")

    need(off, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, n, "name")
        name = buf[off: off + n].decode("utf-8")
        off += n
        need(off, 4, f"rank of {name!r}")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank, f"extents of {name!r}")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(shape))
        need(off, nbytes, f"data of {name!r}")
        data = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        off += nbytes
        if name in tensors:
            raise WeightsFormatError(f"duplicate tensor name {name!r} before offset {off}")
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if off != len(buf):
        raise WeightsFormatError(f"{len(buf) - off} trailing bytes at offset {off}")
    return tensors


def decode_params(buf: bytes) -> dict[str, Tensor]:
    if len(buf) < 8:
        raise WeightsFormatError(f"truncated file: header needs 8 bytes at offset 0, file has {len(buf)}")
    if buf[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {buf[:4]!r} at offset 0, expected {WEIGHTS_MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported version {version} at offset 4")
    return decode_entries(buf, 8)


def load_params(path, config: ArchConfig | None = None) -> ModelParams:
    """Read a DLW1 file; with ``config``, names and shapes must match exactly."""
    tensors = decode_params(Path(path).read_bytes())
    if config is not None:
        expected = param_shapes(config)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise WeightsFormatError(f"weights do not match config: missing={missing} extra={extra}")
        bad = [n for n, s in expected.items() if tensors[n].shape != s]
        if bad:
            raise WeightsFormatError(f"shape mismatch for {bad}")
        tensors = {n: tensors[n] for n in expected}
    seed = None
    cfg = config_path_for(path)
    if cfg.exists():
        for line in cfg.read_text().splitlines():
            if line.startswith("# seed ="):
                seed = int(line.split("=", 1)[1])
    return ModelParams(tensors, seed)


def load_config(path) -> ArchConfig:
    return ArchConfig.from_text(Path(path).read_text())
