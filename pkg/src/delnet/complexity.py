"""Analytic Mult-Adds and parameter accounting.

One MAC is one multiply-accumulate. A convolution costs
``N*H'*W'*Cout*Cin*k*k`` (bias additions are free); PReLU, sigmoid, clamp,
pools and arithmetic elementwise ops cost one per output element; concat and
nearest-neighbour upsampling are pure data movement and cost nothing.

The walk below mirrors :func:`delnet.arch.forward` layer by layer but is
written independently of it, so agreement between the two is a real check.
"""

from __future__ import annotations

from dataclasses import dataclass
from .arch import ArchConfig

CONV_KINDS = ("conv",)
ELEMENTWISE_KINDS = ("prelu", "sigmoid", "clamp", "add", "mul", "gap", "channel_pool")
FREE_KINDS = ("concat", "upsample_nearest")


@dataclass(frozen=True)
class Layer:
    """One counted operation.

    ``shape`` is the input shape ``(N, C, H, W)`` for convolutions and the
    output shape for everything else.
    """
    name: str
    kind: str
    shape: tuple[int, int, int, int]
    cout: int = 0
    k: int = 1
    stride: int = 1
    dilation: int = 1
    learnable: int = 0      # PReLU slope count


@dataclass(frozen=True)
class ComplexityReport:
    per_layer: tuple[tuple[str, int, int], ...]
    total_mult_adds: int
    total_params: int
    input_shape: tuple[int, int]

    @property
    def tera_mult_adds(self) -> float:
        return self.total_mult_adds / 1e12

    @property
    def mega_params(self) -> float:
        return self.total_params / 1e6

    def format_table(self) -> str:
        width = max([len(n) for n, _, _ in self.per_layer] + [5])
        lines = [f"{'layer':<{width}}  {'mult_adds':>16}  {'params':>10}"]
        for name, macs, params in self.per_layer:
            lines.append(f"{name:<{width}}  {macs:>16,d}  {params:>10,d}")
        lines.append("-" * (width + 30))
        lines.append(f"{'total':<{width}}  {self.total_mult_adds:>16,d}  {self.total_params:>10,d}")
        h, w = self.input_shape
        lines.append(f"input {h}x{w}x1: Mult-Adds (10^12) = {self.tera_mult_adds:.4f}, "
                     f"Params (10^6) = {self.mega_params:.4f}")
        return "\n".join(lines)


class UnsupportedLayerError(ValueError):
    pass


def _out_extent(size: int, k: int, stride: int, dilation: int) -> int:
    pad = dilation * (k - 1) // 2
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def count_layer(layer: Layer) -> tuple[int, int]:
    """``(mult_adds, params)`` for one layer."""
    n, c, h, w = layer.shape
    if layer.kind == "conv":
        ho = _out_extent(h, layer.k, layer.stride, layer.dilation)
        wo = _out_extent(w, layer.k, layer.stride, layer.dilation)
        macs = n * ho * wo * layer.cout * c * layer.k * layer.k
        params = layer.cout * c * layer.k * layer.k + layer.cout
        return macs, params
    if layer.kind in ELEMENTWISE_KINDS:
        return n * c * h * w, layer.learnable
    if layer.kind in FREE_KINDS:
        return 0, 0
    raise UnsupportedLayerError(f"cannot count layer kind {layer.kind!r} ({layer.name})")


def conv_output_shape(layer: Layer) -> tuple[int, int, int, int]:
    n, _, h, w = layer.shape
    return (n, layer.cout, _out_extent(h, layer.k, layer.stride, layer.dilation),
            _out_extent(w, layer.k, layer.stride, layer.dilation))


class _Walker:
    def __init__(self, batch: int):
        self.layers: list[Layer] = []
        self.batch = batch

    def conv(self, name, shape, cout, k=3, stride=1, dilation=1):
        layer = Layer(name, "conv", shape, cout=cout, k=k, stride=stride, dilation=dilation)
        self.layers.append(layer)
        return conv_output_shape(layer)

    def elem(self, name, kind, shape, learnable=0):
        self.layers.append(Layer(name, kind, shape, learnable=learnable))
        return shape

    def attention_channel(self, prefix, shape):
        n, c, h, w = shape
        self.elem(f"{prefix}.gap", "gap", (n, c, 1, 1))
        self.conv(f"{prefix}.ca", (n, c, 1, 1), c, k=1)
        self.elem(f"{prefix}.ca.sigmoid", "sigmoid", (n, c, 1, 1))
        return self.elem(f"{prefix}.ca.mul", "mul", shape)

    def attention_spatial(self, prefix, shape, k):
        n, c, h, w = shape
        self.elem(f"{prefix}.pool_mean", "channel_pool", (n, 1, h, w))
        self.elem(f"{prefix}.pool_max", "channel_pool", (n, 1, h, w))
        self.elem(f"{prefix}.sa.concat", "concat", (n, 2, h, w))
        self.conv(f"{prefix}.sa", (n, 2, h, w), 1, k=k)
        self.elem(f"{prefix}.sa.sigmoid", "sigmoid", (n, 1, h, w))
        return self.elem(f"{prefix}.sa.mul", "mul", shape)

    def block(self, prefix, shape, sca, spatial_kernel):
        c = shape[1]
        t = self.conv(f"{prefix}.conv1", shape, c)
        t = self.elem(f"{prefix}.prelu", "prelu", t, learnable=c)
        t = self.conv(f"{prefix}.conv2", t, c)
        if sca:
            self.attention_channel(prefix, t)
            self.attention_spatial(prefix, t, spatial_kernel)
            self.elem(f"{prefix}.combine", "add", t)
        return self.elem(f"{prefix}.skip", "add", shape)

    def eam(self, prefix, shape, dilations):
        n, c, h, w = shape
        for k, d in enumerate(dilations):
            b = self.conv(f"{prefix}.branch{k}", shape, c, dilation=d)
            self.elem(f"{prefix}.branch{k}.prelu", "prelu", b, learnable=c)
        cat = self.elem(f"{prefix}.concat", "concat", (n, c * len(dilations), h, w))
        m = self.conv(f"{prefix}.merge", cat, c)
        t = self.conv(f"{prefix}.local1", m, c)
        t = self.elem(f"{prefix}.local.prelu", "prelu", t, learnable=c)
        t = self.conv(f"{prefix}.local2", t, c)
        t = self.elem(f"{prefix}.local.skip", "add", t)
        self.attention_channel(prefix, t)
        return self.elem(f"{prefix}.skip", "add", shape)


def model_layers(config: ArchConfig, height: int, width: int, batch: int = 1) -> list[Layer]:
    """The exact layer sequence executed by the forward pass."""
    config.check_input(height, width)
    wk = _Walker(batch)
    x = wk.conv("stem", (batch, 1, height, width), config.stem_width)
    if config.has_eam:
        for i in range(config.eam_count):
            x = wk.eam(f"eam.{i}", x, config.eam_dilations)
    widths = config.unet_widths
    if config.stem_width != widths[0]:
        x = wk.conv("entry", x, widths[0])
    kind = "sca" if config.has_sca else "res"
    skips = []
    for lvl in range(config.unet_levels):
        for j in range(config.sca_per_level):
            x = wk.block(f"unet.enc{lvl}.{kind}{j}", x, config.has_sca, config.spatial_kernel)
        if lvl < config.unet_levels - 1:
            skips.append(x)
            x = wk.conv(f"unet.down{lvl}", x, widths[lvl + 1], stride=2)
    for lvl in reversed(range(config.unet_levels - 1)):
        n, c, h, w = x
        up = wk.elem(f"unet.up{lvl}.nearest", "upsample_nearest", (n, c, 2 * h, 2 * w))
        x = wk.conv(f"unet.up{lvl}", up, widths[lvl])
        cat = wk.elem(f"unet.concat{lvl}", "concat", (n, 2 * widths[lvl], 2 * h, 2 * w))
        x = wk.conv(f"unet.merge{lvl}", cat, widths[lvl], k=1)
        for j in range(config.sca_per_level):
            x = wk.block(f"unet.dec{lvl}.{kind}{j}", x, config.has_sca, config.spatial_kernel)
    x = wk.conv("head", x, 3)
    wk.elem("head.clamp", "clamp", x)
    return wk.layers


def count_model(config: ArchConfig, height: int, width: int, batch: int = 1) -> ComplexityReport:
    per_layer = []
    for layer in model_layers(config, height, width, batch):
        macs, params = count_layer(layer)
        per_layer.append((layer.name, macs, params))
    return ComplexityReport(
        per_layer=tuple(per_layer),
        total_mult_adds=sum(m for _, m, _ in per_layer),
        total_params=sum(p for _, _, p in per_layer),
        input_shape=(height, width),
    )


def count_params(config: ArchConfig) -> int:
    """Learnable scalar count; independent of input size."""
    d = config.divisor
    return count_model(config, d, d).total_params


def conv_mult_adds(config: ArchConfig, height: int, width: int) -> int:
    return sum(count_layer(l)[0] for l in model_layers(config, height, width) if l.kind == "conv")
