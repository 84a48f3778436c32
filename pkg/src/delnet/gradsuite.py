"""The standard finite-difference suite: every op, every block, the full loss.

Inputs are drawn away from kinks (|x| > 0.05 for abs/relu, distinct channel
values for max pooling, interiors of clamp ranges) so central differences are
well defined.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import arch, ops
from .arch import ArchConfig, forward, init_params
from .gradcheck import GradCheckResult, check_directional, check_gradients
from .losses import LossConfig, RandomFeatureExtractor, l1_modified, loss_ms_ssim, loss_perceptual, loss_total
from .metrics import ms_ssim, ssim
from .tensor import Tensor

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3

# small enough for a 16x16 input (divisor 4) and a quick check
GRADCHECK_CONFIG = ArchConfig(stem_width=4, eam_count=1, eam_dilations=(1, 2), unet_levels=3,
                              unet_widths=(4, 6, 8), sca_per_level=1, variant="DelNet",
                              spatial_kernel=3)


def _away(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _var(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def op_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    s = (2, 3, 4, 4)
    pos = lambda shape: _var(rng.uniform(0.2, 1.5, shape))  # noqa: E731
    sym = lambda shape: _var(_away(rng, shape))  # noqa: E731
    unit = lambda shape: _var(rng.uniform(0.1, 0.9, shape))  # noqa: E731
    # distinct values per pixel so channel max has a unique arg
    distinct = _var(rng.permutation(np.linspace(-1, 1, int(np.prod(s)))).reshape(s))
    cases = [
        ("add", ops.add, [sym(s), sym((1, 3, 1, 1))]),
        ("sub", ops.sub, [sym(s), sym(s)]),
        ("mul", ops.mul, [sym(s), sym((2, 1, 4, 4))]),
        ("div", ops.div, [sym(s), pos(s)]),
        ("neg", ops.neg, [sym(s)]),
        ("power", lambda x: ops.power(x, 0.7), [pos(s)]),
        ("log", ops.log, [pos(s)]),
        ("absolute", ops.absolute, [sym(s)]),
        ("maximum", lambda x: ops.maximum(x, 0.0), [sym(s)]),
        ("clamp", lambda x: ops.clamp(x, -0.5, 0.5), [sym(s)]),
        ("relu", ops.relu, [sym(s)]),
        ("sigmoid", ops.sigmoid, [_var(rng.normal(0, 2, s))]),
        ("prelu", ops.prelu, [sym(s), unit((3,))]),
        ("sum", lambda x: ops.sum(x, axis=(1, 3)), [sym(s)]),
        ("mean", lambda x: ops.mean(x, axis=2, keepdims=True), [sym(s)]),
        ("global_avg_pool", ops.global_avg_pool, [sym(s)]),
        ("channel_pool_mean", lambda x: ops.channel_pool(x, "mean"), [sym(s)]),
        ("channel_pool_max", lambda x: ops.channel_pool(x, "max"), [distinct]),
        ("avg_pool2", ops.avg_pool2, [sym((2, 3, 5, 6))]),
        ("concat_channels", ops.concat_channels, [sym(s), sym((2, 2, 4, 4))]),
        ("upsample_nearest", ops.upsample_nearest, [sym(s)]),
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b, padding=1), [sym((2, 3, 6, 5)), sym((4, 3, 3, 3)), sym((4,))]),
        ("conv2d_stride2", lambda x, w: ops.conv2d(x, w, stride=2, padding=1), [sym((1, 2, 7, 6)), sym((3, 2, 3, 3))]),
        ("conv2d_dilated", lambda x, w: ops.conv2d(x, w, padding=3, dilation=3), [sym((1, 2, 7, 7)), sym((2, 2, 3, 3))]),
        ("conv2d_5x5_valid", lambda x, w: ops.conv2d(x, w), [sym((1, 2, 7, 8)), sym((2, 2, 5, 5))]),
        ("downsample", ops.downsample, [sym((1, 2, 6, 6)), sym((3, 2, 3, 3)), sym((3,))]),
        ("upsample", ops.upsample, [sym((1, 3, 3, 2)), sym((2, 3, 3, 3)), sym((2,))]),
    ]
    img = lambda: unit((1, 3, 16, 16))  # noqa: E731

    def related(shape):
        # structural terms need positive correlation, else the relu floor zeroes them
        a = rng.uniform(0.1, 0.9, shape)
        b = np.clip(a + rng.normal(0, 0.05, shape), 0.01, 0.99)
        return [_var(a), _var(b)]

    fx = RandomFeatureExtractor(seed)
    cases += [
        ("ssim", ssim, related((1, 3, 16, 16))),
        ("ms_ssim", lambda a, b: ms_ssim(a, b, scales=2), related((1, 3, 24, 24))),
        ("l1_modified", lambda a, b: l1_modified(a, b, 1e-3), [img(), img()]),
        ("loss_ms_ssim", loss_ms_ssim, related((1, 3, 16, 16))),
        ("loss_perceptual", lambda a, b: loss_perceptual(a, b, fx), [unit((1, 3, 8, 8)), unit((1, 3, 8, 8))]),
    ]
    return cases


def _block_params(prefix: str, c: int, kind: str, seed: int) -> dict[str, Tensor]:
    """Random (not identity-sized) weights for one block, in float64."""
    rng = np.random.default_rng(seed)
    spec = arch._Spec()
    if kind == "eam":
        arch._plan_eam(spec, prefix, c, (1, 2))
    else:
        arch._plan_res(spec, prefix, c, kind == "sca", 3)
    out = {}
    for name, (k, shape, _) in spec.shapes.items():
        if k == "slope":
            out[name] = _var(rng.uniform(0.1, 0.4, shape))
        else:
            fan = int(np.prod(shape[1:])) if len(shape) > 1 else 4
            out[name] = _var(rng.normal(0, 1 / np.sqrt(fan), shape))
    return out


def block_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed + 100)
    cases = []
    for kind in ("res", "sca", "eam"):
        params = _block_params("b", 3, kind, seed)
        names = list(params)

        def fn(x, *ws, kind=kind, names=names):
            p = dict(zip(names, ws))
            if kind == "eam":
                return arch.eam_block(x, p, "b", (1, 2))
            return (arch.sca_block if kind == "sca" else arch.res_block)(x, p, "b")

        x = _var(rng.normal(0, 1, (1, 3, 6, 6)))
        cases.append((f"{kind}_block", fn, [x] + [params[n] for n in names]))
    return cases


def end_to_end_check(seed: int = 0, size: int = 16, config: ArchConfig = GRADCHECK_CONFIG,
                     directions: int = 6) -> GradCheckResult:
    """Full loss through the network w.r.t. every parameter, via random-direction JVPs."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, dtype=np.float64)
    names = list(params)
    # perturb away from the near-identity init so every branch carries signal
    leaves = [_var(params[n].data + rng.normal(0, 0.05, params[n].shape)) for n in names]
    raw = Tensor(rng.uniform(0.05, 0.95, (1, 1, size, size)))
    gt = Tensor(rng.uniform(0.05, 0.95, (1, 3, size, size)))
    lc = LossConfig()

    def fn(*ws):
        pred = forward(raw, config, dict(zip(names, ws)))
        return loss_total(gt, pred, lc)[0]

    return check_directional(fn, leaves, "end_to_end_loss", eps=1e-6,
                             tolerance=END_TO_END_TOLERANCE, directions=directions, seed=seed)


def run_suite(seed: int = 0, include_end_to_end: bool = True) -> list[GradCheckResult]:
    results = [check_gradients(fn, inputs, name, tolerance=OP_TOLERANCE, seed=seed)
               for name, fn, inputs in op_cases(seed) + block_cases(seed)]
    if include_end_to_end:
        results.append(end_to_end_check(seed))
    return results
