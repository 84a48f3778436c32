"""Composite training loss: log-aware L1, MS-SSIM and a feature-space term.

``L = lambda1 * L1_mod + lambda2 * (1 - MS-SSIM) + lambda3 * L_perceptual``

All reductions are means over elements, so magnitudes do not depend on image
size. Logs are natural.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import ops
from .metrics import ms_ssim
from .tensor import ShapeError, Tensor


class FeatureExtractor(Protocol):
    def __call__(self, image: Tensor) -> Sequence[Tensor]: ...


class RandomFeatureExtractor:
    """Frozen random conv pyramid used as a stand-in for pretrained features.

    Three stages of 3x3 conv + ReLU with 3 -> 16 -> 32 -> 64 channels, the
    second and third with stride 2. Weights are He-normal from ``seed`` and
    never receive gradients; the ReLU output of every stage is a feature map.
    """

    widths = (3, 16, 32, 64)

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = []
        for cin, cout in zip(self.widths, self.widths[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            self.weights.append(rng.standard_normal((cout, cin, 3, 3)) * std)
        self._cache: dict[np.dtype, list[Tensor]] = {}

    def strides(self) -> tuple[int, ...]:
        return (1, 2, 2)

    def _weights_for(self, dtype) -> list[Tensor]:
        if dtype not in self._cache:
            self._cache[dtype] = [Tensor(w.astype(dtype)) for w in self.weights]
        return self._cache[dtype]

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"feature extractor needs [N,3,H,W] input, got {image.shape}", image.shape)
        feats = []
        x = image
        for w, stride in zip(self._weights_for(image.dtype), self.strides()):
            x = ops.relu(ops.conv2d(x, w, stride=stride, padding=1))
            feats.append(x)
        return feats


@dataclass
class LossConfig:
    lambda1: float = 0.85
    lambda2: float = 0.15
    lambda3: float = 1.0
    epsilon: float = 1e-3
    extractor: FeatureExtractor = field(default_factory=RandomFeatureExtractor)

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    l1: float
    ssim: float
    perceptual: float

    def record(self, step: int) -> str:
        """One CSV log line: ``step,total,l1,ssim,perceptual``."""
        return f"{step},{self.total:.8g},{self.l1:.8g},{self.ssim:.8g},{self.perceptual:.8g}"


LOG_HEADER = "step,total,l1,ssim,perceptual"


def _check(gt: Tensor, pred: Tensor, name: str) -> None:
    if gt.shape != pred.shape:
        raise ShapeError(f"{name}: shape mismatch {gt.shape} vs {pred.shape}", gt.shape, pred.shape)


def l1_modified(gt: Tensor, pred: Tensor, epsilon: float = 1e-3) -> Tensor:
    """Mean absolute error plus mean absolute error of ``log(max(., epsilon))``."""
    _check(gt, pred, "l1_modified")
    plain = ops.mean(ops.absolute(ops.sub(gt, pred)))
    log_gt = ops.log(ops.maximum(gt, epsilon))
    log_pred = ops.log(ops.maximum(pred, epsilon))
    return ops.add(plain, ops.mean(ops.absolute(ops.sub(log_gt, log_pred))))


def loss_ms_ssim(gt: Tensor, pred: Tensor) -> Tensor:
    _check(gt, pred, "loss_ms_ssim")
    return ops.sub(1.0, ms_ssim(gt, pred))


def loss_perceptual(gt: Tensor, pred: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Mean squared feature difference, averaged over extractor layers."""
    _check(gt, pred, "loss_perceptual")
    f_gt, f_pred = extractor(gt), extractor(pred)
    if len(f_gt) != len(f_pred) or not f_gt:
        raise ShapeError("loss_perceptual: extractor returned mismatched feature lists")
    terms = []
    for a, b in zip(f_gt, f_pred):
        d = ops.sub(a, b)
        terms.append(ops.mean(ops.mul(d, d)))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.div(total, float(len(terms)))


def loss_total(gt: Tensor, pred: Tensor, config: LossConfig | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three terms and its per-term breakdown.

    Terms with a zero weight are skipped entirely.
    """
    config = config or LossConfig()
    _check(gt, pred, "loss_total")
    zero = Tensor(np.zeros(1, dtype=pred.dtype))
    l1 = l1_modified(gt, pred, config.epsilon) if config.lambda1 else zero
    ss = loss_ms_ssim(gt, pred) if config.lambda2 else zero
    pc = loss_perceptual(gt, pred, config.extractor) if config.lambda3 else zero
    total = ops.add(ops.add(ops.mul(l1, config.lambda1), ops.mul(ss, config.lambda2)),
                    ops.mul(pc, config.lambda3))
    return total, LossBreakdown(total.item(), l1.item(), ss.item(), pc.item())
