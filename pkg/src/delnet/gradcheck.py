"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import WIDE_DTYPE, Tape, Tensor


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    rel_error: float
    tolerance: float
    magnitude: float = float("nan")     # norm of the analytic gradient; 0 means a vacuous check

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error)) and self.rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.size == 1:
        return out
    return ops.sum(ops.mul(out, Tensor(weights.reshape(out.shape))))


def _projection(fn, inputs, seed) -> np.ndarray:
    probe = fn(*[Tensor(x.data) for x in inputs])
    return np.random.default_rng(seed).standard_normal(probe.size)


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray):
    leaves = [Tensor(x.data, requires_grad=x.requires_grad) for x in inputs]
    with Tape() as tape:
        root = _scalarize(fn(*leaves), weights)
    tape.backward(root)
    return [tape.grad(t) if t.requires_grad else None for t in leaves]


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int,
                 weights: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of the projected output w.r.t. ``inputs[which]``.

    ``indices`` restricts the probe to selected flat positions; other entries
    of the returned array are left at zero.
    """
    base = [x.data for x in inputs]
    target = base[which]
    grad = np.zeros(target.size, dtype=np.float64)
    flat = target.ravel()
    positions = range(target.size) if indices is None else indices

    def value(perturbed: np.ndarray) -> float:
        args = [Tensor(a) for a in base]
        args[which] = Tensor(perturbed.reshape(target.shape))
        out = fn(*args)
        return float(np.dot(out.data.ravel().astype(np.float64), weights)) if out.size > 1 \
            else out.item()

    for i in positions:
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        grad[i] = (value(plus) - value(minus)) / (2.0 * eps)
    return grad.reshape(target.shape)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], name: str = "",
                    eps: float = 1e-5, tolerance: float = 1e-4, seed: int = 0) -> GradCheckResult:
    """Compare every requires-grad input's analytic gradient to finite differences.

    Inputs are promoted to float64. Non-scalar outputs are reduced with a fixed
    random projection so the whole Jacobian participates.
    """
    wide = [Tensor(x.data.astype(WIDE_DTYPE), requires_grad=x.requires_grad) for x in inputs]
    weights = _projection(fn, wide, seed)
    analytic = analytic_grads(fn, wide, weights)
    a_all, n_all = [], []
    for i, x in enumerate(wide):
        if not x.requires_grad:
            continue
        a_all.append(analytic[i].ravel())
        n_all.append(numeric_grad(fn, wide, i, weights, eps).ravel())
    a_vec = np.concatenate(a_all)
    err = relative_error(a_vec, np.concatenate(n_all))
    return GradCheckResult(name, err, tolerance, float(np.linalg.norm(a_vec)))


def check_directional(fn: Callable[..., Tensor], inputs: Sequence[Tensor], name: str = "",
                      eps: float = 1e-5, tolerance: float = 1e-4, directions: int = 3,
                      seed: int = 0) -> GradCheckResult:
    """Jacobian-vector products along random directions against finite differences.

    Costs two evaluations per direction regardless of input size, which suits
    whole-network checks.
    """
    wide = [Tensor(x.data.astype(WIDE_DTYPE), requires_grad=x.requires_grad) for x in inputs]
    weights = _projection(fn, wide, seed)
    analytic = analytic_grads(fn, wide, weights)
    rng = np.random.default_rng(seed + 1)
    a_vals, n_vals = [], []
    for _ in range(directions):
        dirs = [rng.standard_normal(x.shape) if x.requires_grad else None for x in wide]

        def value(sign: float) -> float:
            args = [Tensor(x.data + sign * eps * d) if d is not None else Tensor(x.data)
                    for x, d in zip(wide, dirs)]
            out = fn(*args)
            return float(np.dot(out.data.ravel(), weights)) if out.size > 1 else out.item()

        n_vals.append((value(1.0) - value(-1.0)) / (2.0 * eps))
        a_vals.append(sum(float(np.sum(g * d)) for g, d in zip(analytic, dirs) if d is not None))
    err = relative_error(np.array(a_vals), np.array(n_vals))
    return GradCheckResult(name, err, tolerance, float(np.linalg.norm(a_vals)))
