"""AdamW optimisation loop with CSV loss logging and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .arch import (ArchConfig, ModelParams, WeightsFormatError, decode_entries, encode_entries,
                   forward, init_params, save_params)
from .dataio import TrainPair, align_phase, augment_flip
from .losses import LOG_HEADER, LossBreakdown, LossConfig, loss_total
from .tensor import Tape, Tensor

OPTIM_MAGIC = b"DLO1"
OPTIM_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "OptimState":
        zeros = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **hyper)


def adamw_step(params: ModelParams, grads: Mapping[str, np.ndarray],
               state: OptimState) -> tuple[ModelParams, OptimState]:
    """One bias-corrected Adam step with decoupled weight decay.

    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta``;
    both terms use the pre-step parameters. Inputs are not modified.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise TrainingError(f"missing gradient for parameters {missing[:5]}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            theta = theta - state.lr * state.weight_decay * p.data
        new_params[name] = Tensor(theta.astype(p.dtype), requires_grad=True)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return params.replace(new_params), replace(state, m=new_m, v=new_v, step=t)


def save_optim_state(path, state: OptimState) -> None:
    header = OPTIM_MAGIC + struct.pack("<IQ5d", OPTIM_VERSION, state.step, state.lr, state.beta1,
                                       state.beta2, state.eps, state.weight_decay)
    entries = {f"m.{k}": Tensor(a) for k, a in state.m.items()}
    entries.update({f"v.{k}": Tensor(a) for k, a in state.v.items()})
    Path(path).write_bytes(header + encode_entries(entries))


def load_optim_state(path) -> OptimState:
    buf = Path(path).read_bytes()
    head = struct.calcsize("<IQ5d")
    if len(buf) < 4 + head:
        raise WeightsFormatError(f"truncated optimizer state: header needs {4 + head} bytes at offset 0")
    if buf[:4] != OPTIM_MAGIC:
        raise WeightsFormatError(f"bad magic {buf[:4]!r} at offset 0, expected {OPTIM_MAGIC!r}")
    version, step, lr, b1, b2, eps, wd = struct.unpack_from("<IQ5d", buf, 4)
    if version != OPTIM_VERSION:
        raise WeightsFormatError(f"unsupported version {version} at offset 4")
    entries = decode_entries(buf, 4 + head)
    m = {k[2:]: t.data for k, t in entries.items() if k.startswith("m.")}
    v = {k[2:]: t.data for k, t in entries.items() if k.startswith("v.")}
    return OptimState(m, v, step, lr, b1, b2, eps, wd)


def make_batch(pairs: Sequence[TrainPair]) -> tuple[Tensor, Tensor]:
    raw = np.concatenate([p.raw.data.data for p in pairs], axis=0)
    target = np.concatenate([p.target.data for p in pairs], axis=0)
    return Tensor(raw), Tensor(target)


def loss_and_grads(params: ModelParams, config: ArchConfig, loss_config: LossConfig,
                   raw: Tensor, target: Tensor) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    with Tape() as tape:
        pred = forward(raw, config, params)
        total, parts = loss_total(target, pred, loss_config)
    if not np.isfinite(parts.total):
        return parts, {}
    tape.backward(total)
    return parts, {k: tape.grad(t) for k, t in params.items()}


def dataset_loss(params: ModelParams, config: ArchConfig, loss_config: LossConfig,
                 dataset: Sequence[TrainPair], batch_size: int = 2) -> float:
    """Mean total loss over the whole dataset, in fixed order, without augmentation."""
    totals, weights = [], []
    for i in range(0, len(dataset), batch_size):
        chunk = [dataset[j] for j in range(i, min(i + batch_size, len(dataset)))]
        raw, target = make_batch(chunk)
        _, parts = loss_total(target, forward(raw, config, params), loss_config)
        totals.append(parts.total)
        weights.append(len(chunk))
    return float(np.average(totals, weights=weights))


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimState
    curve: list[LossBreakdown]


class _BatchSampler:
    """Epoch-wise shuffled batches with per-sample flip draws from one generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator, augment: bool):
        self.n, self.batch_size, self.rng, self.augment = n, batch_size, rng, augment
        self.order: list[int] = []

    def next(self) -> list[tuple[int, bool, bool]]:
        out = []
        for _ in range(self.batch_size):
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            i = int(self.order.pop(0))
            if self.augment:
                h, v = (bool(b) for b in self.rng.integers(0, 2, size=2))
            else:
                h = v = False
            out.append((i, h, v))
        return out


def train(config: ArchConfig, loss_config: LossConfig, dataset: Sequence[TrainPair], steps: int,
          batch_size: int = 2, seed: int = 0, *, augment: bool = True, lr: float = 1e-4,
          weight_decay: float = 0.0, checkpoint_every: int = 0, out_dir: str | Path | None = None,
          params: ModelParams | None = None, verbose: bool = False) -> TrainResult:
    """Run ``steps`` AdamW updates from ``init_params(config, seed)`` (or ``params``).

    Shuffling and flip draws come from ``default_rng(seed)``, so reruns are
    identical. Flipped pairs are shifted back to the dataset's CFA phase.
    With ``out_dir`` a ``loss.csv`` log is written and, every
    ``checkpoint_every`` steps and at the end, ``step_XXXXXX.dlw`` (+ ``.cfg``)
    and ``.dlo`` optimizer state.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    if steps < 0 or batch_size < 1:
        raise TrainingError(f"invalid steps={steps} or batch_size={batch_size}")
    first = dataset[0]
    config.check_input(first.raw.height, first.raw.width)

    params = params if params is not None else init_params(config, seed)
    state = OptimState.for_params(params, lr=lr, weight_decay=weight_decay)
    sampler = _BatchSampler(len(dataset), batch_size, np.random.default_rng(seed), augment)

    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "loss.csv", "w")
        log.write(LOG_HEADER + "\n")
    curve: list[LossBreakdown] = []
    try:
        for step in range(steps):
            chosen = []
            for i, h, v in sampler.next():
                pair = dataset[i]
                flipped = augment_flip(pair, h, v)
                chosen.append(align_phase(flipped, pair.raw.cfa_pattern))
            raw, target = make_batch(chosen)
            parts, grads = loss_and_grads(params, config, loss_config, raw, target)
            if not grads:
                raise TrainingError(f"non-finite loss {parts.total} at step {step}", step)
            curve.append(parts)
            if log:
                log.write(parts.record(step) + "\n")
                log.flush()
            if verbose:
                print(parts.record(step), flush=True)
            params, state = adamw_step(params, grads, state)
            if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(out_dir / f"step_{step + 1:06d}", params, state, config)
    finally:
        if log:
            log.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final", params, state, config)
    return TrainResult(params, state, curve)


def save_checkpoint(stem: Path, params: ModelParams, state: OptimState, config: ArchConfig) -> None:
    save_params(stem.with_suffix(".dlw"), params, config)
    save_optim_state(stem.with_suffix(".dlo"), state)
