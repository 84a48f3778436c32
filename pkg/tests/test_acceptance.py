"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible even under
pytest's output capture). Run directly with ``python3 tests/test_acceptance.py``
for just the summary.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from delnet import arch, ops  # noqa: E402
from delnet.arch import DEFAULT_CONFIG, VARIANTS, forward, init_params  # noqa: E402
from delnet.cli import main as cli_main  # noqa: E402
from delnet.complexity import count_model  # noqa: E402
from delnet.dataio import (CFA_PATTERNS, RawImage, TrainPair, augment_flip, load_pair,  # noqa: E402
                           synth_pair, write_image, write_synthetic_dataset, PairDataset)
from delnet.gradsuite import END_TO_END_TOLERANCE, OP_TOLERANCE, run_suite  # noqa: E402
from delnet.losses import LossConfig, RandomFeatureExtractor, loss_total  # noqa: E402
from delnet.metrics import ciede2000_lab, ms_ssim, psnr, PSNR_CAP  # noqa: E402
from delnet.tensor import Tensor  # noqa: E402
from delnet.trainer import dataset_loss, train  # noqa: E402

from oracles import CIEDE2000_PAIRS, conv2d_loops, loss_by_hand, ms_ssim_literal  # noqa: E402
from test_complexity import instrumented_macs, random_config  # noqa: E402
from test_ops import random_conv_case  # noqa: E402


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}", flush=True)
    return emit


def test_criterion_01_complexity_calibration(report):
    start = time.perf_counter()
    r = count_model(DEFAULT_CONFIG, 2976, 4000)
    elapsed = time.perf_counter() - start
    p_dev = r.total_params / 2.68e6 - 1
    m_dev = r.total_mult_adds / 0.53e12 - 1
    ok = abs(p_dev) <= 0.20 and abs(m_dev) <= 0.20 and elapsed < 1.0
    report(1, "complexity calibration", ok,
           f"params {r.mega_params:.4f}e6 ({p_dev:+.1%}), Mult-Adds {r.tera_mult_adds:.4f}e12 "
           f"({m_dev:+.1%}), {elapsed * 1000:.0f} ms")
    assert ok


def test_criterion_02_counter_soundness(report):
    rng = np.random.default_rng(2024)
    configs = [random_config(rng) for _ in range(12)]
    mismatches = []
    for cfg in configs:
        a, b = count_model(cfg, 16, 16).total_mult_adds, instrumented_macs(cfg, 16, 16)
        if a != b:
            mismatches.append((cfg, a, b))
    ok = not mismatches and len(configs) >= 10
    report(2, "counter soundness", ok,
           f"{len(configs) - len(mismatches)}/{len(configs)} random configs exact at 16x16")
    assert ok


@pytest.mark.slow
def test_criterion_03_gradient_suite(report):
    start = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    ops_results = [r for r in results if r.name != "end_to_end_loss"]
    e2e = [r for r in results if r.name == "end_to_end_loss"]
    failed = [r.name for r in results if not r.passed or not r.magnitude > 0]
    ok = (not failed and len(e2e) == 1 and elapsed < 120
          and all(r.tolerance == OP_TOLERANCE for r in ops_results)
          and e2e[0].tolerance == END_TO_END_TOLERANCE)
    worst = max(ops_results, key=lambda r: r.rel_error)
    report(3, "gradient suite", ok,
           f"{len(ops_results)} op/block checks (worst {worst.name} {worst.rel_error:.1e} < 1e-4), "
           f"end-to-end 16x16 {e2e[0].rel_error:.1e} < 1e-3, {elapsed:.0f} s"
           + (f"; failed: {failed}" if failed else ""))
    assert ok


def test_criterion_04_convolution_oracle(report):
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(100):
        x, w, b, s, p, d = random_conv_case(rng)
        got = ops.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                         stride=s, padding=p, dilation=d).data
        worst = max(worst, float(np.abs(got - conv2d_loops(x, w, b, s, p, d)).max()))
    ok = worst < 1e-10
    report(4, "convolution oracle", ok, f"100 cases, max |delta| = {worst:.1e}")
    assert ok


def test_criterion_05_residual_identity(report):
    rng = np.random.default_rng(5)
    exact = True
    for _ in range(5):
        c = int(rng.integers(1, 9))
        x = Tensor(rng.normal(0, 3, (2, c, 8, 8)))
        for kind in ("sca", "eam"):
            spec = arch._Spec()
            if kind == "sca":
                arch._plan_res(spec, "b", c, True, 5)
                y = arch.sca_block(x, {n: Tensor(np.zeros(s)) for n, (_, s, _) in spec.shapes.items()}, "b")
            else:
                arch._plan_eam(spec, "b", c, (1, 2, 3))
                y = arch.eam_block(x, {n: Tensor(np.zeros(s)) for n, (_, s, _) in spec.shapes.items()},
                                   "b", (1, 2, 3))
            exact &= bool(np.array_equal(y.data, x.data))
    report(5, "residual identity", exact, "zero-weight SCA and EAM blocks return their input bitwise")
    assert exact


def test_criterion_06_metric_fidelity(report):
    de = np.abs(ciede2000_lab(CIEDE2000_PAIRS[:, :3], CIEDE2000_PAIRS[:, 3:6]) - CIEDE2000_PAIRS[:, 6]).max()
    rng = np.random.default_rng(6)
    ms_err = 0.0
    for _ in range(3):
        a = rng.uniform(0, 1, (3, 256, 256))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ms_err = max(ms_err, abs(ms_ssim(Tensor(a[None]), Tensor(b[None])).item() - ms_ssim_literal(a, b)))
    zeros, ones = Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.ones((1, 3, 8, 8)))
    half = Tensor(np.full((1, 3, 8, 8), 0.5))
    psnr_err = max(abs(psnr(zeros, ones) - 0.0), abs(psnr(zeros, half) - 20 * math.log10(2)),
                   abs(psnr(half, half) - PSNR_CAP))
    ok = de < 1e-4 and ms_err < 1e-6 and psnr_err < 1e-9 and abs(psnr(zeros, half) - 6.0206) < 1e-4
    report(6, "metric fidelity", ok,
           f"CIEDE2000 {len(CIEDE2000_PAIRS)} pairs max {de:.1e}; MS-SSIM 3x256^2 max {ms_err:.1e}; "
           f"PSNR cases max {psnr_err:.1e}")
    assert ok


def test_criterion_07_loss_contract(report):
    x = Tensor(np.random.default_rng(7).uniform(0, 1, (2, 3, 32, 32)))
    zero = loss_total(x, x)[0].item()
    gt = (np.arange(48).reshape(3, 4, 4) * 7 % 48) / 47.0
    pred = np.clip(gt + ((np.arange(48).reshape(3, 4, 4) % 5) - 2) * 0.04, 0, 1)
    cfg = LossConfig()
    defaults = (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.epsilon) == (0.85, 0.15, 1.0, 1e-3)
    want = loss_by_hand(gt, pred, cfg.extractor.weights)[0]
    got = loss_total(Tensor(gt[None]), Tensor(pred[None]), cfg)[0].item()
    ok = zero == 0.0 and defaults and abs(got - want) < 1e-9
    report(7, "loss contract", ok, f"L(gt,gt) = {zero}; 4x4 pair {got:.12f} vs hand {want:.12f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_overfit_sanity(report):
    dataset = [synth_pair(s, 64, 64) for s in range(8)]
    lc = LossConfig()
    start = time.perf_counter()
    initial = dataset_loss(init_params(DEFAULT_CONFIG, 0), DEFAULT_CONFIG, lc, dataset)
    result = train(DEFAULT_CONFIG, lc, dataset, steps=200, batch_size=2, seed=0, augment=False,
                   lr=1e-4)
    final = dataset_loss(result.params, DEFAULT_CONFIG, lc, dataset)
    elapsed = time.perf_counter() - start
    # determinism: an independent rerun reproduces the start of the curve exactly
    rerun = train(DEFAULT_CONFIG, lc, dataset, steps=10, batch_size=2, seed=0, augment=False)
    same = [c.total for c in rerun.curve] == [c.total for c in result.curve[:10]]
    finite = all(math.isfinite(c.total) for c in result.curve)
    ok = final <= 0.5 * initial and same and finite and elapsed < 600
    report(8, "overfit sanity", ok,
           f"dataset loss {initial:.4f} -> {final:.4f} ({final / initial:.1%}) after 200 steps, "
           f"deterministic={same}, {elapsed:.0f} s")
    assert ok


def test_criterion_09_ablation_structure(report, capsys):
    probe = Tensor(np.random.default_rng(9).uniform(0, 1, (1, 1, 64, 64)).astype(np.float32))
    params, shapes_ok = {}, True
    for v in VARIANTS:
        cfg = DEFAULT_CONFIG.with_variant(v)
        p = init_params(cfg, 0)
        out = forward(probe, cfg, p)
        shapes_ok &= out.shape == (1, 3, 64, 64) and bool(np.all(np.isfinite(out.data)))
        params[v] = p.num_scalars()
    order = (params["UNet"] < params["UNet+SCA"] < params["DelNet"]
             and params["UNet"] < params["UNet+EAM"] < params["DelNet"])
    code = cli_main(["ablate", "--probe", "64x64"])
    table = capsys.readouterr().out
    rows = [ln.split()[0] for ln in table.splitlines()[1:5]]
    ok = shapes_ok and order and code == 0 and sorted(rows) == sorted(VARIANTS)
    report(9, "ablation structure", ok,
           ", ".join(f"{v} {params[v]:,}" for v in sorted(VARIANTS, key=params.get))
           + f"; forward@64x64 ok={shapes_ok}; ablate exit {code}")
    assert ok


def test_criterion_10_data_invariants(report):
    ok_flip = True
    base = synth_pair(10, 16, 16)
    for pattern in CFA_PATTERNS:
        pair = TrainPair(RawImage(base.raw.data, pattern), base.target, base.id)
        for h, v in ((True, False), (False, True), (True, True)):
            once = augment_flip(pair, h, v)
            twice = augment_flip(once, h, v)
            ok_flip &= (twice.raw.data.data.tobytes() == pair.raw.data.data.tobytes()
                        and twice.target.data.tobytes() == pair.target.data.tobytes()
                        and twice.raw.cfa_pattern == pattern)
    rggb = augment_flip(base, horizontal=True)
    ok_flip &= rggb.raw.cfa_pattern == "GRBG"
    ok_flip &= rggb.raw.data.data[0, 0, 0, 0] == base.raw.data.data[0, 0, 0, -1]

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        codes = np.random.default_rng(10).integers(0, 256, (16, 16, 3)).astype(np.uint8)
        Image.fromarray(codes).save(d / "a.png")
        Image.fromarray(codes[..., 0]).save(d / "r.png")
        pair = load_pair(d / "r.png", d / "a.png")
        write_image(pair.target, d / "b.png")
        lossless = np.array_equal(np.asarray(Image.open(d / "b.png")), codes)
        write_synthetic_dataset(d / "ds", 4, 16, 16)
        loaded = list(PairDataset(d / "ds")) + [pair]
        in_range = all(0 <= t.min() and t.max() <= 1
                       for p in loaded for t in (p.raw.data.data, p.target.data))
    ok = ok_flip and lossless and in_range
    report(10, "data invariants", ok,
           f"flip involution + CFA phase={ok_flip}, 8-bit round trip lossless={lossless}, "
           f"loaded values in [0,1]={in_range}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
