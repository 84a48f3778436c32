import numpy as np
import pytest

from delnet import ops
from delnet.arch import DEFAULT_CONFIG, VARIANTS, ArchConfig, forward, init_params
from delnet.complexity import (Layer, UnsupportedLayerError, count_layer, count_model,
                               count_params, model_layers)
from delnet.tensor import ShapeError, Tensor


def random_config(rng: np.random.Generator) -> ArchConfig:
    levels = int(rng.integers(1, 4))
    widths = tuple(int(w) for w in np.cumsum(rng.integers(1, 5, size=levels)))
    dil = tuple(int(d) for d in rng.choice([1, 2, 3], size=int(rng.integers(1, 4)), replace=False))
    return ArchConfig(stem_width=int(rng.integers(1, 6)), eam_count=int(rng.integers(1, 3)),
                      eam_dilations=dil, unet_levels=levels, unet_widths=widths,
                      sca_per_level=int(rng.integers(1, 3)), variant=str(rng.choice(VARIANTS)),
                      spatial_kernel=int(rng.choice([3, 5, 7])))


def instrumented_macs(config, h, w, batch=1):
    raw = Tensor(np.random.default_rng(0).uniform(0, 1, (batch, 1, h, w)))
    with ops.count_macs() as counter:
        forward(raw, config, init_params(config, 0, dtype=np.float64))
    return counter.total


@pytest.mark.parametrize("seed", range(12))
def test_analytic_equals_instrumented_random_configs(seed):
    cfg = random_config(np.random.default_rng(seed))
    assert count_model(cfg, 16, 16).total_mult_adds == instrumented_macs(cfg, 16, 16)


@pytest.mark.parametrize("variant", VARIANTS)
def test_analytic_equals_instrumented_default_config(variant):
    cfg = DEFAULT_CONFIG.with_variant(variant)
    assert count_model(cfg, 32, 64).total_mult_adds == instrumented_macs(cfg, 32, 64)


def test_batch_scales_linearly():
    cfg = random_config(np.random.default_rng(3))
    assert count_model(cfg, 16, 16, batch=3).total_mult_adds == 3 * count_model(cfg, 16, 16).total_mult_adds


def test_conv_layer_hand_count():
    # 3x3 conv, 4 -> 8 channels on 10x12, stride 2, same padding: output 5x6
    macs, params = count_layer(Layer("c", "conv", (1, 4, 10, 12), cout=8, k=3, stride=2))
    assert macs == 5 * 6 * 8 * 4 * 9
    assert params == 8 * 4 * 9 + 8


def test_dilated_conv_keeps_extent():
    macs, _ = count_layer(Layer("c", "conv", (1, 2, 9, 9), cout=2, k=3, dilation=3))
    assert macs == 81 * 2 * 2 * 9


def test_elementwise_and_free_layers():
    assert count_layer(Layer("p", "prelu", (2, 3, 4, 4), learnable=3)) == (96, 3)
    assert count_layer(Layer("c", "concat", (1, 6, 4, 4))) == (0, 0)


def test_unknown_layer_kind():
    with pytest.raises(UnsupportedLayerError, match="lstm"):
        count_layer(Layer("x", "lstm", (1, 1, 1, 1)))


def test_params_independent_of_input():
    assert count_model(DEFAULT_CONFIG, 64, 64).total_params == count_model(DEFAULT_CONFIG, 128, 256).total_params
    assert count_params(DEFAULT_CONFIG) == count_model(DEFAULT_CONFIG, 2976, 4000).total_params


def test_indivisible_input_rejected():
    with pytest.raises(ShapeError):
        model_layers(DEFAULT_CONFIG, 100, 100)


def test_report_units_and_table():
    report = count_model(DEFAULT_CONFIG, 2976, 4000)
    assert report.tera_mult_adds == report.total_mult_adds / 1e12
    table = report.format_table()
    assert "Mult-Adds (10^12)" in table and "head" in table


def test_calibrated_default_frozen():
    # frozen values of the calibrated default at 2976x4000
    report = count_model(DEFAULT_CONFIG, 2976, 4000)
    assert report.total_params == 2_743_140
    assert report.total_mult_adds == 508_002_338_181
