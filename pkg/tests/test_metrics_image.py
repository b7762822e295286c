import math

import numpy as np
import pytest

from attriq.attrib_image import AttributionMap, ImageExplainer
from attriq.errors import EmptyDataset
from attriq.metrics_image import (
    IMAGE_METRIC_NAMES,
    ImageMetricConfig,
    RegionSpec,
    avg_sensitivity,
    calculate_image_metrics,
    faithfulness_correlation,
    faithfulness_estimate,
    image_metrics,
    max_sensitivity,
    mprt,
    regions,
    smooth_mprt,
)
from attriq.models import Dense, Flatten, SequentialNet
from oracles import random_cnn, ref_image_metrics

EXHAUSTIVE = RegionSpec(patch=(2, 2), max_regions=None)


def amap(values, c=0):
    values = np.asarray(values, dtype=np.float64)
    return AttributionMap(values, c, "test", (1,) + values.shape)


def pixel_model(r, s, size=8):
    """Output depends on a single pixel only."""
    w = np.zeros((1, size * size))
    w[0, r * size + s] = 1.0
    return SequentialNet((Flatten(), Dense(w, np.zeros(1))), (1, size, size))


def constant_model(size=8):
    return SequentialNet((Flatten(), Dense(np.zeros((1, size * size)), np.ones(1))), (1, size, size))


def test_uniform_map_equal_deltas():
    # every 2x2 region sums to the same value under this linear model and image
    net = SequentialNet((Flatten(), Dense(np.ones((1, 64)), np.zeros(1))), (1, 8, 8))
    x = np.ones((1, 8, 8))
    r = faithfulness_correlation(net, x, amap(np.full((8, 8), 0.3)), EXHAUSTIVE)
    assert abs(r - 4.0) < 1e-12


def test_constant_model_gives_zero(rng):
    net = constant_model()
    x = rng.uniform(size=(1, 8, 8))
    m = amap(rng.normal(size=(8, 8)))
    assert faithfulness_correlation(net, x, m, EXHAUSTIVE) == 0.0
    assert max_sensitivity(net, x, EXHAUSTIVE) == 0.0
    assert avg_sensitivity(net, x, EXHAUSTIVE) == 0.0
    assert faithfulness_estimate(net, x, m, EXHAUSTIVE) == 0.0


def test_zero_map():
    net = pixel_model(3, 3)
    x = np.ones((1, 8, 8))
    assert math.isnan(faithfulness_correlation(net, x, amap(np.zeros((8, 8))), EXHAUSTIVE))
    assert smooth_mprt(net, x, amap(np.zeros((8, 8))), EXHAUSTIVE) == mprt(net, x, EXHAUSTIVE)
    assert faithfulness_estimate(net, x, amap(np.zeros((8, 8))), EXHAUSTIVE) == 0.0


def test_single_pixel_max_at_covering_region():
    net = pixel_model(5, 2)
    x = np.full((1, 8, 8), 2.0)
    rs = RegionSpec.pixel(max_regions=None)
    assert max_sensitivity(net, x, rs) == 2.0
    assert avg_sensitivity(net, x, rs) == 2.0 / 64


def test_orderings_500_cases(rng):
    nets = [random_cnn(rng, size=8) for _ in range(10)]
    rs = RegionSpec(patch=(2, 2), max_regions=None)
    for case in range(500):
        net = nets[case % len(nets)]
        x = rng.uniform(size=(1, 8, 8))
        m = amap(rng.normal(size=(8, 8)) * rng.uniform(0, 3))
        out = image_metrics(net, x, m, rs, target_class=int(rng.integers(3)))
        assert out["smooth_mprt"] <= out["mprt"]
        assert out["max_sensitivity"] >= out["avg_sensitivity"] >= 0
        assert all(v >= 0 for v in out.values() if not math.isnan(v))


@pytest.mark.parametrize("kind", ["black", "mean"])
@pytest.mark.parametrize("patch", [(1, 1), (2, 2), (3, 3)])
def test_reference_loop_equivalence(kind, patch, rng):
    rs = RegionSpec(patch=patch, perturbation=kind, max_regions=None)
    for _ in range(4):
        net = random_cnn(rng, size=8)
        x = rng.uniform(size=(1, 8, 8))
        values = rng.normal(size=(8, 8))
        c = int(rng.integers(3))
        got = image_metrics(net, x, amap(values, c), rs)
        want = ref_image_metrics(net, x, values, patch, c, kind)
        if kind != "black":
            # faithfulness_estimate always blacks out regions
            want["faithfulness_estimate"] = ref_image_metrics(net, x, values, patch, c, "black")["faithfulness_estimate"]
        for name in IMAGE_METRIC_NAMES:
            assert abs(got[name] - want[name]) < 1e-10, name


def test_single_metric_functions_agree_with_batch(rng):
    net = random_cnn(rng)
    x = rng.uniform(size=(1, 8, 8))
    m = amap(rng.normal(size=(8, 8)), 1)
    rs = RegionSpec(patch=(2, 2), max_regions=5, seed=3)
    batch = image_metrics(net, x, m, rs)
    assert batch["faithfulness_correlation"] == faithfulness_correlation(net, x, m, rs)
    assert batch["max_sensitivity"] == max_sensitivity(net, x, rs, 1)
    assert batch["avg_sensitivity"] == avg_sensitivity(net, x, rs, 1)
    assert batch["mprt"] == mprt(net, x, rs, 1)
    assert batch["smooth_mprt"] == smooth_mprt(net, x, m, rs)
    assert batch["faithfulness_estimate"] == faithfulness_estimate(net, x, m, rs)


def test_subsample_with_full_cap_is_exhaustive(rng):
    net = random_cnn(rng)
    x = rng.uniform(size=(1, 8, 8))
    m = amap(rng.normal(size=(8, 8)))
    full = image_metrics(net, x, m, RegionSpec(patch=(2, 2), max_regions=None))
    capped = image_metrics(net, x, m, RegionSpec(patch=(2, 2), max_regions=16, seed=99))
    assert full == capped


def test_subsample_is_seeded_and_sorted():
    a = regions((8, 8), RegionSpec(patch=(1, 1), max_regions=10, seed=1))
    b = regions((8, 8), RegionSpec(patch=(1, 1), max_regions=10, seed=1))
    assert [r[0] for r in a] == [r[0] for r in b] == sorted(r[0] for r in a)
    assert len(a) == 10


def test_edge_regions_are_clipped():
    regs = regions((7, 7), RegionSpec(patch=(3, 3), max_regions=None))
    assert len(regs) == 9
    assert regs[-1][1] == slice(6, 7)


def test_faithfulness_estimate_identity(rng):
    # with |a_i| all equal, estimate = correlation * mean |a_i|
    for _ in range(20):
        net = random_cnn(rng)
        x = rng.uniform(size=(1, 8, 8))
        v = rng.uniform(0.1, 2.0)
        signs = rng.choice([-1.0, 1.0], size=(4, 4))
        values = np.kron(signs * v / 4, np.ones((2, 2)))
        m = amap(values)
        est = faithfulness_estimate(net, x, m, EXHAUSTIVE)
        corr = faithfulness_correlation(net, x, m, EXHAUSTIVE)
        assert abs(est - corr * v) < 1e-12


def test_gaussian_region_noise_is_seeded(rng):
    net = random_cnn(rng)
    x = rng.uniform(size=(1, 8, 8))
    rs = RegionSpec(patch=(2, 2), perturbation="gaussian", sigma=0.5, max_regions=None, seed=4)
    assert mprt(net, x, rs, 0) == mprt(net, x, rs, 0)
    assert mprt(net, x, rs, 0) != mprt(net, x, RegionSpec(patch=(2, 2), perturbation="gaussian", sigma=0.5, max_regions=None, seed=5), 0)


def test_region_spec_validation():
    with pytest.raises(ValueError):
        RegionSpec(perturbation="blur")
    with pytest.raises(ValueError):
        RegionSpec(max_regions=0)
    with pytest.raises(ValueError):
        RegionSpec(perturbation="gaussian", sigma=0.0)


def test_calculate_image_metrics_examples(rng):
    net = random_cnn(rng)
    images = rng.uniform(size=(3, 1, 8, 8))
    ex = ImageExplainer("saliency")
    cfg = ImageMetricConfig(rspec=RegionSpec(patch=(2, 2), max_regions=None))
    single = calculate_image_metrics(net, ex, images, cfg, indices=[1])
    assert single.columns == IMAGE_METRIC_NAMES
    for col in single.columns:
        assert single.aggregate[col] == single.rows[0][col]
    dup = calculate_image_metrics(net, ex, np.stack([images[1], images[1]]), cfg)
    for col in single.columns:
        assert abs(dup.aggregate[col] - single.aggregate[col]) < 1e-15
    zero_map = lambda model, x, c, seed: amap(np.zeros((8, 8)), c)
    rep = calculate_image_metrics(net, zero_map, images, cfg)
    assert math.isnan(rep.aggregate["faithfulness_correlation"])
    assert rep.excluded["faithfulness_correlation"] == 3
    with pytest.raises(EmptyDataset):
        calculate_image_metrics(net, ex, images[:0], cfg)
