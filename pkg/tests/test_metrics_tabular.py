import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attriq.attrib_tabular import Attribution, Background, TabularExplainer, exact_shapley
from attriq.errors import EmptyDataset
from attriq.metrics_tabular import (
    METRIC_NAMES,
    MetricConfig,
    PerturbationSpec,
    calculate_metrics,
    complexity,
    comprehensiveness,
    default_k,
    faithfulness,
    faithfulness_product,
    infidelity,
    monotonicity,
    sensitivity,
    sparseness,
    sufficiency,
    top_k,
)
from attriq.models import LinearModel
from oracles import (
    f,
    random_forest,
    random_mlp,
    ref_complexity,
    ref_comprehensiveness,
    ref_faithfulness,
    ref_infidelity,
    ref_monotonicity,
    ref_sufficiency,
    ref_topk,
)


def attr(values, c=0):
    return Attribution(values, c, "test")


def only_feature(j, n, w=2.0):
    weights = np.zeros(n)
    weights[j] = w
    return LinearModel(weights, 0.5)


# faithfulness
def test_faithfulness_linear_exact_attribution(rng):
    for _ in range(10):
        w, x, b = rng.normal(size=(3, 6))
        m = LinearModel(w, 0.1)
        a = attr(w * (x - b))
        assert abs(faithfulness(m, x, a, PerturbationSpec(baseline=b)) - 1.0) < 1e-9


def test_faithfulness_reversed_ranking():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    x, b = np.ones(4), np.zeros(4)
    a = attr(w[::-1].copy())
    r = faithfulness(LinearModel(w, 0.0), x, a, PerturbationSpec(baseline=b))
    assert abs(r + 1.0) < 1e-9


def test_faithfulness_constant_model_undefined():
    m = LinearModel(np.zeros(3), 1.0)
    assert math.isnan(faithfulness(m, np.ones(3), attr([1.0, 2.0, 3.0]), PerturbationSpec(baseline=np.zeros(3))))


def test_faithfulness_product_literal():
    w = np.array([1.0, -2.0])
    m = LinearModel(w, 0.0)
    got = faithfulness_product(m, np.ones(2), attr([3.0, 1.0]), PerturbationSpec(baseline=np.zeros(2)))
    assert got == (1 * 3 + 2 * 1) / 2


# infidelity
def test_infidelity_zero_for_gradient_attribution(rng):
    w, x = rng.normal(size=(2, 5))
    ps = PerturbationSpec("gaussian-noise", noise_sigma=0.3, seed=2)
    assert abs(infidelity(LinearModel(w, 1.0), x, attr(w), ps)) < 1e-12


def test_infidelity_zero_attribution_is_mean_squared_delta(rng):
    net = random_mlp(rng, 4)
    x = rng.normal(size=4)
    ps = PerturbationSpec("gaussian-noise", noise_sigma=0.2, seed=11)
    draws = np.random.default_rng(11).standard_normal((16, 4)) * 0.2
    want = np.mean([(f(net, x, 1) - f(net, x - I, 1)) ** 2 for I in draws])
    assert abs(infidelity(net, x, attr(np.zeros(4), 1), ps, n_draws=16) - want) < 1e-12


def test_infidelity_seeded(rng):
    net = random_mlp(rng, 4)
    x = rng.normal(size=4)
    ps = PerturbationSpec("gaussian-noise", noise_sigma=0.2, seed=5)
    assert infidelity(net, x, attr(x), ps) == infidelity(net, x, attr(x), ps)


# sensitivity
def test_sensitivity_linear_saliency_is_zero(rng):
    m = LinearModel(rng.normal(size=4), 0.0)
    ex = TabularExplainer("saliency", Background(rng.normal(size=(5, 4))))
    ps = PerturbationSpec("gaussian-noise", noise_sigma=0.5, seed=1)
    assert sensitivity(ex, m, rng.normal(size=4), ps) < 1e-9


def test_sensitivity_zero_sigma_is_zero(rng):
    net = random_mlp(rng, 4)
    ex = TabularExplainer("grad_x_input", Background(rng.normal(size=(5, 4))))
    ps = PerturbationSpec("gaussian-noise", noise_sigma=0.0)
    assert sensitivity(ex, net, rng.normal(size=4), ps) == 0.0


def test_sensitivity_non_negative(rng):
    net = random_mlp(rng, 4)
    ex = TabularExplainer("grad_x_input", Background(rng.normal(size=(5, 4))))
    for s in range(10):
        ps = PerturbationSpec("gaussian-noise", noise_sigma=0.5, seed=s)
        assert sensitivity(ex, net, rng.normal(size=4), ps) >= 0


# top-k, comprehensiveness, sufficiency
def test_top_k_ties_by_index():
    assert top_k([1.0, -3.0, 3.0, 0.5], 2).tolist() == [1, 2]
    assert top_k([2.0, 2.0, 2.0], 2).tolist() == [0, 1]
    assert default_k(4) == 1 and default_k(5) == 2
    with pytest.raises(ValueError):
        top_k([1.0], 2)


def test_comprehensiveness_single_dependency():
    m = only_feature(0, 4)
    x, b = np.array([3.0, 1.0, 1.0, 1.0]), np.array([-1.0, 0.0, 0.0, 0.0])
    a = attr([5.0, 1.0, 2.0, 0.1])
    xb = x.copy()
    xb[0] = b[0]
    assert comprehensiveness(m, x, a, 2, b) == f(m, x, 0) - f(m, xb, 0)


def test_comprehensiveness_all_features(rng):
    net = random_mlp(rng, 5)
    x, b = rng.normal(size=(2, 5))
    a = attr(rng.normal(size=5), 2)
    assert abs(comprehensiveness(net, x, a, 5, b) - (f(net, x, 2) - f(net, b, 2))) < 1e-12
    assert comprehensiveness(LinearModel(np.zeros(5), 3.0), x, attr(x), 2, b) == 0.0


def test_sufficiency_examples():
    x, b = np.array([3.0, 1.0, 2.0, 1.0]), np.zeros(4)
    a = attr([5.0, 1.0, 0.2, 0.1])
    assert sufficiency(only_feature(0, 4), x, a, 4, b) == 0.0
    assert sufficiency(only_feature(0, 4), x, a, 1, b) == 0.0
    m = only_feature(2, 4)
    xj = x.copy()
    xj[2] = b[2]
    assert sufficiency(m, x, a, 1, b) == f(m, x, 0) - f(m, xj, 0)


# monotonicity, complexity, sparseness
def test_monotonicity_examples():
    assert monotonicity([1.0, 2.0, 3.0]) == 1.0
    assert monotonicity([1.0, -1.0, 1.0]) == 0.0
    assert monotonicity([1.0, 2.0, -1.0, -2.0]) == 2 / 3
    assert math.isnan(monotonicity([1.0]))


def test_complexity_and_sparseness():
    assert complexity([0.5, 0, 0.2, 0]) == 2 and sparseness([0.5, 0, 0.2, 0]) == 0.5
    assert complexity([0.1, -0.2, 0.3, 0.4]) == 4.0 and sparseness([0.1, -0.2, 0.3, 0.4]) == 0.0
    assert complexity(np.zeros(3)) == 0 and sparseness(np.zeros(3)) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12))
def test_metric_ranges(values):
    n = len(values)
    assert 0 <= monotonicity(values) <= 1
    assert 0 <= complexity(values) <= n
    assert sparseness(values) == 1 - complexity(values) / n


def test_faithfulness_in_range(rng):
    net = random_mlp(rng, 5)
    ps = PerturbationSpec(baseline=np.zeros(5))
    for _ in range(100):
        r = faithfulness(net, rng.normal(size=5), attr(rng.normal(size=5)), ps)
        assert math.isnan(r) or -1 <= r <= 1


# brute-force equivalence
@pytest.mark.parametrize("family", ["mlp", "forest"])
def test_matches_reference_loops(family, rng):
    for case in range(25):
        n = int(rng.integers(2, 8))
        model = random_mlp(rng, n) if family == "mlp" else random_forest(rng, n, n_classes=3)
        x, b = rng.normal(size=(2, n))
        a = rng.normal(size=n)
        c = int(rng.integers(3))
        A = attr(a, c)
        k = int(rng.integers(1, n + 1))
        r = faithfulness(model, x, A, PerturbationSpec(baseline=b))
        ref = ref_faithfulness(model, x, a, b, c)
        assert (math.isnan(r) and math.isnan(ref)) or abs(r - ref) < 1e-10
        ps = PerturbationSpec("gaussian-noise", noise_sigma=0.3, seed=case)
        draws = np.random.default_rng(case).standard_normal((8, n)) * 0.3
        assert abs(infidelity(model, x, A, ps, 8) - ref_infidelity(model, x, a, draws, c)) < 1e-10
        assert set(top_k(a, k).tolist()) == ref_topk(a, k)
        assert abs(comprehensiveness(model, x, A, k, b) - ref_comprehensiveness(model, x, a, k, b, c)) < 1e-10
        assert abs(sufficiency(model, x, A, k, b) - ref_sufficiency(model, x, a, k, b, c)) < 1e-10
        assert abs(monotonicity(a) - ref_monotonicity(a)) < 1e-10
        assert complexity(a) == ref_complexity(a)


# dataset aggregation
def linear_setup(rng, N=6):
    m = LinearModel(rng.normal(size=(3, 4)), rng.normal(size=3), "softmax")
    X = rng.normal(size=(N, 4))
    bg = Background(X)
    return m, X, TabularExplainer("exact_shapley", bg), MetricConfig(baseline=bg.baseline, feature_std=bg.std)


def test_aggregate_column_order(rng):
    m, X, ex, cfg = linear_setup(rng)
    rep = calculate_metrics(m, ex, X, cfg)
    assert rep.columns == METRIC_NAMES
    sub = MetricConfig(metrics=("sparseness", "faithfulness"))
    assert calculate_metrics(m, ex, X, sub).columns == ("faithfulness", "sparseness")


def test_single_instance_aggregate_equals_row(rng):
    m, X, ex, cfg = linear_setup(rng)
    rep = calculate_metrics(m, ex, X, cfg, indices=[2])
    row = rep.rows[0]
    assert row["idx"] == 2
    for col in rep.columns:
        assert rep.aggregate[col] == row[col]


def test_duplicated_instance_aggregate_unchanged(rng):
    m, X, ex, cfg = linear_setup(rng)
    X = np.repeat(X[:1], 2, axis=0)
    once = calculate_metrics(m, ex, X, cfg, indices=[0]).aggregate
    twice = calculate_metrics(m, ex, X, cfg).aggregate
    for col in METRIC_NAMES:
        if col in ("sensitivity", "infidelity"):
            continue  # per-instance noise seeds differ by index
        assert twice[col] == once[col]


def test_constant_model_faithfulness_excluded(rng):
    m = LinearModel(np.zeros(4), 1.0)
    X = rng.normal(size=(5, 4))
    ex = TabularExplainer("saliency", Background(X))
    rep = calculate_metrics(m, ex, X, MetricConfig(metrics=("faithfulness", "complexity")))
    assert math.isnan(rep.aggregate["faithfulness"])
    assert rep.excluded["faithfulness"] == 5
    assert rep.aggregate["complexity"] == 0.0


def test_parallel_equals_serial(rng):
    m, X, ex, cfg = linear_setup(rng)
    serial = calculate_metrics(m, ex, X, cfg)
    cfg.jobs = 4
    par = calculate_metrics(m, ex, X, cfg)
    assert serial.rows == par.rows and serial.aggregate == par.aggregate


def test_errors_are_isolated(rng):
    m, X, _, cfg = linear_setup(rng)

    def flaky(model, x, c, seed):
        if x[0] == X[1, 0]:
            raise RuntimeError("boom")
        return exact_shapley(model, x, X, c)

    rep = calculate_metrics(m, flaky, X, MetricConfig(metrics=("complexity",)))
    assert [e[0] for e in rep.errors] == [1]
    assert len(rep.rows) == len(X) - 1


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        calculate_metrics(LinearModel(np.ones(2), 0.0), None, np.zeros((0, 2)))
