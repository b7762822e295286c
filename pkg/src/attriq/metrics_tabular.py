"""Quality metrics for tabular attributions.

``f`` below is always the target-class score of the model (post-softmax
probability for classifiers unless the model was switched to logits).
Undefined metric values are returned as ``nan``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attrib_tabular import Attribution
from .errors import EmptyDataset
from .models import resolve_class, target_scores
from .seeding import derive_seed

METRIC_NAMES = (
    "faithfulness",
    "infidelity",
    "sensitivity",
    "comprehensiveness",
    "sufficiency",
    "monotonicity",
    "complexity",
    "sparseness",
)


@dataclass(frozen=True)
class PerturbationSpec:
    """How a perturbed input is produced.

    ``baseline-replace`` swaps feature values for ``baseline``;
    ``gaussian-noise`` adds noise of (scalar or per-feature) ``noise_sigma``.
    """

    kind: str = "baseline-replace"
    baseline: Optional[np.ndarray] = None
    noise_sigma: object = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "baseline-replace":
            if self.baseline is None:
                raise ValueError("baseline-replace perturbation needs a baseline")
            object.__setattr__(self, "baseline", np.asarray(self.baseline, dtype=np.float64))
        elif self.kind == "gaussian-noise":
            sigma = np.asarray(self.noise_sigma, dtype=np.float64)
            if self.noise_sigma is None or np.any(sigma < 0):
                raise ValueError("gaussian-noise perturbation needs noise_sigma >= 0")
            object.__setattr__(self, "noise_sigma", sigma)
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")

    def check(self, n):
        if self.kind == "baseline-replace" and self.baseline.shape != (n,):
            raise ValueError(f"baseline length {self.baseline.shape} != n_features {n}")
        if self.kind == "gaussian-noise" and self.noise_sigma.ndim and self.noise_sigma.shape != (n,):
            raise ValueError(f"noise_sigma length {self.noise_sigma.shape} != n_features {n}")


def top_k(values, k) -> np.ndarray:
    """Indices of the ``k`` largest ``|values|``, ties broken by ascending index."""
    values = np.asarray(values)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    return np.lexsort((np.arange(n), -np.abs(values)))[:k]


def default_k(n_features: int) -> int:
    return max(1, math.ceil(n_features / 4))


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        return math.nan
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def single_feature_perturbations(x, pspec: PerturbationSpec) -> np.ndarray:
    """Row ``i`` is ``x`` with only feature ``i`` perturbed."""
    n = x.shape[0]
    pspec.check(n)
    X = np.repeat(x[None], n, axis=0)
    idx = np.arange(n)
    if pspec.kind == "baseline-replace":
        X[idx, idx] = pspec.baseline
    else:
        rng = np.random.default_rng(pspec.seed)
        X[idx, idx] += np.broadcast_to(pspec.noise_sigma, (n,)) * rng.standard_normal(n)
    return X


def _output_deltas(model, x, attribution, pspec):
    x = np.asarray(x, dtype=np.float64)
    X = single_feature_perturbations(x, pspec)
    f = target_scores(model, np.vstack([x[None], X]), attribution.target_class)
    return np.abs(f[0] - f[1:])


def faithfulness(model, x, attribution: Attribution, pspec: PerturbationSpec) -> float:
    """Pearson correlation between ``|a_i|`` and ``|f(x) - f(x_i')|``."""
    if attribution.n_features < 2:
        raise ValueError("faithfulness needs at least two features")
    delta = _output_deltas(model, x, attribution, pspec)
    return _pearson(np.abs(attribution.values), delta)


def faithfulness_product(model, x, attribution: Attribution, pspec: PerturbationSpec) -> float:
    """Mean of ``|f(x) - f(x_i')| * |a_i|`` over features."""
    delta = _output_deltas(model, x, attribution, pspec)
    return float(np.mean(delta * np.abs(attribution.values)))


def infidelity(model, x, attribution: Attribution, pspec: PerturbationSpec, n_draws=64) -> float:
    """Mean squared residual ``(I.a - (f(x) - f(x - I)))^2`` over Gaussian draws ``I``."""
    if pspec.kind != "gaussian-noise":
        raise ValueError("infidelity needs a gaussian-noise perturbation")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    pspec.check(n)
    rng = np.random.default_rng(pspec.seed)
    I = rng.standard_normal((n_draws, n)) * np.broadcast_to(pspec.noise_sigma, (n,))
    f = target_scores(model, np.vstack([x[None], x - I]), attribution.target_class)
    resid = I @ attribution.values - (f[0] - f[1:])
    return float(np.mean(resid * resid))


def sensitivity(explainer, model, x, pspec: PerturbationSpec, attribution: Attribution = None, seed=0) -> float:
    """Mean absolute attribution change when ``x`` receives a small Gaussian nudge.

    The explainer is re-run with the same ``seed`` and target class, so any
    difference comes from the input perturbation alone.
    """
    if pspec.kind != "gaussian-noise":
        raise ValueError("sensitivity needs a gaussian-noise perturbation")
    x = np.asarray(x, dtype=np.float64)
    pspec.check(x.shape[0])
    if attribution is None:
        attribution = explainer(model, x, None, seed)
    rng = np.random.default_rng(pspec.seed)
    x_pert = x + np.broadcast_to(pspec.noise_sigma, x.shape) * rng.standard_normal(x.shape)
    again = explainer(model, x_pert, attribution.target_class, seed)
    return float(np.mean(np.abs(attribution.values - again.values)))


def comprehensiveness(model, x, attribution: Attribution, k: int, baseline) -> float:
    """``f(x) - f(x_mask)`` with the top-``k`` features replaced by ``baseline``."""
    x = np.asarray(x, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    S = top_k(attribution.values, k)
    x_mask = x.copy()
    x_mask[S] = baseline[S]
    f = target_scores(model, np.stack([x, x_mask]), attribution.target_class)
    return float(f[0] - f[1])


def sufficiency(model, x, attribution: Attribution, k: int, baseline) -> float:
    """``f(x) - f(x_focused)``: only the top-``k`` features kept, the rest set to ``baseline``.

    Pass ``baseline=0.0`` for literal zero filling.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    S = top_k(attribution.values, k)
    x_focused = baseline.copy()
    x_focused[S] = x[S]
    f = target_scores(model, np.stack([x, x_focused]), attribution.target_class)
    return float(f[0] - f[1])


def monotonicity(attribution) -> float:
    """Fraction of adjacent feature pairs (column order) whose attributions share a sign."""
    a = np.asarray(getattr(attribution, "values", attribution))
    if a.shape[0] < 2:
        return math.nan
    s = np.sign(a)
    return float(np.count_nonzero(s[:-1] == s[1:]) / (a.shape[0] - 1))


def complexity(attribution, zero_tol=1e-12) -> float:
    """Number of features with ``|a_i| > zero_tol``."""
    a = np.asarray(getattr(attribution, "values", attribution))
    return float(np.count_nonzero(np.abs(a) > zero_tol))


def sparseness(attribution, zero_tol=1e-12) -> float:
    a = np.asarray(getattr(attribution, "values", attribution))
    return 1.0 - complexity(a, zero_tol) / a.shape[0]


# --------------------------------------------------------------------------- #
# Dataset-level evaluation
# --------------------------------------------------------------------------- #
@dataclass
class MetricConfig:
    """Knobs for :func:`calculate_metrics`.

    Per-feature noise scales default to fractions of the background standard
    deviation (``infidelity_scale`` and ``sensitivity_scale``); constant
    columns fall back to a scale of 1.0.
    """

    metrics: Sequence[str] = METRIC_NAMES
    k: Optional[int] = None
    baseline: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None
    faithfulness_perturbation: str = "baseline-replace"
    faithfulness_sigma_scale: float = 0.1
    infidelity_scale: float = 0.1
    sensitivity_scale: float = 0.01
    n_draws: int = 64
    sufficiency_mode: str = "baseline"
    zero_tol: float = 1e-12
    target_class: Optional[int] = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        unknown = [m for m in self.metrics if m not in METRIC_NAMES]
        if unknown:
            raise ValueError(f"unknown metrics {unknown}; valid: {', '.join(METRIC_NAMES)}")
        if self.sufficiency_mode not in ("baseline", "zero"):
            raise ValueError("sufficiency_mode must be 'baseline' or 'zero'")


@dataclass
class MetricReport:
    """Aggregate row plus per-instance rows; ``excluded[m]`` counts undefined values."""

    columns: tuple
    aggregate: dict
    rows: list
    excluded: dict
    errors: list = field(default_factory=list)


def _ordered(metrics, order):
    want = set(metrics)
    return tuple(m for m in order if m in want)


def instance_metrics(model, explainer, x, idx, config: MetricConfig, attribution=None) -> dict:
    """Every requested metric for one instance, keyed by metric name."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    seed = config.seed
    method = getattr(explainer, "method", "explainer")
    baseline = config.baseline if config.baseline is not None else np.zeros(n)
    std = config.feature_std if config.feature_std is not None else np.ones(n)
    std = np.where(std > 0, std, 1.0)
    if attribution is None:
        c = resolve_class(model, x, config.target_class)
        attribution = explainer(model, x, c, derive_seed(seed, idx, method))
    k = config.k or default_k(n)
    k = min(k, n)
    out = {}
    for m in _ordered(config.metrics, METRIC_NAMES):
        mseed = derive_seed(seed, idx, m)
        if m == "faithfulness":
            if config.faithfulness_perturbation == "baseline-replace":
                ps = PerturbationSpec("baseline-replace", baseline=baseline)
            else:
                ps = PerturbationSpec("gaussian-noise", noise_sigma=config.faithfulness_sigma_scale * std, seed=mseed)
            out[m] = faithfulness(model, x, attribution, ps) if n >= 2 else math.nan
        elif m == "infidelity":
            ps = PerturbationSpec("gaussian-noise", noise_sigma=config.infidelity_scale * std, seed=mseed)
            out[m] = infidelity(model, x, attribution, ps, config.n_draws)
        elif m == "sensitivity":
            ps = PerturbationSpec("gaussian-noise", noise_sigma=config.sensitivity_scale * std, seed=mseed)
            out[m] = sensitivity(explainer, model, x, ps, attribution, derive_seed(seed, idx, method))
        elif m == "comprehensiveness":
            out[m] = comprehensiveness(model, x, attribution, k, baseline)
        elif m == "sufficiency":
            fill = baseline if config.sufficiency_mode == "baseline" else 0.0
            out[m] = sufficiency(model, x, attribution, k, fill)
        elif m == "monotonicity":
            out[m] = monotonicity(attribution)
        elif m == "complexity":
            out[m] = complexity(attribution, config.zero_tol)
        elif m == "sparseness":
            out[m] = sparseness(attribution, config.zero_tol)
    return out


def aggregate_rows(rows: list, columns) -> tuple:
    """Per-column mean over rows, skipping NaN; returns ``(means, excluded_counts)``."""
    means, excluded = {}, {}
    for col in columns:
        vals = [r[col] for r in rows if col in r]
        good = [v for v in vals if not math.isnan(v)]
        excluded[col] = len(vals) - len(good)
        means[col] = math.fsum(good) / len(good) if good else math.nan
    return means, excluded


def run_instances(fn, indices, jobs=1) -> list:
    """Apply ``fn(i)`` to every index, preserving order; errors are captured per item."""

    def guarded(i):
        try:
            return i, fn(i), None
        except Exception as exc:  # isolated per instance
            return i, None, exc

    if jobs <= 1:
        return [guarded(i) for i in indices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(guarded, indices))


def calculate_metrics(model, explainer, dataset, config: MetricConfig = None, indices=None) -> MetricReport:
    """Evaluate ``explainer`` on every selected row of ``dataset`` (an ``(N, n)`` matrix
    or a :class:`~attriq.data_io.TabularDataset`) and average per metric."""
    config = config or MetricConfig()
    X = np.asarray(getattr(dataset, "features", dataset), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("dataset has no instances")
    if indices is None:
        indices = range(X.shape[0])
    indices = list(indices)
    if not indices:
        raise EmptyDataset("no instances selected")
    columns = _ordered(config.metrics, METRIC_NAMES)
    results = run_instances(lambda i: instance_metrics(model, explainer, X[i], i, config), indices, config.jobs)
    rows, errors = [], []
    for i, row, exc in results:
        if exc is not None:
            errors.append((i, f"{type(exc).__name__}: {exc}"))
        else:
            rows.append({"idx": i, **row})
    aggregate, excluded = aggregate_rows(rows, columns)
    return MetricReport(columns, aggregate, rows, excluded, errors)
