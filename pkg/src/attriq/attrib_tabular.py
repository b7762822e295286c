"""Per-feature attributions for tabular models.

All methods explain one instance ``x`` (a 1-D feature vector) for one target
class and return an :class:`Attribution`. When ``target_class`` is ``None``
the model's predicted class for ``x`` is used.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import SingularSystem, TooManyFeatures, ZeroVarianceWarning
from .models import input_gradient, input_gradients, resolve_class, target_scores

MAX_EXACT_FEATURES = 15
_CHUNK_ROWS = 1 << 18


@dataclass(frozen=True)
class Attribution:
    values: np.ndarray
    target_class: int
    method: str
    feature_names: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("attribution values must be a vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("attribution values must be finite")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(v.shape[0]))
        if len(names) != v.shape[0]:
            raise ValueError(f"{len(names)} feature names for {v.shape[0]} attributions")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_features(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Background:
    """Reference instances; ``baseline`` is their per-feature mean."""

    samples: np.ndarray
    baseline: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] == 0 or s.shape[1] == 0:
            raise ValueError("background must be a non-empty (n_samples, n_features) matrix")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "baseline", s.mean(axis=0))
        object.__setattr__(self, "std", s.std(axis=0))

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]


def _as_background(background) -> Background:
    return background if isinstance(background, Background) else Background(background)


def _check_width(x, background):
    if background.n_features != x.shape[0]:
        raise ValueError(
            f"background has {background.n_features} columns but x has {x.shape[0]} features"
        )


def mask_bits(masks, n):
    """Boolean (len(masks), n) matrix; bit ``i`` of a mask marks feature ``i`` present."""
    masks = np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def coalition_values(model, x, background: Background, bits, target_class):
    """Interventional coalition value: mean over background rows of the target
    score with present features taken from ``x`` and the rest from the row."""
    bits = np.asarray(bits, dtype=bool)
    B = background.samples
    nb = B.shape[0]
    out = np.empty(bits.shape[0])
    step = max(1, _CHUNK_ROWS // nb)
    for lo in range(0, bits.shape[0], step):
        chunk = bits[lo : lo + step]
        X = np.where(chunk[:, None, :], x[None, None, :], B[None, :, :])
        f = target_scores(model, X.reshape(-1, x.shape[0]), target_class)
        out[lo : lo + step] = f.reshape(chunk.shape[0], nb).mean(axis=1)
    return out


def exact_shapley(model, x, background, target_class=None, feature_names=()) -> Attribution:
    """Shapley values by enumerating all ``2^n`` coalitions."""
    x = np.asarray(x, dtype=np.float64)
    background = _as_background(background)
    _check_width(x, background)
    n = x.shape[0]
    if n > MAX_EXACT_FEATURES:
        raise TooManyFeatures(f"exact enumeration supports at most {MAX_EXACT_FEATURES} features, got {n}")
    c = resolve_class(model, x, target_class)
    masks = np.arange(1 << n)
    v = coalition_values(model, x, background, mask_bits(masks, n), c)
    size = np.array([bin(m).count("1") for m in masks])
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = np.array([fact[s] * fact[n - s - 1] / fact[n] if s < n else 0.0 for s in range(n + 1)])
    phi = np.empty(n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = np.dot(weight[size[without]], v[without | (1 << i)] - v[without])
    return Attribution(phi, c, "exact_shapley", feature_names)


def shapley_kernel_weight(n_features: int, size: int) -> float:
    """Shapley kernel ``(M-1) / (C(M,|z|) |z| (M-|z|))`` for a proper coalition."""
    M = n_features
    return (M - 1) / (math.comb(M, size) * size * (M - size))


def _sample_coalitions(n, n_coalitions, rng):
    """Kernel-distributed coalition draws, paired with their complements."""
    sizes = np.arange(1, n)
    p = (n - 1) / (sizes * (n - sizes))
    p = p / p.sum()
    counts = {}
    drawn = 0
    while drawn < n_coalitions:
        s = rng.choice(sizes, p=p)
        members = rng.choice(n, size=s, replace=False)
        m = int(np.sum(1 << members))
        for mm in (m, ((1 << n) - 1) ^ m):
            counts[mm] = counts.get(mm, 0) + 1
            drawn += 1
    masks = np.array(sorted(counts), dtype=np.int64)
    return masks, np.array([counts[m] for m in masks], dtype=np.float64)


def kernel_shap(
    model, x, background, target_class=None, n_coalitions=2048, seed=0, feature_names=()
) -> Attribution:
    """Kernel SHAP: Shapley-kernel weighted least squares over coalitions.

    If ``n_coalitions`` covers all ``2^M - 2`` proper coalitions they are
    enumerated with exact kernel weights (the solution is then the exact
    Shapley vector); otherwise coalitions are sampled from the kernel with
    complement pairing and weighted by their draw counts. The fit is
    constrained so attributions sum to ``f(x) - v(empty)``.
    """
    x = np.asarray(x, dtype=np.float64)
    background = _as_background(background)
    _check_width(x, background)
    M = x.shape[0]
    full = (1 << M) - 1
    floor = min(M + 2, max(full - 1, 0))
    if n_coalitions < floor:
        raise ValueError(f"n_coalitions must be >= {floor} for {M} features")
    c = resolve_class(model, x, target_class)
    v_empty, v_full = coalition_values(model, x, background, mask_bits([0, full], M), c)
    total = v_full - v_empty
    if M == 1:
        return Attribution([total], c, "kernel_shap", feature_names)

    if n_coalitions >= full - 1:
        masks = np.arange(1, full, dtype=np.int64)
        Z = mask_bits(masks, M)
        sizes = Z.sum(axis=1)
        w = np.array([shapley_kernel_weight(M, s) for s in sizes])
    else:
        rng = np.random.default_rng(seed)
        masks, w = _sample_coalitions(M, n_coalitions, rng)
        Z = mask_bits(masks, M)
    y = coalition_values(model, x, background, Z, c) - v_empty

    Zf = Z.astype(np.float64)
    A = Zf[:, :-1] - Zf[:, -1:]
    b = y - Zf[:, -1] * total
    sw = np.sqrt(w)
    coef, _, rank, _ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    if rank < M - 1:
        raise SingularSystem(
            f"coalition design has rank {rank} < {M - 1}; increase n_coalitions"
        )
    phi = np.append(coef, total - coef.sum())
    return Attribution(phi, c, "kernel_shap", feature_names)


def lime_tabular(
    model,
    x,
    background,
    target_class=None,
    n_samples=5000,
    kernel_width=None,
    ridge=1.0,
    seed=0,
    feature_names=(),
) -> Attribution:
    """Local ridge surrogate fit on Gaussian perturbations around ``x``.

    Perturbations are scaled by the background's per-feature standard
    deviation; samples are weighted by ``exp(-d^2 / kernel_width^2)`` where
    ``d`` is the standardized Euclidean distance to ``x``. The attribution is
    the vector of surrogate coefficients (raw feature units).
    """
    x = np.asarray(x, dtype=np.float64)
    background = _as_background(background)
    _check_width(x, background)
    n = x.shape[0]
    if n_samples < 10 * n:
        raise ValueError(f"n_samples must be >= 10 * n_features = {10 * n}")
    if kernel_width is None:
        kernel_width = 0.75 * math.sqrt(n)
    c = resolve_class(model, x, target_class)

    scale = background.std.copy()
    constant = scale == 0
    if constant.any():
        warnings.warn(
            f"constant background columns {np.flatnonzero(constant).tolist()}; "
            "perturbation scale falls back to 1.0",
            ZeroVarianceWarning,
            stacklevel=2,
        )
        scale[constant] = 1.0

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_samples, n))
    Z = x + noise * scale
    y = target_scores(model, Z, c)
    d2 = np.sum(noise * noise, axis=1)
    w = np.exp(-d2 / kernel_width**2)

    D = Z - x
    wsum = w.sum()
    D_mean = w @ D / wsum
    y_mean = w @ y / wsum
    Dc = D - D_mean
    yc = y - y_mean
    lhs = (Dc * w[:, None]).T @ Dc + ridge * np.eye(n)
    rhs = (Dc * w[:, None]).T @ yc
    coef = np.linalg.solve(lhs, rhs)
    return Attribution(coef, c, "lime", feature_names)


def integrated_gradients(model, x, baseline, target_class=None, steps=64, feature_names=()) -> Attribution:
    """Path-integrated gradients from ``baseline`` to ``x`` (midpoint rule)."""
    x = np.asarray(x, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    if steps < 8:
        raise ValueError("steps must be >= 8")
    c = resolve_class(model, x, target_class)
    return Attribution(_ig(model, x, baseline, c, steps), c, "integrated_gradients", feature_names)


def _ig(model, x, baseline, c, steps):
    alphas = (np.arange(steps) + 0.5) / steps
    delta = x - baseline
    path = baseline[None] + alphas.reshape((-1,) + (1,) * x.ndim) * delta[None]
    g = input_gradients(model, path, c)
    return delta * g.mean(axis=0)


def saliency(model, x, target_class=None, feature_names=()) -> Attribution:
    x = np.asarray(x, dtype=np.float64)
    c = resolve_class(model, x, target_class)
    return Attribution(np.abs(input_gradient(model, x, c)), c, "saliency", feature_names)


def grad_x_input(model, x, target_class=None, feature_names=()) -> Attribution:
    x = np.asarray(x, dtype=np.float64)
    c = resolve_class(model, x, target_class)
    return Attribution(x * input_gradient(model, x, c), c, "grad_x_input", feature_names)


def feature_ablation(model, x, baseline, target_class=None, feature_names=()) -> Attribution:
    """``f(x) - f(x with feature i set to baseline_i)`` for every feature."""
    x = np.asarray(x, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    c = resolve_class(model, x, target_class)
    X = np.repeat(x[None], x.shape[0], axis=0)
    idx = np.arange(x.shape[0])
    X[idx, idx] = baseline
    f = target_scores(model, np.vstack([x[None], X]), c)
    return Attribution(f[0] - f[1:], c, "feature_ablation", feature_names)


TABULAR_METHODS = (
    "exact_shapley",
    "kernel_shap",
    "lime",
    "integrated_gradients",
    "saliency",
    "grad_x_input",
    "feature_ablation",
)
_STOCHASTIC = {"kernel_shap", "lime"}
_OPTIONS = {
    "exact_shapley": set(),
    "kernel_shap": {"n_coalitions"},
    "lime": {"n_samples", "kernel_width", "ridge"},
    "integrated_gradients": {"steps", "baseline"},
    "saliency": set(),
    "grad_x_input": set(),
    "feature_ablation": {"baseline"},
}


@dataclass(frozen=True)
class TabularExplainer:
    """A configured tabular method, callable as ``explainer(model, x, target_class, seed)``."""

    method: str
    background: Optional[Background] = None
    options: Mapping = field(default_factory=dict)
    feature_names: Sequence[str] = ()

    def __post_init__(self):
        if self.method not in TABULAR_METHODS:
            raise ValueError(f"unknown tabular method {self.method!r}; valid: {', '.join(TABULAR_METHODS)}")
        unknown = set(self.options) - _OPTIONS[self.method]
        if unknown:
            raise ValueError(f"unknown options for {self.method}: {sorted(unknown)}")
        if self.background is not None and not isinstance(self.background, Background):
            object.__setattr__(self, "background", Background(self.background))
        object.__setattr__(self, "options", dict(self.options))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def stochastic(self) -> bool:
        return self.method in _STOCHASTIC

    def _baseline(self, x):
        if "baseline" in self.options:
            return np.asarray(self.options["baseline"], dtype=np.float64)
        if self.background is not None:
            return self.background.baseline
        return np.zeros_like(x)

    def __call__(self, model, x, target_class=None, seed=0) -> Attribution:
        x = np.asarray(x, dtype=np.float64)
        names = self.feature_names
        m = self.method
        if m in ("exact_shapley", "kernel_shap", "lime") and self.background is None:
            raise ValueError(f"{m} needs a background set")
        if m == "exact_shapley":
            return exact_shapley(model, x, self.background, target_class, names)
        if m == "kernel_shap":
            return kernel_shap(model, x, self.background, target_class, seed=seed, feature_names=names, **self.options)
        if m == "lime":
            return lime_tabular(model, x, self.background, target_class, seed=seed, feature_names=names, **self.options)
        if m == "integrated_gradients":
            steps = self.options.get("steps", 64)
            return integrated_gradients(model, x, self._baseline(x), target_class, steps, names)
        if m == "saliency":
            return saliency(model, x, target_class, names)
        if m == "grad_x_input":
            return grad_x_input(model, x, target_class, names)
        return feature_ablation(model, x, self._baseline(x), target_class, names)


def attribution_rows(attribution: Attribution, x) -> list:
    """Report rows ``idx, feature, value, attribution`` by descending ``|attribution|``."""
    x = np.asarray(x, dtype=np.float64)
    order = sorted(range(attribution.n_features), key=lambda i: (-abs(attribution.values[i]), i))
    return [
        {
            "idx": i,
            "feature": attribution.feature_names[i],
            "value": float(x[i]),
            "attribution": float(attribution.values[i]),
        }
        for i in order
    ]
