"""Quality metrics for image attribution maps.

The image is partitioned into a grid of regions (single pixels or
``h x w`` patches, edge patches clipped). Each region is perturbed on its own
across all channels, and ``|f(x) - f(x_i')|`` is recorded for the target
class. Region attribution ``a_i`` is the sum of map values inside the region.

Note: ``mprt`` here is the mean per-region output change, not the model
parameter randomisation test of the sanity-check literature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyDataset, ShapeMismatch
from .metrics_tabular import MetricReport, aggregate_rows, run_instances
from .models import _check_input, resolve_class, target_scores
from .seeding import derive_seed

IMAGE_METRIC_NAMES = (
    "faithfulness_correlation",
    "max_sensitivity",
    "mprt",
    "smooth_mprt",
    "avg_sensitivity",
    "faithfulness_estimate",
)
PERTURBATIONS = ("black", "mean", "gaussian")


@dataclass(frozen=True)
class RegionSpec:
    """Region grid, perturbation and sampling cap.

    ``patch=(1, 1)`` is pixel granularity; ``max_regions=None`` evaluates
    every region.
    """

    patch: tuple = (4, 4)
    perturbation: str = "black"
    sigma: float = 0.1
    max_regions: Optional[int] = 256
    seed: int = 0

    def __post_init__(self):
        patch = (self.patch, self.patch) if np.isscalar(self.patch) else tuple(int(p) for p in self.patch)
        if len(patch) != 2 or min(patch) < 1:
            raise ValueError(f"patch must be two positive ints, got {self.patch}")
        object.__setattr__(self, "patch", patch)
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"perturbation must be one of {PERTURBATIONS}")
        if self.perturbation == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian perturbation needs sigma > 0")
        if self.max_regions is not None and self.max_regions < 1:
            raise ValueError("max_regions must be >= 1")

    @classmethod
    def pixel(cls, **kw):
        return cls(patch=(1, 1), **kw)


def regions(shape, rspec: RegionSpec) -> list:
    """Selected regions as ``(index, row slice, col slice)`` in grid order."""
    H, W = shape[-2:]
    ph, pw = rspec.patch
    if ph > H or pw > W:
        raise ShapeMismatch(f"patch {rspec.patch} larger than image {(H, W)}")
    grid = [(slice(i, min(i + ph, H)), slice(j, min(j + pw, W))) for i in range(0, H, ph) for j in range(0, W, pw)]
    chosen = range(len(grid))
    if rspec.max_regions is not None and rspec.max_regions < len(grid):
        rng = np.random.default_rng(rspec.seed)
        chosen = np.sort(rng.choice(len(grid), size=rspec.max_regions, replace=False))
    return [(int(k), *grid[k]) for k in chosen]


def perturb_region(x, k, rows, cols, rspec: RegionSpec, kind=None):
    kind = kind or rspec.perturbation
    xp = x.copy()
    if kind == "black":
        xp[:, rows, cols] = 0.0
    elif kind == "mean":
        xp[:, rows, cols] = x.mean(axis=(1, 2))[:, None, None]
    else:
        rng = np.random.default_rng(derive_seed(rspec.seed, k, "region-noise"))
        xp[:, rows, cols] += rspec.sigma * rng.standard_normal(xp[:, rows, cols].shape)
    return xp


def region_deltas(model, x, target_class, rspec: RegionSpec, kind=None):
    """``(regions, |f(x) - f(x_i')|)`` for every selected region."""
    x = _check_input(model, x)
    regs = regions(x.shape, rspec)
    batch = np.stack([x] + [perturb_region(x, k, r, c, rspec, kind) for k, r, c in regs])
    f = target_scores(model, batch, target_class)
    return regs, np.abs(f[0] - f[1:])


def region_attributions(amap, regs) -> np.ndarray:
    values = np.asarray(getattr(amap, "values", amap), dtype=np.float64)
    return np.array([values[r, c].sum() for _, r, c in regs])


def _target(model, x, amap, target_class):
    if target_class is not None:
        return target_class
    if getattr(amap, "target_class", None) is not None:
        return amap.target_class
    return resolve_class(model, x)


def faithfulness_correlation(model, x, amap, rspec: RegionSpec = RegionSpec(), target_class=None) -> float:
    """``sum |df_i| |a_i| / sum |a_i|``; NaN when the map is zero on every region."""
    c = _target(model, x, amap, target_class)
    regs, d = region_deltas(model, x, c, rspec)
    a = np.abs(region_attributions(amap, regs))
    total = a.sum()
    return float(np.dot(d, a) / total) if total > 0 else math.nan


def max_sensitivity(model, x, rspec: RegionSpec = RegionSpec(), target_class=None) -> float:
    c = resolve_class(model, x, target_class)
    return float(region_deltas(model, x, c, rspec)[1].max())


def avg_sensitivity(model, x, rspec: RegionSpec = RegionSpec(), target_class=None) -> float:
    c = resolve_class(model, x, target_class)
    return float(region_deltas(model, x, c, rspec)[1].mean())


def mprt(model, x, rspec: RegionSpec = RegionSpec(), target_class=None) -> float:
    """Mean absolute output change under per-region perturbation."""
    c = resolve_class(model, x, target_class)
    return float(region_deltas(model, x, c, rspec)[1].mean())


def smooth_mprt(model, x, amap, rspec: RegionSpec = RegionSpec(), target_class=None) -> float:
    """Mean of ``|df_i| / (1 + |a_i|)``."""
    c = _target(model, x, amap, target_class)
    regs, d = region_deltas(model, x, c, rspec)
    return float(np.mean(d / (1.0 + np.abs(region_attributions(amap, regs)))))


def faithfulness_estimate(model, x, amap, rspec: RegionSpec = RegionSpec(), target_class=None) -> float:
    """Mean of ``|df_i| |a_i|`` with each region blacked out (whatever ``rspec.perturbation`` says)."""
    c = _target(model, x, amap, target_class)
    regs, d = region_deltas(model, x, c, rspec, kind="black")
    return float(np.mean(d * np.abs(region_attributions(amap, regs))))


def image_metrics(model, x, amap, rspec: RegionSpec = RegionSpec(), metrics=IMAGE_METRIC_NAMES, target_class=None) -> dict:
    """All requested image metrics, sharing one batch of region evaluations."""
    c = _target(model, x, amap, target_class)
    want = [m for m in IMAGE_METRIC_NAMES if m in set(metrics)]
    out = {}
    need_main = any(m != "faithfulness_estimate" for m in want)
    if need_main:
        regs, d = region_deltas(model, x, c, rspec)
        a = np.abs(region_attributions(amap, regs))
    for m in want:
        if m == "faithfulness_correlation":
            out[m] = float(np.dot(d, a) / a.sum()) if a.sum() > 0 else math.nan
        elif m == "max_sensitivity":
            out[m] = float(d.max())
        elif m in ("mprt", "avg_sensitivity"):
            out[m] = float(d.mean())
        elif m == "smooth_mprt":
            out[m] = float(np.mean(d / (1.0 + a)))
        elif m == "faithfulness_estimate":
            if rspec.perturbation == "black" and need_main:
                db, ab = d, a
            else:
                regs_b, db = region_deltas(model, x, c, rspec, kind="black")
                ab = np.abs(region_attributions(amap, regs_b))
            out[m] = float(np.mean(db * ab))
    return out


@dataclass
class ImageMetricConfig:
    metrics: Sequence[str] = IMAGE_METRIC_NAMES
    rspec: RegionSpec = RegionSpec()
    target_class: Optional[int] = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        unknown = [m for m in self.metrics if m not in IMAGE_METRIC_NAMES]
        if unknown:
            raise ValueError(f"unknown image metrics {unknown}; valid: {', '.join(IMAGE_METRIC_NAMES)}")


def calculate_image_metrics(model, explainer, images, config: ImageMetricConfig = None, indices=None) -> MetricReport:
    """Explain and score every selected image of an ``(N, C, H, W)`` stack."""
    config = config or ImageMetricConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise EmptyDataset("image stack has no instances")
    indices = list(range(images.shape[0]) if indices is None else indices)
    if not indices:
        raise EmptyDataset("no instances selected")
    columns = tuple(m for m in IMAGE_METRIC_NAMES if m in set(config.metrics))
    method = getattr(explainer, "method", "explainer")

    def one(i):
        x = images[i]
        c = resolve_class(model, x, config.target_class)
        amap = explainer(model, x, c, derive_seed(config.seed, i, method))
        return image_metrics(model, x, amap, config.rspec, columns, c)

    rows, errors = [], []
    for i, row, exc in run_instances(one, indices, config.jobs):
        if exc is not None:
            errors.append((i, f"{type(exc).__name__}: {exc}"))
        else:
            rows.append({"idx": i, **row})
    aggregate, excluded = aggregate_rows(rows, columns)
    return MetricReport(columns, aggregate, rows, excluded, errors)
