"""Run configuration and the explain / evaluate / benchmark / validate workflows.

Exit codes: 0 ok, 1 internal bug, 2 config, 3 IO, 4 computation.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attrib_image import IMAGE_METHODS, ImageExplainer
from .attrib_tabular import TABULAR_METHODS, Background, TabularExplainer, attribution_rows
from .data_io import (
    REPORT_FORMATS,
    emit_report,
    load_csv,
    load_json,
    load_model,
    load_tensor,
    report_extension,
    save_pgm,
    save_tensor,
    validate_document,
)
from .errors import AttriqError, ConfigError, ParseError, SchemaViolation
from .metrics_image import IMAGE_METRIC_NAMES, ImageMetricConfig, RegionSpec, calculate_image_metrics
from .metrics_tabular import METRIC_NAMES, MetricConfig, MetricReport, calculate_metrics, run_instances
from .models import resolve_class, with_output
from .seeding import derive_seed

log = logging.getLogger("attriq")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_IO, EXIT_COMPUTE = 0, 1, 2, 3, 4
TASKS = ("binary-classification", "multiclass-classification", "regression")


class IOFailure(AttriqError):
    """Input files are missing or unreadable."""


_EXPLAINER = {
    "oneOf": [
        {"type": "string"},
        {
            "type": "object",
            "properties": {
                "method": {"type": "string"},
                "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                "options": {"type": "object"},
            },
            "required": ["method"],
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": 1},
        "modality": {"enum": ["tabular", "image"]},
        "model_path": {"type": "string"},
        "data_path": {"type": "string"},
        "background_path": {"type": "string"},
        "background_max": {"type": "integer", "minimum": 1},
        "data": {
            "type": "object",
            "properties": {
                "has_header": {"type": "boolean"},
                "label_column": {"type": ["string", "integer", "null"]},
                "allow_missing": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "task": {"enum": list(TASKS)},
        "output_mode": {"enum": ["probability", "logit"]},
        "explainers": {"type": "array", "minItems": 1, "items": _EXPLAINER},
        "metrics": {"type": "array", "items": {"type": "string"}},
        "perturbation": {"type": "object"},
        "topk": {"type": ["integer", "null"], "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output": {
            "type": "object",
            "properties": {
                "dir": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": list(REPORT_FORMATS)}, "minItems": 1},
                "pgm": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "instances": {
            "oneOf": [
                {"const": "all"},
                {
                    "type": "object",
                    "properties": {"indices": {"type": "array", "items": {"type": "integer"}}},
                    "required": ["indices"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"head": {"type": "integer", "minimum": 1}},
                    "required": ["head"],
                    "additionalProperties": False,
                },
            ]
        },
    },
    "required": ["model_path", "data_path", "task", "explainers"],
    "additionalProperties": False,
}

TABULAR_PERTURBATION_KEYS = {
    "faithfulness",
    "faithfulness_sigma_scale",
    "infidelity_scale",
    "sensitivity_scale",
    "n_draws",
    "sufficiency_mode",
    "zero_tol",
}
IMAGE_PERTURBATION_KEYS = {"patch", "perturbation", "sigma", "max_regions"}


@dataclass
class ExplainerSpec:
    id: str
    method: str
    options: dict


@dataclass
class RunConfig:
    model_path: Path
    data_path: Path
    task: str
    explainers: list
    metrics: tuple
    seed: int
    out_dir: Path
    formats: tuple
    modality: str = "tabular"
    background_path: Optional[Path] = None
    background_max: Optional[int] = None
    data_options: dict = field(default_factory=dict)
    output_mode: str = "probability"
    perturbation: dict = field(default_factory=dict)
    topk: Optional[int] = None
    instances: object = "all"
    pgm: bool = False
    jobs: int = 1
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def parse_config(raw: dict, base_dir=".", seed=None, out=None, fmt=None, jobs=None) -> RunConfig:
    """Validate a raw config document and apply CLI overrides.

    Raises ConfigError for schema/identifier problems and IOFailure for
    missing input files.
    """
    try:
        validate_document(raw, CONFIG_SCHEMA)
    except SchemaViolation as exc:
        raise ConfigError(f"config: {exc}") from None
    raw = dict(raw)
    base = Path(base_dir)
    modality = raw.get("modality", "tabular")
    methods = TABULAR_METHODS if modality == "tabular" else IMAGE_METHODS
    metric_names = METRIC_NAMES if modality == "tabular" else IMAGE_METRIC_NAMES

    if seed is not None:
        raw["seed"] = int(seed)
    if "seed" not in raw:
        raise ConfigError("a seed is required (config 'seed' or --seed)")

    explainers, seen = [], set()
    for entry in raw["explainers"]:
        entry = {"method": entry} if isinstance(entry, str) else entry
        method = entry["method"]
        if method not in methods:
            raise ConfigError(f"unknown {modality} explainer {method!r}; valid options: {', '.join(methods)}")
        spec = ExplainerSpec(entry.get("id", method), method, dict(entry.get("options", {})))
        if spec.id in seen:
            raise ConfigError(f"duplicate explainer id {spec.id!r}")
        seen.add(spec.id)
        try:
            _build_explainer(modality, spec, None)
        except ValueError as exc:
            raise ConfigError(f"explainer {spec.id}: {exc}") from None
        explainers.append(spec)

    metrics = raw.get("metrics", list(metric_names))
    bad = [m for m in metrics if m not in metric_names]
    if bad:
        raise ConfigError(f"unknown {modality} metrics {bad}; valid options: {', '.join(metric_names)}")
    if len(set(metrics)) != len(metrics):
        raise ConfigError("metrics listed more than once")
    metrics = tuple(m for m in metric_names if m in set(metrics))

    pert = dict(raw.get("perturbation", {}))
    allowed = TABULAR_PERTURBATION_KEYS if modality == "tabular" else IMAGE_PERTURBATION_KEYS
    extra = set(pert) - allowed
    if extra:
        raise ConfigError(f"unknown perturbation keys {sorted(extra)}; valid: {', '.join(sorted(allowed))}")

    output = raw.get("output", {})
    formats = (fmt,) if fmt else tuple(output.get("formats", ["csv"]))
    if any(f not in REPORT_FORMATS for f in formats):
        raise ConfigError(f"format must be one of {', '.join(REPORT_FORMATS)}")
    out_dir = Path(out) if out else _resolve(base, output.get("dir", "attriq-out"))

    if jobs is None:
        env = os.environ.get("ATTRIQ_JOBS")
        try:
            jobs = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"ATTRIQ_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")

    cfg = RunConfig(
        model_path=_resolve(base, raw["model_path"]),
        data_path=_resolve(base, raw["data_path"]),
        task=raw["task"],
        explainers=explainers,
        metrics=metrics,
        seed=raw["seed"],
        out_dir=out_dir,
        formats=formats,
        modality=modality,
        background_path=_resolve(base, raw["background_path"]) if "background_path" in raw else None,
        background_max=raw.get("background_max"),
        data_options=dict(raw.get("data", {})),
        output_mode=raw.get("output_mode", "probability"),
        perturbation=pert,
        topk=raw.get("topk"),
        instances=raw.get("instances", "all"),
        pgm=bool(output.get("pgm", False)),
        jobs=jobs,
        raw=raw,
    )
    _metric_config(cfg, None)  # surfaces bad perturbation values as config errors
    for p in (cfg.model_path, cfg.data_path, cfg.background_path):
        if p is not None and not p.is_file():
            raise IOFailure(f"file not found: {p}")
    return cfg


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise IOFailure(f"config file not found: {path}")
    try:
        raw = load_json(path)
    except ParseError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return parse_config(raw, path.parent, **overrides)


# --------------------------------------------------------------------------- #
# Loaded run state
# --------------------------------------------------------------------------- #
@dataclass
class Workspace:
    config: RunConfig
    model: object
    data: np.ndarray
    feature_names: tuple
    background: Optional[Background]
    indices: list
    warnings: list


def _build_explainer(modality, spec: ExplainerSpec, ws: Optional[Workspace]):
    if modality == "tabular":
        bg = ws.background if ws else None
        names = ws.feature_names if ws else ()
        return TabularExplainer(spec.method, bg, spec.options, names)
    return ImageExplainer(spec.method, spec.options)


def _subsample(X, k, seed):
    if k is None or k >= X.shape[0]:
        return X
    rows = np.sort(np.random.default_rng(derive_seed(seed, 0, "background")).choice(X.shape[0], k, replace=False))
    return X[rows]


def load_workspace(cfg: RunConfig) -> Workspace:
    warnings = []
    try:
        model = with_output(load_model(cfg.model_path), cfg.output_mode)
    except (OSError, AttriqError) as exc:
        raise IOFailure(f"cannot load model {cfg.model_path}: {exc}") from None
    try:
        if cfg.modality == "tabular":
            opts = cfg.data_options
            ds = load_csv(cfg.data_path, opts.get("has_header", True), opts.get("label_column"), opts.get("allow_missing", False))
            data, names = ds.features, ds.feature_names
            if cfg.background_path is not None:
                bgds = load_csv(cfg.background_path, opts.get("has_header", True), opts.get("label_column"), opts.get("allow_missing", False))
                bg_data = bgds.features
            else:
                bg_data = data
        else:
            data = load_tensor(cfg.data_path).astype(np.float64)
            names, bg_data = (), None
    except (OSError, AttriqError) as exc:
        raise IOFailure(f"cannot load data {cfg.data_path}: {exc}") from None

    want = tuple(model.input_shape)
    if cfg.modality == "tabular":
        if data.ndim != 2 or (data.shape[1],) != want:
            raise IOFailure(f"data has {data.shape[1]} features but the model expects {want[0]}")
    elif data.ndim != 4 or data.shape[1:] != want:
        raise IOFailure(f"image stack shape {data.shape} incompatible with model input {want}")
    background = None
    if bg_data is not None:
        if bg_data.shape[1] != data.shape[1]:
            raise IOFailure("background and data have different column counts")
        background = Background(_subsample(bg_data, cfg.background_max, cfg.seed))

    n = data.shape[0]
    inst = cfg.instances
    if inst == "all":
        indices = list(range(n))
    elif "head" in inst:
        indices = list(range(min(inst["head"], n)))
    else:
        indices = list(inst["indices"])
        for i in indices:
            if not 0 <= i < n:
                raise ConfigError(f"instance index {i} out of range for {n} instances")
    if not indices:
        raise ConfigError("no instances selected")

    n_classes = model.n_classes
    expected = {"binary-classification": n_classes == 2, "multiclass-classification": n_classes > 2, "regression": n_classes == 1}
    if not expected[cfg.task]:
        msg = f"task {cfg.task!r} does not match the model's {n_classes} output(s)"
        log.warning(msg)
        warnings.append(msg)
    return Workspace(cfg, model, data, names, background, indices, warnings)


def _metric_config(cfg: RunConfig, ws: Optional[Workspace]):
    p = cfg.perturbation
    try:
        if cfg.modality == "tabular":
            return MetricConfig(
                metrics=cfg.metrics,
                k=cfg.topk,
                baseline=ws.background.baseline if ws else None,
                feature_std=ws.background.std if ws else None,
                faithfulness_perturbation=p.get("faithfulness", "baseline-replace"),
                faithfulness_sigma_scale=p.get("faithfulness_sigma_scale", 0.1),
                infidelity_scale=p.get("infidelity_scale", 0.1),
                sensitivity_scale=p.get("sensitivity_scale", 0.01),
                n_draws=p.get("n_draws", 64),
                sufficiency_mode=p.get("sufficiency_mode", "baseline"),
                zero_tol=p.get("zero_tol", 1e-12),
                seed=cfg.seed,
                jobs=cfg.jobs,
            )
        rspec = RegionSpec(
            patch=tuple(p.get("patch", (4, 4))),
            perturbation=p.get("perturbation", "black"),
            sigma=p.get("sigma", 0.1),
            max_regions=p.get("max_regions", 256),
            seed=cfg.seed,
        )
        return ImageMetricConfig(metrics=cfg.metrics, rspec=rspec, seed=cfg.seed, jobs=cfg.jobs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"perturbation: {exc}") from None


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def _versions():
    return {"attriq": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _write_manifest(cfg, command, started, extra):
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "versions": _versions(),
        **extra,
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def _emit(cfg, rows, columns, stem: Path):
    for fmt in cfg.formats:
        emit_report(rows, columns, fmt, stem.with_name(f"{stem.name}.{report_extension(fmt)}"))


def cmd_validate(cfg: RunConfig) -> int:
    log.info("config ok: %d explainer(s), %d metric(s)", len(cfg.explainers), len(cfg.metrics))
    return EXIT_OK


def cmd_explain(cfg: RunConfig) -> int:
    started = time.perf_counter()
    ws = load_workspace(cfg)
    failures = []
    for spec in cfg.explainers:
        explainer = _build_explainer(cfg.modality, spec, ws)
        out = cfg.out_dir / "explain" / spec.id
        out.mkdir(parents=True, exist_ok=True)

        def one(i):
            x = ws.data[i]
            c = resolve_class(ws.model, x)
            return explainer(ws.model, x, c, derive_seed(cfg.seed, i, spec.method))

        for i, attr, exc in run_instances(one, ws.indices, cfg.jobs):
            if exc is not None:
                log.error("%s failed on instance %d: %s", spec.id, i, exc)
                failures.append({"explainer": spec.id, "instance": i, "error": f"{type(exc).__name__}: {exc}"})
                continue
            if cfg.modality == "tabular":
                cols = ("idx", "feature", "value", "attribution")
                _emit(cfg, attribution_rows(attr, ws.data[i]), cols, out / f"instance_{i}")
            else:
                save_tensor(attr.values, out / f"instance_{i}.npy")
                if cfg.pgm:
                    save_pgm(attr.values, out / f"instance_{i}.pgm")
    _write_manifest(cfg, "explain", started, {"warnings": ws.warnings, "failures": failures})
    return EXIT_COMPUTE if failures else EXIT_OK


def _evaluate(cfg, ws, spec) -> MetricReport:
    explainer = _build_explainer(cfg.modality, spec, ws)
    mc = _metric_config(cfg, ws)
    if cfg.modality == "tabular":
        return calculate_metrics(ws.model, explainer, ws.data, mc, ws.indices)
    return calculate_image_metrics(ws.model, explainer, ws.data, mc, ws.indices)


def _failure_list(spec, report):
    return [{"explainer": spec.id, "instance": i, "error": e} for i, e in report.errors]


def cmd_evaluate(cfg: RunConfig) -> int:
    started = time.perf_counter()
    ws = load_workspace(cfg)
    failures, excluded = [], {}
    for spec in cfg.explainers:
        report = _evaluate(cfg, ws, spec)
        out = cfg.out_dir / "evaluate" / spec.id
        _emit(cfg, [report.aggregate], report.columns, out / "aggregate")
        _emit(cfg, report.rows, ("idx",) + report.columns, out / "instances")
        excluded[spec.id] = report.excluded
        failures += _failure_list(spec, report)
    _write_manifest(cfg, "evaluate", started, {"warnings": ws.warnings, "excluded": excluded, "failures": failures})
    return EXIT_COMPUTE if failures else EXIT_OK


def cmd_benchmark(cfg: RunConfig) -> int:
    started = time.perf_counter()
    ws = load_workspace(cfg)
    out = cfg.out_dir / "benchmark"
    matrix, cells, failures = [], [], []
    for spec in cfg.explainers:
        report = _evaluate(cfg, ws, spec)
        matrix.append({"explainer": spec.id, **report.aggregate})
        for m in report.columns:
            cells.append(
                {
                    "explainer": spec.id,
                    "metric": m,
                    "value": report.aggregate[m],
                    "n_instances": len(report.rows),
                    "n_undefined": report.excluded[m],
                    "n_errors": len(report.errors),
                }
            )
        _emit(cfg, report.rows, ("idx",) + report.columns, out / f"instances_{spec.id}")
        failures += _failure_list(spec, report)
    columns = ("explainer",) + tuple(cfg.metrics)
    _emit(cfg, matrix, columns, out / "matrix")
    _emit(cfg, cells, ("explainer", "metric", "value", "n_instances", "n_undefined", "n_errors"), out / "cells")
    if failures:
        log.warning("%d (instance, explainer) cell(s) failed; see manifest", len(failures))
    _write_manifest(
        cfg,
        "benchmark",
        started,
        {"warnings": ws.warnings, "had_errors": bool(failures), "failures": failures},
    )
    return EXIT_OK


COMMANDS = {
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "validate": cmd_validate,
}
