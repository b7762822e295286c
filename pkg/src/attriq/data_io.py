"""Readers and writers for every on-disk format attriq touches.

* CSV feature tables (RFC-4180 quoting, UTF-8)
* tensors in the NPY v1.0 subset (``<f4``/``<f8``, C order)
* JSON model documents (``schema_version`` 1; layout in ``docs/formats.md``)
* csv / json / markdown report tables and PGM previews of attribution maps
"""
from __future__ import annotations

import ast
import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .errors import (
    BadMagic,
    FortranOrderUnsupported,
    NonNumericCell,
    ParseError,
    RaggedRow,
    SchemaViolation,
    UnsupportedDtype,
)
from .models import (
    Conv2D,
    Dense,
    Flatten,
    LinearModel,
    MaxPool,
    ReLU,
    SequentialNet,
    Softmax,
    Tree,
    TreeEnsemble,
)

SCHEMA_VERSION = 1


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TabularDataset:
    features: np.ndarray
    feature_names: tuple
    labels: Optional[np.ndarray] = None
    label_name: Optional[str] = None

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def _number(cell, line, column):
    text = cell.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise NonNumericCell(f"non-numeric cell {cell!r}", line, column) from None


def load_csv(path, has_header=True, label_column=None, allow_missing=False) -> TabularDataset:
    """Parse a numeric CSV table.

    ``label_column`` (name, or index when there is no header) is split off as
    integer labels. Empty cells are rejected unless ``allow_missing`` is set,
    in which case they are imputed with the column mean.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            records = [(reader.line_num, row) for row in reader if row]
        except csv.Error as exc:
            raise ParseError(str(exc), reader.line_num) from None
    if not records:
        raise ParseError("empty file", 1)
    if has_header:
        header = [h.strip() for h in records[0][1]]
        records = records[1:]
    else:
        header = [f"x{i}" for i in range(len(records[0][1]))]
    width = len(header)
    label_idx = None
    if label_column is not None:
        if isinstance(label_column, str) and label_column in header:
            label_idx = header.index(label_column)
        elif isinstance(label_column, int) and 0 <= label_column < width:
            label_idx = label_column
        else:
            raise ParseError(f"label column {label_column!r} not found")
    data = np.empty((len(records), width))
    for r, (line, row) in enumerate(records):
        if len(row) != width:
            raise RaggedRow(f"expected {width} cells, found {len(row)}", line)
        for c, cell in enumerate(row):
            data[r, c] = _number(cell, line, c + 1)
    labels = None
    if label_idx is not None:
        col = data[:, label_idx]
        if np.isnan(col).any() or np.any(col != np.round(col)):
            bad = int(np.flatnonzero(np.isnan(col) | (col != np.round(col)))[0])
            raise NonNumericCell("label must be an integer", records[bad][0], label_idx + 1)
        labels = col.astype(np.int64)
        data = np.delete(data, label_idx, axis=1)
        label_name = header.pop(label_idx)
    else:
        label_name = None
    missing = np.isnan(data)
    if missing.any():
        if not allow_missing:
            r, c = np.argwhere(missing)[0]
            raise ParseError("missing value (enable allow_missing to impute)", records[r][0], int(c) + 1)
        means = np.nanmean(data, axis=0)
        if np.isnan(means).any():
            raise ParseError("column has no values to impute from")
        data = np.where(missing, means[None, :], data)
    data.setflags(write=False)
    return TabularDataset(data, tuple(header), labels, label_name)


# --------------------------------------------------------------------------- #
# NPY subset
# --------------------------------------------------------------------------- #
NPY_MAGIC = b"\x93NUMPY"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _npy_header(dtype: str, shape) -> bytes:
    shape_txt = "(" + "".join(f"{d}, " for d in shape)[:-2] + ("," if len(shape) == 1 else "") + ")"
    if not shape:
        shape_txt = "()"
    text = f"{{'descr': '{dtype}', 'fortran_order': False, 'shape': {shape_txt}, }}"
    total = len(NPY_MAGIC) + 2 + 2 + len(text) + 1
    pad = (-total) % 64
    return (text + " " * pad + "\n").encode("latin1")


def save_tensor(tensor, path) -> None:
    """Write a float32/float64 array as NPY v1.0 (little endian, C order)."""
    arr = np.asarray(tensor)
    if arr.dtype == np.float32:
        descr = "<f4"
    elif arr.dtype == np.float64:
        descr = "<f8"
    else:
        raise UnsupportedDtype(f"only float32/float64 tensors are supported, got {arr.dtype}")
    header = _npy_header(descr, arr.shape)
    with open(path, "wb") as fh:
        fh.write(NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header)
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[descr]).tobytes())


def load_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:6] != NPY_MAGIC:
        raise BadMagic(f"{path}: not an NPY file")
    if blob[6:8] != b"\x01\x00":
        raise BadMagic(f"{path}: unsupported NPY version {blob[6]}.{blob[7]}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    try:
        header = ast.literal_eval(blob[10 : 10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError):
        raise BadMagic(f"{path}: malformed NPY header") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise BadMagic(f"{path}: malformed NPY header")
    descr = header["descr"]
    if descr not in _DTYPES:
        raise UnsupportedDtype(f"{path}: unsupported dtype {descr!r} (need '<f4' or '<f8')")
    if header["fortran_order"]:
        raise FortranOrderUnsupported(f"{path}: Fortran-ordered arrays are not supported")
    shape = tuple(header["shape"])
    dtype = _DTYPES[descr]
    count = int(np.prod(shape))
    data = blob[10 + hlen :]
    if len(data) != count * dtype.itemsize:
        raise ParseError(f"{path}: expected {count * dtype.itemsize} data bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_pgm(values, path) -> None:
    """8-bit binary PGM render of a 2-D map, min-max scaled."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


# --------------------------------------------------------------------------- #
# Model documents
# --------------------------------------------------------------------------- #
_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}
_MAT = {"type": "array", "items": _VEC}
_NESTED = {"type": "array", "items": {"anyOf": [_NUM, {"$ref": "#/$defs/nested"}]}}
_INT = {"type": "integer"}


def _layer(kind, props=None, required=()):
    props = dict(props or {})
    props["type"] = {"const": kind}
    return {
        "type": "object",
        "properties": props,
        "required": ["type", *required],
        "additionalProperties": False,
    }


MODEL_SCHEMA = {
    "$defs": {"nested": _NESTED},
    "type": "object",
    "required": ["schema_version", "family"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "family": {"enum": ["linear", "tree-ensemble", "sequential-net"]},
    },
    "allOf": [
        {
            "if": {"properties": {"family": {"const": "linear"}}, "required": ["family"]},
            "then": {
                "properties": {
                    "schema_version": {},
                    "family": {},
                    "weights": _MAT,
                    "bias": _VEC,
                    "link": {"enum": ["identity", "softmax"]},
                },
                "required": ["weights", "bias"],
                "additionalProperties": False,
            },
        },
        {
            "if": {"properties": {"family": {"const": "tree-ensemble"}}, "required": ["family"]},
            "then": {
                "properties": {
                    "schema_version": {},
                    "family": {},
                    "n_features": {"type": "integer", "minimum": 1},
                    "n_classes": {"type": "integer", "minimum": 1},
                    "aggregation": {"enum": ["mean", "sum"]},
                    "trees": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "properties": {
                                "nodes": {
                                    "type": "array",
                                    "minItems": 1,
                                    "items": {
                                        "oneOf": [
                                            {
                                                "type": "object",
                                                "properties": {
                                                    "feature": {"type": "integer", "minimum": 0},
                                                    "threshold": _NUM,
                                                    "left": _INT,
                                                    "right": _INT,
                                                },
                                                "required": ["feature", "threshold", "left", "right"],
                                                "additionalProperties": False,
                                            },
                                            {
                                                "type": "object",
                                                "properties": {"value": _VEC},
                                                "required": ["value"],
                                                "additionalProperties": False,
                                            },
                                        ]
                                    },
                                }
                            },
                            "required": ["nodes"],
                            "additionalProperties": False,
                        },
                    },
                },
                "required": ["n_features", "n_classes", "aggregation", "trees"],
                "additionalProperties": False,
            },
        },
        {
            "if": {"properties": {"family": {"const": "sequential-net"}}, "required": ["family"]},
            "then": {
                "properties": {
                    "schema_version": {},
                    "family": {},
                    "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                    "layers": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "oneOf": [
                                _layer("dense", {"weights": _MAT, "bias": _VEC}, ("weights", "bias")),
                                _layer(
                                    "conv2d",
                                    {
                                        "kernels": _NESTED,
                                        "bias": _VEC,
                                        "stride": {"type": "integer", "minimum": 1},
                                        "padding": {"type": "integer", "minimum": 0},
                                    },
                                    ("kernels", "bias", "stride", "padding"),
                                ),
                                _layer("relu"),
                                _layer(
                                    "maxpool",
                                    {"size": {"type": "integer", "minimum": 1}, "stride": {"type": "integer", "minimum": 1}},
                                    ("size", "stride"),
                                ),
                                _layer("flatten"),
                                _layer("softmax"),
                            ]
                        },
                    },
                },
                "required": ["input_shape", "layers"],
                "additionalProperties": False,
            },
        },
    ],
}


def _path(parts) -> str:
    return "/".join(str(p) for p in parts)


def _closest(err):
    """Descend through oneOf/anyOf failures into the branch that came closest."""
    while err.context:
        branches = {}
        for sub in err.context:
            branches.setdefault(sub.relative_schema_path[0], []).append(sub)

        def score(subs):
            tag_miss = any(s.validator == "const" and s.path and s.path[-1] == "type" for s in subs)
            return (tag_miss, len(subs))

        subs = min(branches.values(), key=score)
        err = max(subs, key=lambda e: len(e.absolute_path))
    return err


def validate_document(doc, schema) -> None:
    """Raise :class:`SchemaViolation` naming the deepest offending field."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (-len(e.absolute_path), _path(e.absolute_path)))
    if errors:
        best = _closest(errors[0])
        raise SchemaViolation(best.message, _path(best.absolute_path))


def model_from_document(doc):
    validate_document(doc, MODEL_SCHEMA)
    family = doc["family"]
    if family == "linear":
        return LinearModel(doc["weights"], doc["bias"], doc.get("link", "identity"))
    if family == "tree-ensemble":
        n_classes = doc["n_classes"]
        trees = []
        for t, tree in enumerate(doc["trees"]):
            nodes = tree["nodes"]
            feat, thr, left, right, val = [], [], [], [], []
            for k, node in enumerate(nodes):
                if "value" in node:
                    if len(node["value"]) != n_classes:
                        raise SchemaViolation(
                            f"leaf has {len(node['value'])} values, expected {n_classes}",
                            f"trees/{t}/nodes/{k}/value",
                        )
                    feat.append(-1)
                    thr.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    val.append(node["value"])
                else:
                    feat.append(node["feature"])
                    thr.append(node["threshold"])
                    left.append(node["left"])
                    right.append(node["right"])
                    val.append([0.0] * n_classes)
            try:
                trees.append(Tree(feat, thr, left, right, val))
            except SchemaViolation as exc:
                raise SchemaViolation(str(exc).split(": ", 1)[-1], f"trees/{t}/{exc.path}".rstrip("/")) from None
        return TreeEnsemble(tuple(trees), doc["n_features"], n_classes, doc["aggregation"])
    layers = []
    for k, spec in enumerate(doc["layers"]):
        kind = spec["type"]
        try:
            if kind == "dense":
                layers.append(Dense(spec["weights"], spec["bias"]))
            elif kind == "conv2d":
                kernels = np.asarray(spec["kernels"], dtype=np.float64)
                layers.append(Conv2D(kernels, spec["bias"], spec["stride"], spec["padding"]))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool":
                layers.append(MaxPool(spec["size"], spec["stride"]))
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                layers.append(Softmax())
        except (SchemaViolation, ValueError) as exc:
            raise SchemaViolation(str(exc), f"layers/{k}") from None
    return SequentialNet(tuple(layers), tuple(doc["input_shape"]))


def model_to_document(model) -> dict:
    if isinstance(model, LinearModel):
        return {
            "schema_version": SCHEMA_VERSION,
            "family": "linear",
            "link": model.link,
            "weights": model.weights.tolist(),
            "bias": model.bias.tolist(),
        }
    if isinstance(model, TreeEnsemble):
        trees = []
        for tree in model.trees:
            nodes = []
            for k in range(tree.feature.shape[0]):
                if tree.feature[k] < 0:
                    nodes.append({"value": tree.value[k].tolist()})
                else:
                    nodes.append(
                        {
                            "feature": int(tree.feature[k]),
                            "threshold": float(tree.threshold[k]),
                            "left": int(tree.left[k]),
                            "right": int(tree.right[k]),
                        }
                    )
            trees.append({"nodes": nodes})
        return {
            "schema_version": SCHEMA_VERSION,
            "family": "tree-ensemble",
            "n_features": model.n_features,
            "n_classes": model.n_classes,
            "aggregation": model.aggregation,
            "trees": trees,
        }
    if isinstance(model, SequentialNet):
        layers = []
        for layer in model.layers:
            if isinstance(layer, Dense):
                layers.append({"type": "dense", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()})
            elif isinstance(layer, Conv2D):
                layers.append(
                    {
                        "type": "conv2d",
                        "kernels": layer.kernels.tolist(),
                        "bias": layer.bias.tolist(),
                        "stride": layer.stride,
                        "padding": layer.padding,
                    }
                )
            elif isinstance(layer, MaxPool):
                layers.append({"type": "maxpool", "size": layer.size, "stride": layer.stride})
            else:
                layers.append({"type": {ReLU: "relu", Flatten: "flatten", Softmax: "softmax"}[type(layer)]})
        return {
            "schema_version": SCHEMA_VERSION,
            "family": "sequential-net",
            "input_shape": list(model.input_shape),
            "layers": layers,
        }
    raise TypeError(f"cannot serialise {type(model).__name__}")


def dumps_document(doc) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None


def load_model(path):
    return model_from_document(load_json(path))


def save_model(model, path) -> None:
    Path(path).write_text(dumps_document(model_to_document(model)), encoding="utf-8")


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #
REPORT_FORMATS = ("csv", "json", "markdown")
_EXT = {"csv": "csv", "json": "json", "markdown": "md"}


def report_extension(fmt: str) -> str:
    return _EXT[fmt]


def format_cell(v) -> str:
    if isinstance(v, float):
        return "undefined" if math.isnan(v) else repr(v)
    return str(v)


def _json_cell(v):
    if isinstance(v, float) and math.isnan(v):
        return "undefined"
    if isinstance(v, np.generic):
        return v.item()
    return v


def render_report(rows: Sequence[dict], columns: Sequence[str], fmt: str = "csv") -> str:
    """Render rows with a fixed column order; NaN is written as ``undefined``."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_cell(r.get(c, "")) for c in columns])
        return buf.getvalue()
    if fmt == "json":
        body = [{c: _json_cell(r.get(c)) for c in columns} for r in rows]
        return json.dumps({"columns": list(columns), "rows": body}, indent=1) + "\n"
    if fmt == "markdown":
        cells = [list(columns)] + [[format_cell(r.get(c, "")) for c in columns] for r in rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
        line = lambda row: "| " + " | ".join(v.ljust(wd) for v, wd in zip(row, widths)) + " |"
        out = [line(cells[0]), "| " + " | ".join("-" * wd for wd in widths) + " |"]
        out += [line(row) for row in cells[1:]]
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; valid: {', '.join(REPORT_FORMATS)}")


def emit_report(rows, columns, fmt, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(rows, columns, fmt), encoding="utf-8")
    return path
