import copy
import json
import struct

import numpy as np
import pytest

from attriq.data_io import (
    emit_report,
    load_csv,
    load_json,
    load_model,
    load_tensor,
    model_from_document,
    model_to_document,
    render_report,
    save_model,
    save_pgm,
    save_tensor,
)
from attriq.errors import (
    BadMagic,
    FortranOrderUnsupported,
    NonNumericCell,
    ParseError,
    RaggedRow,
    SchemaViolation,
    UnsupportedDtype,
)
from attriq.metrics_tabular import METRIC_NAMES
from attriq.models import LinearModel, predict_batch
from oracles import random_cnn, random_forest, random_mlp


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# CSV
def test_csv_basic(tmp_path):
    ds = load_csv(write(tmp_path, "a.csv", "a,b\n1,2\n3,4\n"))
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4]])
    assert ds.feature_names == ("a", "b")


def test_csv_scientific(tmp_path):
    assert load_csv(write(tmp_path, "a.csv", "a\n1e-3\n")).features[0, 0] == 0.001


def test_csv_ragged_row_has_line(tmp_path):
    with pytest.raises(RaggedRow) as err:
        load_csv(write(tmp_path, "a.csv", "a,b\n1,2\n3\n"))
    assert err.value.line == 3


def test_csv_non_numeric_located(tmp_path):
    with pytest.raises(NonNumericCell) as err:
        load_csv(write(tmp_path, "a.csv", "a,b\n1,2\n3,x\n"))
    assert (err.value.line, err.value.column) == (3, 2)


def test_csv_quoting_and_labels(tmp_path):
    ds = load_csv(write(tmp_path, "a.csv", '"first, name",y\n"1.5",0\n2.5,1\n'), label_column="y")
    assert ds.feature_names == ("first, name",)
    assert ds.labels.tolist() == [0, 1]
    assert ds.label_name == "y"


def test_csv_missing_values(tmp_path):
    p = write(tmp_path, "a.csv", "a,b\n1,\n3,4\n5,6\n")
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert err.value.line == 2
    ds = load_csv(p, allow_missing=True)
    assert ds.features[0, 1] == 5.0


def test_csv_no_header(tmp_path):
    ds = load_csv(write(tmp_path, "a.csv", "1,2\n3,4\n"), has_header=False, label_column=1)
    assert ds.features.tolist() == [[1], [3]] and ds.labels.tolist() == [2, 4]


# NPY
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (5,), (2, 3), (4, 1, 8, 8)])
def test_npy_round_trip(dtype, shape, rng, tmp_path):
    arr = rng.normal(size=shape).astype(dtype)
    p = tmp_path / "t.npy"
    save_tensor(arr, p)
    back = load_tensor(p)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    # numpy's own reader agrees and the header is 64-byte aligned
    np.testing.assert_array_equal(np.load(p), arr)
    (hlen,) = struct.unpack("<H", p.read_bytes()[8:10])
    assert (10 + hlen) % 64 == 0


def test_npy_reads_numpy_written_files(rng, tmp_path):
    arr = rng.normal(size=(3, 4))
    np.save(tmp_path / "n.npy", arr)
    np.testing.assert_array_equal(load_tensor(tmp_path / "n.npy"), arr)


def test_npy_bad_magic(tmp_path):
    p = tmp_path / "t.npy"
    save_tensor(np.zeros(3), p)
    p.write_bytes(b"\x94" + p.read_bytes()[1:])
    with pytest.raises(BadMagic):
        load_tensor(p)


def test_npy_unsupported_dtype(tmp_path):
    np.save(tmp_path / "i.npy", np.arange(3, dtype="<i8"))
    with pytest.raises(UnsupportedDtype):
        load_tensor(tmp_path / "i.npy")
    with pytest.raises(UnsupportedDtype):
        save_tensor(np.arange(3), tmp_path / "j.npy")


def test_npy_fortran_order(tmp_path):
    np.save(tmp_path / "f.npy", np.asfortranarray(np.ones((2, 3))))
    with pytest.raises(FortranOrderUnsupported):
        load_tensor(tmp_path / "f.npy")


def test_npy_save_load_save_byte_stable(rng, tmp_path):
    save_tensor(rng.normal(size=(2, 2)), tmp_path / "a.npy")
    save_tensor(load_tensor(tmp_path / "a.npy"), tmp_path / "b.npy")
    assert (tmp_path / "a.npy").read_bytes() == (tmp_path / "b.npy").read_bytes()


def test_pgm(tmp_path):
    save_pgm(np.array([[0.0, 1.0], [0.5, 1.0]]), tmp_path / "m.pgm")
    assert (tmp_path / "m.pgm").read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 255])


# model documents
def models(rng):
    return {
        "linear": (LinearModel(rng.normal(size=(3, 4)), rng.normal(size=3), "softmax"), (4,)),
        "forest": (random_forest(rng, 4, n_classes=3, n_trees=5, aggregation="sum"), (4,)),
        "mlp": (random_mlp(rng, 4), (4,)),
        "cnn": (random_cnn(rng), (1, 8, 8)),
    }


@pytest.mark.parametrize("family", ["linear", "forest", "mlp", "cnn"])
def test_model_round_trip(family, rng, tmp_path):
    model, shape = models(rng)[family]
    X = rng.normal(size=(100,) + shape)
    save_model(model, tmp_path / "a.json")
    back = load_model(tmp_path / "a.json")
    assert predict_batch(back, X).tobytes() == predict_batch(model, X).tobytes()
    save_model(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_tree_cycle_rejected(rng):
    doc = model_to_document(random_forest(rng, 3, depth=2))
    nodes = doc["trees"][0]["nodes"]
    split = next(i for i, n in enumerate(nodes) if "feature" in n)
    nodes[split]["left"] = split
    with pytest.raises(SchemaViolation):
        model_from_document(doc)


def test_missing_schema_version_rejected(rng):
    doc = model_to_document(LinearModel([1.0, 2.0], 0.0))
    del doc["schema_version"]
    with pytest.raises(SchemaViolation) as err:
        model_from_document(doc)
    assert "schema_version" in str(err.value)


def test_schema_errors_name_the_field(rng):
    doc = model_to_document(random_cnn(rng))
    bad = copy.deepcopy(doc)
    bad["layers"][0]["stride"] = "x"
    with pytest.raises(SchemaViolation) as err:
        model_from_document(bad)
    assert "layers/0/stride" in str(err.value)
    bad = copy.deepcopy(doc)
    bad["extra"] = 1
    with pytest.raises(SchemaViolation):
        model_from_document(bad)
    bad = copy.deepcopy(doc)
    del bad["family"]
    with pytest.raises(SchemaViolation):
        model_from_document(bad)


def test_invalid_json_is_located(tmp_path):
    with pytest.raises(ParseError) as err:
        load_json(write(tmp_path, "m.json", '{\n "a": ,\n}'))
    assert err.value.line == 2


# reports
def test_metric_report_header_exact():
    text = render_report([], METRIC_NAMES, "csv")
    assert text == "faithfulness,infidelity,sensitivity,comprehensiveness,sufficiency,monotonicity,complexity,sparseness\n"


def test_report_formats(tmp_path):
    rows = [{"idx": 2, "feature": "p", "value": 1.4, "attribution": float("nan")}]
    cols = ["idx", "feature", "value", "attribution"]
    assert render_report(rows, cols, "csv").splitlines()[1] == "2,p,1.4,undefined"
    js = json.loads(render_report(rows, cols, "json"))
    assert js["columns"] == cols and js["rows"][0]["attribution"] == "undefined"
    md = render_report(rows, cols, "markdown").splitlines()
    assert md[0].startswith("| idx") and set(md[1]) <= set("|- ")
    assert len({len(line) for line in md}) == 1
    p = emit_report([], cols, "markdown", tmp_path / "sub" / "r.md")
    assert p.read_text().count("\n") == 2
    with pytest.raises(ValueError):
        render_report(rows, cols, "xml")
