"""Regenerate the shipped fixtures in src/attriq/fixtures/.

Needs scikit-learn (build-time only; attriq itself does not import it).

    python tools/make_fixtures.py
"""
import csv
import json
from pathlib import Path

import numpy as np
from sklearn.datasets import load_iris
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression

from attriq.data_io import save_model, save_tensor
from attriq.models import Conv2D, Dense, Flatten, LinearModel, MaxPool, ReLU, SequentialNet, Softmax, Tree, TreeEnsemble

OUT = Path(__file__).resolve().parents[1] / "src" / "attriq" / "fixtures"


def forest_to_ensemble(forest, n_features, n_classes):
    trees = []
    for est in forest.estimators_:
        t = est.tree_
        leaf = t.children_left < 0
        value = t.value[:, 0, :]
        value = value / value.sum(axis=1, keepdims=True)
        trees.append(
            Tree(
                feature=np.where(leaf, -1, t.feature),
                threshold=np.where(leaf, 0.0, t.threshold),
                left=t.children_left,
                right=t.children_right,
                value=np.where(leaf[:, None], value, 0.0),
            )
        )
    return TreeEnsemble(tuple(trees), n_features, n_classes, "mean")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    iris = load_iris()
    names = [n.replace(" ", "_") for n in iris.feature_names]
    with open(OUT / "iris.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["species"])
        for row, y in zip(iris.data, iris.target):
            w.writerow([repr(float(v)) for v in row] + [int(y)])

    X, y = iris.data, iris.target
    lr = LogisticRegression(max_iter=2000).fit(X, y)
    save_model(LinearModel(lr.coef_, lr.intercept_, "softmax"), OUT / "iris_linear.json")

    rf = RandomForestClassifier(n_estimators=10, max_depth=3, random_state=0).fit(X, y)
    save_model(forest_to_ensemble(rf, 4, 3), OUT / "iris_forest.json")

    rng = np.random.default_rng(7)
    net = SequentialNet(
        (
            Conv2D(rng.normal(0, 0.5, (4, 1, 3, 3)), rng.normal(0, 0.1, 4), 1, 1),
            ReLU(),
            MaxPool(2, 2),
            Flatten(),
            Dense(rng.normal(0, 0.3, (3, 64)), rng.normal(0, 0.1, 3)),
            Softmax(),
        ),
        (1, 8, 8),
    )
    save_model(net, OUT / "cnn8.json")
    images = rng.uniform(0, 1, (4, 1, 8, 8))
    save_tensor(images, OUT / "images8.npy")

    base = {"schema_version": 1, "seed": 0}
    configs = {
        "iris_linear.json": {
            **base,
            "model_path": "iris_linear.json",
            "data_path": "iris.csv",
            "data": {"label_column": "species"},
            "task": "multiclass-classification",
            "explainers": ["exact_shapley"],
            "instances": {"head": 3},
        },
        "iris_forest.json": {
            **base,
            "model_path": "iris_forest.json",
            "data_path": "iris.csv",
            "data": {"label_column": "species"},
            "task": "multiclass-classification",
            "explainers": ["exact_shapley", {"method": "kernel_shap", "options": {"n_coalitions": 14}}],
            "instances": {"head": 5},
        },
        "image_cnn8.json": {
            **base,
            "modality": "image",
            "model_path": "cnn8.json",
            "data_path": "images8.npy",
            "task": "multiclass-classification",
            "explainers": ["saliency", "grad_cam", {"method": "occlusion", "options": {"patch_size": 2, "stride": 2}}],
            "perturbation": {"patch": [2, 2], "max_regions": 16},
            "output": {"pgm": True},
        },
    }
    for name, cfg in configs.items():
        (OUT / f"run_{name}").write_text(json.dumps(cfg, indent=1) + "\n")


if __name__ == "__main__":
    main()
