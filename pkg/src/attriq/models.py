"""Native model families: evaluation and reverse-mode differentiation.

Three families are supported: ``LinearModel`` (affine map with optional softmax
link), ``TreeEnsemble`` (axis-aligned binary trees, ``x[f] <= t`` goes left)
and ``SequentialNet`` (a small feed-forward stack of dense/conv/relu/maxpool/
flatten/softmax layers). All of them are immutable once built.

Every model exposes a batched ``forward(X) -> (N, n_classes)`` used by the
attribution and metric code; the single-instance functions at the bottom of
this module (``predict``, ``target_score``, ``input_gradient`` ...) are thin
wrappers that validate the input and route a batch of one through the same
code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .errors import (
    ClassOutOfRange,
    LayerNotConvolutional,
    NonFiniteInput,
    NotDifferentiable,
    SchemaViolation,
    ShapeMismatch,
)


def _frozen(a, ndim=None, name="array"):
    arr = np.array(a, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise SchemaViolation(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaViolation(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_backward(s, g):
    return s * (g - np.sum(g * s, axis=1, keepdims=True))


# --------------------------------------------------------------------------- #
# Linear
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class LinearModel:
    """``scores = link(W x + b)``; one weight row per class.

    A 1-D ``weights`` vector is read as a single-output (regression) model.
    """

    weights: np.ndarray
    bias: np.ndarray
    link: str = "identity"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim == 1:
            w = w[None, :]
        w = _frozen(w, 2, "weights")
        b = _frozen(np.atleast_1d(np.asarray(self.bias, dtype=np.float64)), 1, "bias")
        if b.shape[0] != w.shape[0]:
            raise SchemaViolation(
                f"bias has {b.shape[0]} entries but weights have {w.shape[0]} rows"
            )
        if self.link not in ("identity", "softmax"):
            raise SchemaViolation(f"unknown link {self.link!r}")
        if self.link == "softmax" and w.shape[0] < 2:
            raise SchemaViolation("softmax link needs at least two classes")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def input_shape(self) -> tuple:
        return (self.n_features,)

    differentiable = True

    def forward(self, X):
        z = X @ self.weights.T + self.bias
        return _softmax(z) if self.link == "softmax" else z

    def gradient(self, X, class_idx):
        if self.link == "identity":
            return np.broadcast_to(self.weights[class_idx], X.shape).copy()
        s = self.forward(X)
        seed = np.zeros_like(s)
        seed[:, class_idx] = 1.0
        return _softmax_backward(s, seed) @ self.weights

    def as_logits(self):
        return replace(self, link="identity")


# --------------------------------------------------------------------------- #
# Tree ensemble
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree. Node 0 is the root; ``feature[k] < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes); only leaf rows are read
    depth: int = field(init=False)

    def __post_init__(self):
        feat = np.array(self.feature, dtype=np.int64)
        left = np.array(self.left, dtype=np.int64)
        right = np.array(self.right, dtype=np.int64)
        thr = _frozen(self.threshold, 1, "threshold")
        val = np.array(self.value, dtype=np.float64)
        if val.ndim == 1:
            val = val[:, None]
        val = _frozen(val, 2, "value")
        n = feat.shape[0]
        if not (thr.shape[0] == left.shape[0] == right.shape[0] == val.shape[0] == n) or n == 0:
            raise SchemaViolation("tree arrays must be non-empty and of equal length")
        depth = _check_tree(feat, left, right)
        for a in (feat, left, right):
            a.setflags(write=False)
        object.__setattr__(self, "feature", feat)
        object.__setattr__(self, "threshold", thr)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "value", val)
        object.__setattr__(self, "depth", depth)

    def apply(self, X):
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            child = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, child, node)
        return node

    def predict_one(self, x):
        k = 0
        while self.feature[k] >= 0:
            k = self.left[k] if x[self.feature[k]] <= self.threshold[k] else self.right[k]
        return self.value[k]


def _check_tree(feature, left, right):
    """Validate reachability/acyclicity from the root and return the max depth."""
    n = feature.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [(0, 0)]
    max_depth = 0
    while stack:
        k, d = stack.pop()
        if seen[k]:
            raise SchemaViolation(f"node {k} is reachable twice (cycle or shared child)", f"nodes/{k}")
        seen[k] = True
        max_depth = max(max_depth, d)
        if feature[k] >= 0:
            for side, c in (("left", left[k]), ("right", right[k])):
                if not 0 <= c < n:
                    raise SchemaViolation(f"child index {c} out of range", f"nodes/{k}/{side}")
                stack.append((int(c), d + 1))
    return max_depth


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple
    n_features: int
    n_classes: int
    aggregation: str = "mean"

    differentiable = False

    def __post_init__(self):
        trees = tuple(self.trees)
        if not trees:
            raise SchemaViolation("ensemble has no trees", "trees")
        if self.aggregation not in ("mean", "sum"):
            raise SchemaViolation(f"unknown aggregation {self.aggregation!r}", "aggregation")
        for t, tree in enumerate(trees):
            if tree.value.shape[1] != self.n_classes:
                raise SchemaViolation(
                    f"leaf values have {tree.value.shape[1]} classes, expected {self.n_classes}",
                    f"trees/{t}",
                )
            bad = tree.feature >= self.n_features
            if bad.any():
                k = int(np.argmax(bad))
                raise SchemaViolation(
                    f"feature index {tree.feature[k]} >= n_features {self.n_features}",
                    f"trees/{t}/nodes/{k}/feature",
                )
        object.__setattr__(self, "trees", trees)

    @property
    def input_shape(self) -> tuple:
        return (self.n_features,)

    def forward(self, X):
        out = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            out += tree.value[tree.apply(X)]
        if self.aggregation == "mean":
            out /= len(self.trees)
        return out

    def gradient(self, X, class_idx):
        raise NotDifferentiable("tree ensembles have no input gradient")

    def as_logits(self):
        return self


# --------------------------------------------------------------------------- #
# Sequential network layers
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights, 2, "dense weights"))
        object.__setattr__(self, "bias", _frozen(self.bias, 1, "dense bias"))
        if self.bias.shape[0] != self.weights.shape[0]:
            raise SchemaViolation("dense bias length must equal output size")

    def output_shape(self, shape):
        if shape != (self.weights.shape[1],):
            raise SchemaViolation(f"dense layer expects input {(self.weights.shape[1],)}, got {shape}")
        return (self.weights.shape[0],)

    def forward(self, X):
        return X @ self.weights.T + self.bias, None

    def backward(self, g, X, cache):
        return g @ self.weights


@dataclass(frozen=True)
class Conv2D:
    kernels: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernels", _frozen(self.kernels, 4, "conv kernels"))
        object.__setattr__(self, "bias", _frozen(self.bias, 1, "conv bias"))
        if self.bias.shape[0] != self.kernels.shape[0]:
            raise SchemaViolation("conv bias length must equal the number of kernels")
        if self.stride < 1 or self.padding < 0:
            raise SchemaViolation("conv stride must be >= 1 and padding >= 0")

    def output_shape(self, shape):
        o, c, kh, kw = self.kernels.shape
        if len(shape) != 3 or shape[0] != c:
            raise SchemaViolation(f"conv2d expects ({c}, H, W) input, got {shape}")
        h = (shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise SchemaViolation(f"conv2d kernel larger than padded input {shape}")
        return (o, h, w)

    def _pad(self, X):
        p = self.padding
        return np.pad(X, ((0, 0), (0, 0), (p, p), (p, p))) if p else X

    def forward(self, X):
        _, _, kh, kw = self.kernels.shape
        s = self.stride
        Xp = self._pad(X)
        win = np.lib.stride_tricks.sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        Y = np.einsum("nchwij,ocij->nohw", win, self.kernels, optimize=True)
        return Y + self.bias[None, :, None, None], Xp.shape

    def backward(self, g, X, padded_shape):
        _, _, kh, kw = self.kernels.shape
        s, p = self.stride, self.padding
        ho, wo = g.shape[2], g.shape[3]
        dXp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                dXp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += np.einsum(
                    "nohw,oc->nchw", g, self.kernels[:, :, i, j]
                )
        if p:
            dXp = dXp[:, :, p:-p, p:-p]
        return dXp


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, shape):
        return shape

    def forward(self, X):
        return np.maximum(X, 0.0), None

    def backward(self, g, X, cache):
        # subgradient 0 at exactly 0
        return g * (X > 0)


@dataclass(frozen=True)
class MaxPool:
    size: int
    stride: int

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise SchemaViolation("maxpool size and stride must be >= 1")

    def output_shape(self, shape):
        if len(shape) != 3:
            raise SchemaViolation(f"maxpool expects (C, H, W) input, got {shape}")
        h = (shape[1] - self.size) // self.stride + 1
        w = (shape[2] - self.size) // self.stride + 1
        if h < 1 or w < 1:
            raise SchemaViolation(f"maxpool window larger than input {shape}")
        return (shape[0], h, w)

    def _windows(self, X):
        k, s = self.size, self.stride
        win = np.lib.stride_tricks.sliding_window_view(X, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(win.shape[:4] + (k * k,))

    def forward(self, X):
        win = self._windows(X)
        # np.argmax returns the first row-major maximum: ties route to it
        arg = np.argmax(win, axis=-1)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg

    def backward(self, g, X, arg):
        k, s = self.size, self.stride
        ho, wo = g.shape[2], g.shape[3]
        dX = np.zeros_like(X)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dX[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += g * (arg == idx)
        return dX


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, X):
        return X.reshape(X.shape[0], -1), X.shape

    def backward(self, g, X, shape):
        return g.reshape(shape)


@dataclass(frozen=True)
class Softmax:
    def output_shape(self, shape):
        if len(shape) != 1:
            raise SchemaViolation("softmax expects a flat input")
        return shape

    def forward(self, X):
        return _softmax(X), None

    def backward(self, g, X, cache, Y=None):
        return _softmax_backward(Y, g)


Layer = Union[Dense, Conv2D, ReLU, MaxPool, Flatten, Softmax]


@dataclass(frozen=True)
class SequentialNet:
    layers: tuple
    input_shape: tuple
    shapes: tuple = field(init=False, repr=False)  # output shape of every layer

    differentiable = True

    def __post_init__(self):
        layers = tuple(self.layers)
        in_shape = tuple(int(d) for d in self.input_shape)
        if not layers:
            raise SchemaViolation("network has no layers", "layers")
        shapes = []
        shape = in_shape
        for k, layer in enumerate(layers):
            if isinstance(layer, Softmax) and k != len(layers) - 1:
                raise SchemaViolation("softmax may only appear as the final layer", f"layers/{k}")
            try:
                shape = layer.output_shape(shape)
            except SchemaViolation as exc:
                raise SchemaViolation(str(exc), f"layers/{k}") from None
            shapes.append(shape)
        if len(shape) != 1:
            raise SchemaViolation(f"network output must be a vector, got shape {shape}", "layers")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", in_shape)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def conv_layers(self) -> list:
        return [k for k, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]

    def _run(self, X, start=0):
        """Forward pass from layer ``start``; returns per-layer (input, cache, output)."""
        trace = []
        for layer in self.layers[start:]:
            Y, cache = layer.forward(X)
            trace.append((X, cache, Y))
            X = Y
        return X, trace

    def _backprop(self, trace, g, start, stop):
        """Push ``g`` (gradient at output of the last traced layer) back to the
        input of layer ``stop``; ``trace[k - start]`` belongs to layer ``k``."""
        for k in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[k]
            X, cache, Y = trace[k - start]
            if isinstance(layer, Softmax):
                g = layer.backward(g, X, cache, Y)
            else:
                g = layer.backward(g, X, cache)
        return g

    def forward(self, X):
        return self._run(X)[0]

    def forward_tail(self, A, start):
        """Run layers ``start:`` on a batch of intermediate activations ``A``."""
        return self._run(A, start)[0]

    def _seed(self, out, class_idx):
        g = np.zeros_like(out)
        g[:, class_idx] = 1.0
        return g

    def gradient(self, X, class_idx):
        out, trace = self._run(X)
        return self._backprop(trace, self._seed(out, class_idx), 0, 0)

    def activations(self, X, layer_idx):
        out, trace = self._run(X)
        return out, trace[layer_idx][2]

    def activation_gradient(self, X, layer_idx, class_idx):
        out, trace = self._run(X)
        return self._backprop(trace, self._seed(out, class_idx), 0, layer_idx + 1)

    def as_logits(self):
        if isinstance(self.layers[-1], Softmax):
            return SequentialNet(self.layers[:-1], self.input_shape)
        return self


Model = Union[LinearModel, TreeEnsemble, SequentialNet]


# --------------------------------------------------------------------------- #
# Public single-instance API
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class ModelOutput:
    scores: np.ndarray
    predicted_class: int


def _check_input(model, x, batch=False):
    x = np.asarray(x, dtype=np.float64)
    want = tuple(model.input_shape)
    got = x.shape[1:] if batch else x.shape
    if got != want:
        raise ShapeMismatch(f"input shape {got} does not match model input shape {want}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("input contains NaN or infinite values")
    return x


def _check_class(model, class_idx):
    if not 0 <= class_idx < model.n_classes:
        raise ClassOutOfRange(f"class index {class_idx} outside [0, {model.n_classes})")
    return int(class_idx)


def predict(model: Model, x) -> ModelOutput:
    x = _check_input(model, x)
    scores = model.forward(x[None])[0]
    return ModelOutput(scores=scores, predicted_class=int(np.argmax(scores)))


def predict_batch(model: Model, X) -> np.ndarray:
    """Scores for every row of a batch, shape ``(N, n_classes)``."""
    return model.forward(_check_input(model, X, batch=True))


def target_score(model: Model, x, class_idx: int = 0) -> float:
    _check_class(model, class_idx)
    return float(predict(model, x).scores[class_idx])


def target_scores(model: Model, X, class_idx: int = 0) -> np.ndarray:
    """Batched ``target_score``: the class-``class_idx`` score of every row."""
    _check_class(model, class_idx)
    return predict_batch(model, X)[:, class_idx]


def input_gradient(model: Model, x, class_idx: int = 0) -> np.ndarray:
    x = _check_input(model, x)
    return input_gradients(model, x[None], class_idx)[0]


def input_gradients(model: Model, X, class_idx: int = 0) -> np.ndarray:
    if not getattr(model, "differentiable", False):
        raise NotDifferentiable(f"{type(model).__name__} has no input gradient")
    X = _check_input(model, X, batch=True)
    _check_class(model, class_idx)
    return model.gradient(X, class_idx)


def _check_conv(model, layer_idx):
    if not isinstance(model, SequentialNet):
        raise LayerNotConvolutional("only sequential networks have convolutional layers")
    if not 0 <= layer_idx < len(model.layers) or not isinstance(model.layers[layer_idx], Conv2D):
        raise LayerNotConvolutional(f"layer {layer_idx} is not a conv2d layer")


def forward_with_activations(model: SequentialNet, x, layer_idx: int):
    """Model output together with the output tensor of conv layer ``layer_idx``."""
    _check_conv(model, layer_idx)
    x = _check_input(model, x)
    out, act = model.activations(x[None], layer_idx)
    scores = out[0]
    return ModelOutput(scores=scores, predicted_class=int(np.argmax(scores))), act[0]


def activation_gradient(model: SequentialNet, x, layer_idx: int, class_idx: int = 0) -> np.ndarray:
    """Gradient of the class score w.r.t. the output of conv layer ``layer_idx``."""
    _check_conv(model, layer_idx)
    x = _check_input(model, x)
    _check_class(model, class_idx)
    return model.activation_gradient(x[None], layer_idx, class_idx)[0]


def with_output(model: Model, output: str = "probability") -> Model:
    """Switch a classifier between post-softmax probabilities and raw logits."""
    if output == "probability":
        return model
    if output == "logit":
        return model.as_logits()
    raise ValueError(f"output must be 'probability' or 'logit', got {output!r}")


def resolve_class(model: Model, x, target_class=None) -> int:
    """``target_class`` if given, else the predicted class of ``x``."""
    if target_class is None:
        return predict(model, x).predicted_class
    return _check_class(model, target_class)


def stump(feature: int, threshold: float, leaves: Sequence[float], n_features: int) -> TreeEnsemble:
    """A single one-split tree; handy for tests and fixtures."""
    tree = Tree(
        feature=[feature, -1, -1],
        threshold=[threshold, 0.0, 0.0],
        left=[1, -1, -1],
        right=[2, -1, -1],
        value=[[0.0], [leaves[0]], [leaves[1]]],
    )
    return TreeEnsemble((tree,), n_features=n_features, n_classes=1)
