"""Per-pixel attribution maps for image classifiers.

Inputs are ``(C, H, W)`` tensors fed to a :class:`~attriq.models.SequentialNet`.
Maps are ``(H, W)``; channels are reduced by summation for signed methods
(gradient x input, integrated gradients) and by max of absolute values for
saliency.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attrib_tabular import _ig
from .errors import PatchLargerThanImage, ShapeMismatch
from .models import (
    SequentialNet,
    _check_conv,
    _check_input,
    input_gradient,
    input_gradients,
    resolve_class,
    target_scores,
)


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # (H, W)
    target_class: int
    method: str
    input_shape: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        shape = tuple(self.input_shape)
        if v.shape != shape[-2:]:
            raise ShapeMismatch(f"map shape {v.shape} does not match input spatial dims {shape[-2:]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("attribution map must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "input_shape", shape)


def _image(model, x):
    x = _check_input(model, x)
    if x.ndim != 3:
        raise ShapeMismatch(f"image attributions need a (C, H, W) input, got {x.shape}")
    return x


def _saliency_reduce(g):
    return np.abs(g).max(axis=0)


def saliency_map(model, x, target_class=None) -> AttributionMap:
    x = _image(model, x)
    c = resolve_class(model, x, target_class)
    return AttributionMap(_saliency_reduce(input_gradient(model, x, c)), c, "saliency", x.shape)


def grad_input_map(model, x, target_class=None) -> AttributionMap:
    x = _image(model, x)
    c = resolve_class(model, x, target_class)
    return AttributionMap((x * input_gradient(model, x, c)).sum(axis=0), c, "grad_x_input", x.shape)


def integrated_gradients_map(model, x, baseline=0.0, steps=64, target_class=None) -> AttributionMap:
    x = _image(model, x)
    if steps < 8:
        raise ValueError("steps must be >= 8")
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    c = resolve_class(model, x, target_class)
    return AttributionMap(_ig(model, x, baseline, c, steps).sum(axis=0), c, "integrated_gradients", x.shape)


def smoothgrad(model, x, target_class=None, n_samples=32, sigma=0.15, seed=0) -> AttributionMap:
    """Saliency averaged over ``n_samples`` copies of ``x`` with Gaussian noise of
    standard deviation ``sigma * (max(x) - min(x))``."""
    x = _image(model, x)
    c = resolve_class(model, x, target_class)
    std = sigma * (x.max() - x.min())
    if std == 0:
        # every noisy copy equals x
        return AttributionMap(saliency_map(model, x, c).values, c, "smoothgrad", x.shape)
    rng = np.random.default_rng(seed)
    noisy = x[None] + std * rng.standard_normal((n_samples,) + x.shape)
    g = input_gradients(model, noisy, c)
    maps = np.abs(g).max(axis=1)
    return AttributionMap(maps.mean(axis=0), c, "smoothgrad", x.shape)


def _positions(size, patch, stride):
    return range(0, size - patch + 1, stride)


def occlusion_sensitivity(model, x, target_class=None, patch_size=4, stride=2, baseline_value=0.0) -> AttributionMap:
    """Slide a ``patch_size`` square of ``baseline_value`` over the image; every
    covered cell accumulates the score drop, averaged by coverage count."""
    x = _image(model, x)
    _, H, W = x.shape
    ph, pw = (patch_size, patch_size) if np.isscalar(patch_size) else tuple(patch_size)
    if ph > H or pw > W:
        raise PatchLargerThanImage(f"patch {(ph, pw)} larger than image {(H, W)}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c = resolve_class(model, x, target_class)
    corners = [(i, j) for i in _positions(H, ph, stride) for j in _positions(W, pw, stride)]
    batch = np.repeat(x[None], len(corners) + 1, axis=0)
    for k, (i, j) in enumerate(corners, start=1):
        batch[k, :, i : i + ph, j : j + pw] = baseline_value
    f = target_scores(model, batch, c)
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for k, (i, j) in enumerate(corners, start=1):
        total[i : i + ph, j : j + pw] += f[0] - f[k]
        count[i : i + ph, j : j + pw] += 1
    values = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return AttributionMap(values, c, "occlusion", x.shape)


def upsample(a, shape, mode="bilinear"):
    """Resize a 2-D array to ``shape`` (half-pixel centres, edge clamped)."""
    h, w = a.shape
    H, W = shape
    if mode == "nearest":
        ri = np.minimum((np.arange(H) * h) // H, h - 1)
        ci = np.minimum((np.arange(W) * w) // W, w - 1)
        return a[np.ix_(ri, ci)]
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, rt = axis(H, h)
    c0, c1, ct = axis(W, w)
    top = a[r0][:, c0] * (1 - ct) + a[r0][:, c1] * ct
    bot = a[r1][:, c0] * (1 - ct) + a[r1][:, c1] * ct
    return top * (1 - rt)[:, None] + bot * rt[:, None]


def grad_cam(model: SequentialNet, x, target_class=None, conv_layer_idx=None, upsampling="bilinear") -> AttributionMap:
    """Gradient-weighted class activation map for a conv layer (last one by default),
    upsampled to the input size and max-normalised to [0, 1]."""
    x = _image(model, x)
    if conv_layer_idx is None:
        convs = model.conv_layers if isinstance(model, SequentialNet) else []
        conv_layer_idx = convs[-1] if convs else -1
    _check_conv(model, conv_layer_idx)
    c = resolve_class(model, x, target_class)
    _, acts = model.activations(x[None], conv_layer_idx)
    grads = model.activation_gradient(x[None], conv_layer_idx, c)
    A, G = acts[0], grads[0]
    weights = G.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, A, axes=1), 0.0)
    cam = upsample(cam, x.shape[1:], upsampling)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return AttributionMap(cam, c, "grad_cam", x.shape)


IMAGE_METHODS = ("saliency", "grad_x_input", "integrated_gradients", "smoothgrad", "occlusion", "grad_cam")
_STOCHASTIC = {"smoothgrad"}
_OPTIONS = {
    "saliency": set(),
    "grad_x_input": set(),
    "integrated_gradients": {"steps", "baseline"},
    "smoothgrad": {"n_samples", "sigma"},
    "occlusion": {"patch_size", "stride", "baseline_value"},
    "grad_cam": {"conv_layer_idx", "upsampling"},
}


@dataclass(frozen=True)
class ImageExplainer:
    """A configured image method, callable as ``explainer(model, x, target_class, seed)``."""

    method: str
    options: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in IMAGE_METHODS:
            raise ValueError(f"unknown image method {self.method!r}; valid: {', '.join(IMAGE_METHODS)}")
        unknown = set(self.options) - _OPTIONS[self.method]
        if unknown:
            raise ValueError(f"unknown options for {self.method}: {sorted(unknown)}")
        object.__setattr__(self, "options", dict(self.options))

    @property
    def stochastic(self) -> bool:
        return self.method in _STOCHASTIC

    def __call__(self, model, x, target_class=None, seed=0) -> AttributionMap:
        m, o = self.method, self.options
        if m == "saliency":
            return saliency_map(model, x, target_class)
        if m == "grad_x_input":
            return grad_input_map(model, x, target_class)
        if m == "integrated_gradients":
            return integrated_gradients_map(model, x, o.get("baseline", 0.0), o.get("steps", 64), target_class)
        if m == "smoothgrad":
            return smoothgrad(model, x, target_class, seed=seed, **o)
        if m == "occlusion":
            return occlusion_sensitivity(model, x, target_class, **o)
        return grad_cam(model, x, target_class, **o)
