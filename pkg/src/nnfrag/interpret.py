"""Normalized feature-importance maps: simple gradient, integrated gradients
and DeepLIFT (Rescale rule).

Every method produces a signed attribution ``A`` per input feature; the
saliency map is ``|A| / sum |A|``.  :func:`attribution_vjp` additionally
returns a closure evaluating ``grad_x <c, A(x)>``, which is what the
iterative attacks differentiate through.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Activation, Conv2D, Dense, Flatten
from .errors import DegenerateSaliency, ShapeMismatch, UnsupportedLayer

METHODS = ("simple_gradient", "integrated_gradients", "deeplift")
SHORT_NAMES = {"sg": "simple_gradient", "ig": "integrated_gradients", "dl": "deeplift"}
DEFAULT_M = 100
# "right": sum over k = 1..M of grad(x0 + k/M dx) / M.
# "trapezoid": same grid plus k = 0, endpoints at half weight; its
# completeness error is O(1/M^2) instead of O(1/M).
IG_RULES = ("trapezoid", "right")
DEFAULT_IG_RULE = "trapezoid"
DEGENERATE_SUM = 1e-12
# DeepLIFT multipliers fall back to the reference derivative below this |dz|
RESCALE_EPS = 1e-7


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    signed: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ReferencePoint:
    x0: np.ndarray
    kind: str = "custom"

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), "zeros")

    @classmethod
    def pixelwise_mean(cls, X):
        return cls(np.asarray(X, dtype=np.float64).mean(axis=0), "pixelwise_mean")

    @classmethod
    def channelwise_mean(cls, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ShapeMismatch("channel-wise mean needs (N, C, H, W) data")
        means = X.mean(axis=(0, 2, 3))
        return cls(np.broadcast_to(means[:, None, None], X.shape[1:]).copy(), "channelwise_mean")


def resolve_method(name):
    name = SHORT_NAMES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown saliency method {name!r}")
    return name


def normalize(raw, method="custom", signed=None):
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("normalize expects nonnegative scores")
    total = raw.sum()
    if not total >= DEGENERATE_SUM:
        raise DegenerateSaliency(f"importance scores sum to {total:g}")
    return SaliencyMap(raw / total, method, signed)


def predicted_class(model, x):
    return int(np.argmax(engine.forward(model.exact(), x)))


def _reference(model, x, ref):
    if ref is None:
        ref = ReferencePoint.zeros(model.input_shape)
    x0 = ref.x0 if isinstance(ref, ReferencePoint) else np.asarray(ref, dtype=np.float64)
    if x0.shape != np.shape(x):
        raise ShapeMismatch(f"reference shape {x0.shape} vs input {np.shape(x)}")
    return x0


def simple_gradient_saliency(model, x, class_index=None):
    x = np.asarray(x, dtype=np.float64)
    if class_index is None:
        class_index = predicted_class(model, x)
    g = engine.grad_input(model, x, class_index)
    return normalize(np.abs(g), "simple_gradient", g)


def _path_points(x, x0, M, rule):
    """Quadrature nodes t_k on [0, 1], their weights, and the path points."""
    if rule == "right":
        t = np.arange(1, M + 1, dtype=np.float64) / M
        w = np.full(M, 1.0 / M)
    elif rule == "trapezoid":
        t = np.arange(0, M + 1, dtype=np.float64) / M
        w = np.full(M + 1, 1.0 / M)
        w[0] = w[-1] = 0.5 / M
    else:
        raise ValueError(f"unknown integration rule {rule!r}")
    pts = x0[None] + t.reshape((-1,) + (1,) * x.ndim) * (x - x0)[None]
    return pts, t, w


def _mean_path_gradient(model, x, x0, M, class_index, rule, chunk=128):
    pts, _, w = _path_points(x, x0, M, rule)
    total = np.zeros_like(x)
    for s in range(0, len(pts), chunk):
        _, g = engine.score_and_grad(model, pts[s:s + chunk], class_index)
        total += np.tensordot(w[s:s + chunk], g, axes=1)
    return total


def integrated_gradients(model, x, ref=None, M=DEFAULT_M, class_index=None, rule=DEFAULT_IG_RULE):
    """Integrated gradients along the straight path from the reference.

    ``rule="right"`` is the plain sum over k/M, k = 1..M; the default
    trapezoid rule adds the reference endpoint with half weights at both
    ends.  Both are exact for linear models.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    x0 = _reference(model, x, ref)
    if class_index is None:
        class_index = predicted_class(model, x)
    signed = (x - x0) * _mean_path_gradient(model, x, x0, M, class_index, rule)
    return normalize(np.abs(signed), "integrated_gradients", signed)


def _check_deeplift_layers(model):
    for layer in model.layers:
        if not isinstance(layer, (Dense, Conv2D, Flatten, Activation)):
            raise UnsupportedLayer(f"DeepLIFT cannot propagate through {type(layer).__name__}")


def _rescale_fn(model, x0):
    """Rescale multipliers m = dg/dz relative to the reference activations,
    and their derivative with respect to z."""
    ref_cache = engine._run(model, x0[None])

    def rescale(i, z):
        layer = model.layers[i]
        z0 = ref_cache.pre[i]
        g, d1, d2 = layer.evaluate(z, model.activation_mode, model.beta)
        g0, d10, d20 = layer.evaluate(z0, model.activation_mode, model.beta)
        dz = z - z0
        small = np.abs(dz) < RESCALE_EPS
        safe = np.where(small, 1.0, dz)
        m = np.where(small, d10, (g - g0) / safe)
        dm = np.where(small, 0.5 * d20, (d1 * dz - (g - g0)) / (safe * safe))
        return m, dm

    return rescale


def deeplift_rescale(model, x, ref=None, class_index=None):
    _check_deeplift_layers(model)
    x = np.asarray(x, dtype=np.float64)
    x0 = _reference(model, x, ref)
    if class_index is None:
        class_index = predicted_class(model, x)
    seed = engine._seed(model, 1, class_index)
    X = x[None]
    rescale = _rescale_fn(model, x0)
    cache = engine._run(model, X)
    g = seed
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Activation):
            g = rescale(i, cache.pre[i])[0] * g
        else:
            g = layer.backward(g, cache.ctx[i])
    signed = (x - x0) * g[0]
    return normalize(np.abs(signed), "deeplift", signed)


def saliency(method, model, x, ref=None, M=DEFAULT_M, class_index=None, rule=DEFAULT_IG_RULE):
    method = resolve_method(method)
    if method == "simple_gradient":
        return simple_gradient_saliency(model, x, class_index)
    if method == "integrated_gradients":
        return integrated_gradients(model, x, ref, M, class_index, rule)
    return deeplift_rescale(model, x, ref, class_index)


def attribution_vjp(method, model, x, class_index, ref=None, M=DEFAULT_M, rule=DEFAULT_IG_RULE):
    """Signed attribution at ``x`` plus a closure ``vjp(c) = grad_x <c, A(x)>``.

    The model should be smooth (softplus) for the gradient to be informative;
    with exact ReLU the second-order terms vanish almost everywhere.
    """
    method = resolve_method(method)
    x = np.asarray(x, dtype=np.float64)
    X = x[None]
    seed1 = engine._seed(model, 1, class_index)

    if method == "simple_gradient":
        A = engine.grad_input(model, x, class_index)

        def vjp(c):
            return engine.tangent_backward(model, X, c[None], seed1)[1][0]

        return A, vjp

    x0 = _reference(model, x, ref)
    dx = x - x0

    if method == "integrated_gradients":
        gbar = _mean_path_gradient(model, x, x0, M, class_index, rule)
        A = dx * gbar
        pts, t, w = _path_points(x, x0, M, rule)
        keep = t > 0  # the reference endpoint does not move with x
        pts, coef = pts[keep], (t * w)[keep]

        def vjp(c, chunk=128):
            u = c * dx
            acc = np.zeros_like(x)
            for s in range(0, len(pts), chunk):
                P = pts[s:s + chunk]
                U = coef[s:s + chunk].reshape((-1,) + (1,) * x.ndim) * u[None]
                seed = engine._seed(model, P.shape[0], class_index)
                acc += engine.tangent_backward(model, P, U, seed)[1].sum(axis=0)
            return c * gbar + acc

        return A, vjp

    _check_deeplift_layers(model)
    rescale = _rescale_fn(model, x0)
    R, _ = engine.tangent_backward(model, X, np.zeros_like(X), seed1, rescale)
    A = dx * R[0]

    def vjp(c):
        R2, gX = engine.tangent_backward(model, X, (c * dx)[None], seed1, rescale)
        return c * R2[0] + gX[0]

    return A, vjp


def normalized_jacobian_t(A, d):
    """Pull ``d = dD/dI`` back through I = |A| / sum |A|; returns dD/dA."""
    absA = np.abs(A)
    total = absA.sum()
    if not total >= DEGENERATE_SUM:
        raise DegenerateSaliency(f"importance scores sum to {total:g}")
    I = absA / total
    return np.sign(A) * (d - np.sum(d * I)) / total


def channel_aggregate(values):
    """Collapse a (C, H, W) map to (H, W) by summing channels."""
    v = np.asarray(values)
    if v.ndim == 3:
        return v.sum(axis=0)
    if v.ndim == 2:
        return v
    raise ShapeMismatch(f"cannot view map of shape {v.shape} as an image")


def write_pgm(path, values):
    """8-bit binary PGM (P5) after min-max scaling of the channel-summed map."""
    img = channel_aggregate(values).astype(np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w)


def write_csv(path, values):
    flat = np.asarray(values, dtype=np.float64).ravel()
    with open(path, "w", newline="\n") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(flat):
            fh.write(f"{i},{float(v)!r}\n")
