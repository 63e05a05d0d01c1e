"""A small differentiable network engine.

Networks are sequential stacks of :class:`Dense`, :class:`Conv2D`,
:class:`Flatten` and :class:`Activation` layers operating on float64 numpy
arrays with a leading batch axis.  Besides the usual forward/backward passes
the engine exposes the second-order quantities the rest of the package needs:
input Hessian-vector products, the exact final-layer Hessian of the
cross-entropy loss, and a generalised "tangent backward" used to
differentiate gradient-based saliency maps with respect to the input.

Activations marked ``relu`` follow the model's ``activation_mode``: exact
ReLU, or the softplus surrogate ``(1/beta) * log(1 + exp(beta * z))``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import (
    Divergence,
    InvalidClass,
    RequiresSmoothActivation,
    ShapeMismatch,
    SingularHessian,
)

log = logging.getLogger(__name__)

DEFAULT_BETA = 10.0
CHECKPOINT_MAGIC = b"NNFRAG01"


# --------------------------------------------------------------------------
# layers


class Dense:
    kind = "dense"

    def __init__(self, W, b):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeMismatch(f"dense weights {self.W.shape} / bias {self.b.shape}")

    @property
    def params(self):
        return [self.W, self.b]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.W.shape[1],):
            raise ShapeMismatch(f"dense layer expects ({self.W.shape[1]},), got {tuple(in_shape)}")
        return (self.W.shape[0],)

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def linear(self, dx):
        return dx @ self.W.T

    def backward(self, g, ctx=None):
        return g @ self.W

    def param_grads(self, ctx, g):
        return [g.T @ ctx, g.sum(axis=0)]

    def config(self):
        return {"kind": "dense", "in": self.W.shape[1], "out": self.W.shape[0]}


class Conv2D:
    """2-D convolution (cross-correlation) on (N, C, H, W) inputs."""

    kind = "conv2d"

    def __init__(self, K, b, stride=1, padding=0):
        self.K = np.ascontiguousarray(K, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        self.stride = int(stride)
        self.padding = int(padding)
        if self.K.ndim != 4 or self.b.shape != (self.K.shape[0],):
            raise ShapeMismatch(f"conv kernels {self.K.shape} / bias {self.b.shape}")

    @property
    def params(self):
        return [self.K, self.b]

    def out_shape(self, in_shape):
        f, c, kh, kw = self.K.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise ShapeMismatch(f"conv layer expects ({c}, H, W), got {tuple(in_shape)}")
        oh = kernels.conv_out_size(in_shape[1], kh, self.stride, self.padding)
        ow = kernels.conv_out_size(in_shape[2], kw, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"input {tuple(in_shape)} too small for kernel {kh}x{kw}")
        return (f, oh, ow)

    def _apply(self, x):
        f, c, kh, kw = self.K.shape
        n, _, h, w = x.shape
        cols = kernels.im2col(x, kh, kw, self.stride, self.padding)
        oh = kernels.conv_out_size(h, kh, self.stride, self.padding)
        ow = kernels.conv_out_size(w, kw, self.stride, self.padding)
        y = np.matmul(self.K.reshape(f, -1), cols).reshape(n, f, oh, ow)
        return y, cols

    def forward(self, x):
        y, cols = self._apply(x)
        return y + self.b[None, :, None, None], (cols, x.shape)

    def linear(self, dx):
        return self._apply(dx)[0]

    def backward(self, g, ctx):
        f, c, kh, kw = self.K.shape
        shape = ctx[1]
        gcols = np.matmul(self.K.reshape(f, -1).T, g.reshape(g.shape[0], f, -1))
        return kernels.col2im(gcols, shape, kh, kw, self.stride, self.padding)

    def param_grads(self, ctx, g):
        cols = ctx[0]
        g2 = g.reshape(g.shape[0], g.shape[1], -1)
        gK = np.einsum("nfp,nkp->fk", g2, cols).reshape(self.K.shape)
        return [gK, g2.sum(axis=(0, 2))]

    def config(self):
        f, c, kh, kw = self.K.shape
        return {"kind": "conv2d", "in_channels": c, "out_channels": f, "kernel": [kh, kw],
                "stride": self.stride, "padding": self.padding}


class Flatten:
    kind = "flatten"
    params: list = []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def linear(self, dx):
        return dx.reshape(dx.shape[0], -1)

    def backward(self, g, ctx):
        return g.reshape(ctx)

    def param_grads(self, ctx, g):
        return []

    def config(self):
        return {"kind": "flatten"}


class Activation:
    """Elementwise nonlinearity; ``relu`` switches with the model's mode."""

    kinds = ("relu", "identity")
    params: list = []

    def __init__(self, kind="relu"):
        if kind not in self.kinds:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def evaluate(self, z, mode, beta):
        """Return (g(z), g'(z), g''(z))."""
        if self.kind == "identity":
            return z, np.ones_like(z), np.zeros_like(z)
        if mode == "softplus":
            return kernels.softplus_family(z, beta)
        d1 = (z > 0).astype(np.float64)
        return z * d1, d1, np.zeros_like(z)

    def config(self):
        return {"kind": "activation", "fn": self.kind}


# --------------------------------------------------------------------------
# model


@dataclass
class Model:
    layers: list
    input_shape: tuple
    activation_mode: str = "relu"
    beta: float = DEFAULT_BETA
    seed: int | None = None
    history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.activation_mode not in ("relu", "softplus"):
            raise ValueError(f"activation_mode must be relu or softplus, got {self.activation_mode!r}")
        if self.beta <= 0:
            raise ValueError("softplus beta must be positive")
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeMismatch(f"network output must be a score vector, got shape {shape}")

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def is_smooth(self):
        return self.activation_mode == "softplus" or not any(
            isinstance(l, Activation) and l.kind == "relu" for l in self.layers)

    def smooth(self, beta=None):
        """Same parameters, softplus surrogate nonlinearities."""
        return replace(self, activation_mode="softplus", beta=self.beta if beta is None else beta,
                       history=self.history)

    def exact(self):
        """Same parameters, exact ReLU nonlinearities."""
        return replace(self, activation_mode="relu", history=self.history)

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def final_dense_index(self):
        for i in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[i], Dense):
                return i
        raise ValueError("model has no dense layer")

    def copy(self):
        new_layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                new_layers.append(Dense(layer.W.copy(), layer.b.copy()))
            elif isinstance(layer, Conv2D):
                new_layers.append(Conv2D(layer.K.copy(), layer.b.copy(), layer.stride, layer.padding))
            elif isinstance(layer, Activation):
                new_layers.append(Activation(layer.kind))
            else:
                new_layers.append(Flatten())
        return replace(self, layers=new_layers, history=list(self.history))


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] == model.input_shape:
        return x, False
    raise ShapeMismatch(f"input shape {x.shape} incompatible with model input {model.input_shape}")


def _check_class(model, class_index):
    idx = np.asarray(class_index)
    if np.any(idx < 0) or np.any(idx >= model.num_classes):
        raise InvalidClass(f"class index {class_index} outside [0, {model.num_classes})")


@dataclass
class _Cache:
    ctx: list
    pre: dict  # activation layer index -> pre-activation z
    d1: dict
    d2: dict
    out: np.ndarray


def _run(model, X):
    ctx, pre, d1, d2 = [], {}, {}, {}
    h = X
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Activation):
            pre[i] = h
            h, d1[i], d2[i] = layer.evaluate(h, model.activation_mode, model.beta)
            ctx.append(None)
        else:
            h, c = layer.forward(h)
            ctx.append(c)
    return _Cache(ctx, pre, d1, d2, h)


def _backward(model, cache, g, upto=0, inject=None):
    """Reverse pass from the output seed ``g`` down to the input of layer ``upto``.

    ``inject`` maps activation indices to extra gradients added at their
    pre-activation.
    """
    for i in range(len(model.layers) - 1, upto - 1, -1):
        layer = model.layers[i]
        if isinstance(layer, Activation):
            g = cache.d1[i] * g
            if inject is not None and i in inject:
                g = g + inject[i]
        else:
            g = layer.backward(g, cache.ctx[i])
    return g


def forward(model, x):
    """Pre-softmax class scores for one input (or a batch)."""
    X, single = _as_batch(model, x)
    out = _run(model, X).out
    return out[0] if single else out


def predict(model, x):
    scores = forward(model, x)
    return np.argmax(scores, axis=-1)


def _seed(model, n, class_index):
    _check_class(model, class_index)
    seed = np.zeros((n, model.num_classes))
    seed[np.arange(n), np.broadcast_to(np.asarray(class_index), (n,))] = 1.0
    return seed


def grad_input(model, x, class_index):
    """Gradient of the class score S_l with respect to the input."""
    X, single = _as_batch(model, x)
    cache = _run(model, X)
    g = _backward(model, cache, _seed(model, X.shape[0], class_index))
    return g[0] if single else g


def score_and_grad(model, X, class_index):
    """Batch helper: (S_l(X), dS_l/dX)."""
    cache = _run(model, X)
    seed = _seed(model, X.shape[0], class_index)
    return (cache.out * seed).sum(axis=1), _backward(model, cache, seed)


def tangent_backward(model, X, u0, seed, rescale=None):
    """Differentiate a (modified) backward pass with respect to the input.

    Let ``R(X) = J~(X)^T seed`` where ``J~`` is the network Jacobian with
    every nonlinearity's local derivative replaced by a multiplier ``m(z)``
    (``g'(z)`` by default).  Returns ``(R, grad)`` with ``grad`` the gradient
    of ``<u0, R(X)>`` with respect to X through the pre-activations.  With the
    default multipliers this is the input Hessian-vector product ``H u0``.

    ``rescale(i, z)`` may return ``(m, dm/dz)`` for activation layer ``i``.
    """
    cache = _run(model, X)
    mult = {}
    for i in cache.pre:
        if rescale is None:
            mult[i] = (cache.d1[i], cache.d2[i])
        else:
            mult[i] = rescale(i, cache.pre[i])

    n_layers = len(model.layers)
    r_out = {}
    g = seed
    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Activation):
            r_out[i] = g
            g = mult[i][0] * g
        else:
            g = layer.backward(g, cache.ctx[i])
    R = g

    q = u0
    inject = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Activation):
            dm = mult[i][1]
            if np.any(dm):
                inject[i] = q * r_out[i] * dm
            q = mult[i][0] * q
        else:
            q = layer.linear(q)
    if not inject:
        return R, np.zeros_like(X)
    top = max(inject)
    gX = np.zeros_like(cache.pre[top])
    for i in range(top, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Activation):
            gX = cache.d1[i] * gX
            if i in inject:
                gX = gX + inject[i]
        else:
            gX = layer.backward(gX, cache.ctx[i])
    return R, gX


def hessian_input_vp(model, x, v, class_index):
    """(d^2 S_l / dx^2) v for a twice-differentiable model."""
    if not model.is_smooth:
        raise RequiresSmoothActivation("input Hessian needs the softplus surrogate (model.smooth())")
    X, single = _as_batch(model, x)
    V = np.asarray(v, dtype=np.float64).reshape(X.shape)
    _, hv = tangent_backward(model, X, V, _seed(model, X.shape[0], class_index))
    return hv[0] if single else hv


# --------------------------------------------------------------------------
# losses and parameter gradients


def log_softmax(scores):
    m = scores.max(axis=-1, keepdims=True)
    z = scores - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(scores):
    return np.exp(log_softmax(scores))


def cross_entropy(model, X, y):
    """Per-example cross-entropy losses."""
    X, _ = _as_batch(model, X)
    y = np.atleast_1d(y)
    return -log_softmax(_run(model, X).out)[np.arange(len(y)), y]


def _param_backward(model, cache, g):
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Activation):
            g = cache.d1[i] * g
            continue
        if layer.params:
            grads[i] = layer.param_grads(cache.ctx[i], g)
        if i > 0:
            g = layer.backward(g, cache.ctx[i])
    return grads


def _flatten_grads(model, grads, subset):
    if subset == "final":
        i = model.final_dense_index()
        return np.concatenate([p.ravel() for p in grads[i]])
    return np.concatenate([p.ravel() for gl in grads if gl is not None for p in gl])


def grad_params(model, example, loss="cross_entropy", params="final"):
    """Gradient of the loss at ``example = (x, label)`` over a parameter subset.

    ``params="final"`` (default) restricts to the last dense layer, ordered
    ``W.ravel()`` then ``b``; ``"all"`` concatenates every layer's parameters
    in layer order.
    """
    if loss != "cross_entropy":
        raise ValueError("only cross_entropy loss is supported")
    x, label = example
    X, _ = _as_batch(model, x)
    _check_class(model, label)
    cache = _run(model, X)
    p = softmax(cache.out)
    p[0, int(label)] -= 1.0
    return _flatten_grads(model, _param_backward(model, cache, p), params)


def penultimate_features(model, X):
    """Inputs to the final dense layer for a batch."""
    X, _ = _as_batch(model, X)
    return _run_partial(model, X, model.final_dense_index())


def _run_partial(model, X, stop):
    h = X
    for layer in model.layers[:stop]:
        if isinstance(layer, Activation):
            h = layer.evaluate(h, model.activation_mode, model.beta)[0]
        else:
            h = layer.forward(h)[0]
    return h


def final_layer_jacobian_blocks(model, X):
    """Penultimate features (with bias column) and softmax probabilities."""
    i = model.final_dense_index()
    if i != len(model.layers) - 1 and any(
            not (isinstance(l, Activation) and l.kind == "identity") for l in model.layers[i + 1:]):
        raise ValueError("final dense layer must produce the scores")
    H = _run_partial(model, X, i)
    scores = H @ model.layers[i].W.T + model.layers[i].b
    return H, softmax(scores)


def hessian_final_layer(model, X, y=None, damping=0.0):
    """Empirical cross-entropy Hessian over the final dense layer, plus damping.

    Parameters are ordered ``W.ravel()`` (row-major, classes x features) then
    ``b``, matching :func:`grad_params`.
    """
    X, _ = _as_batch(model, X)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    H, P = final_layer_jacobian_blocks(model, X)
    n, f = H.shape
    c = P.shape[1]
    Ht = np.concatenate([H, np.ones((n, 1))], axis=1)  # augmented features, last = bias
    # per-example softmax curvature A_i = diag(p) - p p^T
    hess = np.zeros((c, f + 1, c, f + 1))
    for a in range(c):
        for b in range(a, c):
            w = P[:, a] * ((a == b) - P[:, b])
            blk = (Ht * w[:, None]).T @ Ht / n
            hess[a, :, b, :] = blk
            if b != a:
                hess[b, :, a, :] = blk.T
    # reorder from [W | b] row blocks to (W.ravel, b)
    order = [a * (f + 1) + j for a in range(c) for j in range(f)] + [a * (f + 1) + f for a in range(c)]
    full = hess.reshape(c * (f + 1), c * (f + 1))[np.ix_(order, order)]
    full = 0.5 * (full + full.T)
    if damping:
        full[np.diag_indices_from(full)] += damping
    return full


def hessian_all_params(model, X, y, damping=0.0, h=1e-5):
    """Dense Hessian over all parameters by central differences of the
    analytic mean-loss gradient.  Only sensible for tiny models."""
    X, _ = _as_batch(model, X)
    y = np.asarray(y)
    params = model.parameters()
    theta0 = [p.copy() for p in params]
    flat = np.concatenate([p.ravel() for p in theta0])

    def mean_grad():
        cache = _run(model, X)
        g = softmax(cache.out)
        g[np.arange(len(y)), y] -= 1.0
        return _flatten_grads(model, _param_backward(model, cache, g / len(y)), "all")

    def assign(vec):
        off = 0
        for p in params:
            p[...] = vec[off:off + p.size].reshape(p.shape)
            off += p.size

    out = np.empty((flat.size, flat.size))
    try:
        for k in range(flat.size):
            e = flat.copy(); e[k] += h
            assign(e)
            gp = mean_grad()
            e[k] -= 2 * h
            assign(e)
            gm = mean_grad()
            out[:, k] = (gp - gm) / (2 * h)
    finally:
        assign(flat)
    out = 0.5 * (out + out.T)
    out[np.diag_indices_from(out)] += damping
    return out


def solve_hessian(H, B):
    """Solve H U = B via Cholesky, raising SingularHessian on failure."""
    from scipy import linalg

    try:
        factor = linalg.cho_factor(H, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularHessian(f"Hessian not positive definite: {exc}") from exc
    U = linalg.cho_solve(factor, B)
    if not np.all(np.isfinite(U)):
        raise SingularHessian("non-finite inverse-Hessian-vector product")
    return U


# --------------------------------------------------------------------------
# construction and training


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build(spec, input_shape, seed=0, activation_mode="relu", beta=DEFAULT_BETA):
    """Build a randomly initialised model from a compact layer list.

    ``spec`` entries: ``("dense", out)``, ``("conv", out_channels, k, stride, pad)``,
    ``"flatten"``, ``"relu"``, ``"identity"``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape)
    for item in spec:
        if isinstance(item, str):
            item = (item,)
        kind = item[0]
        if kind == "dense":
            fan_in = shape[0]
            layer = Dense(_he(rng, (item[1], fan_in), fan_in), np.zeros(item[1]))
        elif kind == "conv":
            out_c, k = item[1], item[2]
            stride = item[3] if len(item) > 3 else 1
            pad = item[4] if len(item) > 4 else 0
            fan_in = shape[0] * k * k
            layer = Conv2D(_he(rng, (out_c, shape[0], k, k), fan_in), np.zeros(out_c), stride, pad)
        elif kind == "flatten":
            layer = Flatten()
        elif kind in Activation.kinds:
            layer = Activation(kind)
        else:
            raise ValueError(f"unknown layer spec {item!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Model(layers, input_shape, activation_mode, beta, seed=seed)


PRESETS = {
    "mlp_small": (lambda: ["flatten", ("dense", 128), "relu", ("dense", 64), "relu", ("dense", 10)],
                  (1, 28, 28)),
    "cnn_mnist": (lambda: [("conv", 8, 3, 2, 1), "relu", ("conv", 16, 3, 2, 1), "relu", "flatten",
                           ("dense", 64), "relu", ("dense", 10)],
                  (1, 28, 28)),
    # 3x3 same-padded convs, stride 2 on the third conv of each block,
    # 1024-unit hidden layer and a 10-way classifier head
    "cnn_cifar_appendixA": (lambda: [("conv", 96, 3, 1, 1), "relu", ("conv", 96, 3, 1, 1), "relu",
                                     ("conv", 96, 3, 2, 1), "relu",
                                     ("conv", 192, 3, 1, 1), "relu", ("conv", 192, 3, 1, 1), "relu",
                                     ("conv", 192, 3, 2, 1), "relu", "flatten",
                                     ("dense", 1024), "relu", ("dense", 10)],
                            (3, 32, 32)),
}


def preset(name, seed=0, num_classes=10, input_shape=None):
    try:
        make, default_shape = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    spec = make()
    spec[-1] = ("dense", num_classes)
    return build(spec, input_shape or default_shape, seed=seed)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trainable: str = "all"  # or "final"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("invalid training configuration")


def train(model, X, y, config=None, log_every=1):
    """Minibatch training on softmax cross-entropy; returns a new model.

    The per-epoch mean loss is stored in ``history`` of the returned model.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if X.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"data shape {X.shape[1:]} vs model input {model.input_shape}")
    _check_class(model, y)
    model = model.copy()
    model.history = []
    rng = np.random.default_rng(config.seed)
    if config.trainable == "final":
        trainable = [model.final_dense_index()]
    else:
        trainable = [i for i, l in enumerate(model.layers) if l.params]
    params = [p for i in trainable for p in model.layers[i].params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0
    n = X.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            cache = _run(model, X[idx])
            logp = log_softmax(cache.out)
            total += -logp[np.arange(len(idx)), y[idx]].sum()
            g = np.exp(logp)
            g[np.arange(len(idx)), y[idx]] -= 1.0
            grads = _param_backward(model, cache, g / len(idx))
            flat = [gp for i in trainable for gp in grads[i]]
            t += 1
            for k, (p, gp) in enumerate(zip(params, flat)):
                if config.weight_decay:
                    gp = gp + config.weight_decay * p
                if config.optimizer == "sgd":
                    p -= config.learning_rate * gp
                else:
                    m[k] = config.beta1 * m[k] + (1 - config.beta1) * gp
                    v[k] = config.beta2 * v[k] + (1 - config.beta2) * gp * gp
                    mh = m[k] / (1 - config.beta1 ** t)
                    vh = v[k] / (1 - config.beta2 ** t)
                    p -= config.learning_rate * mh / (np.sqrt(vh) + config.eps)
        loss = total / n
        if not np.isfinite(loss):
            raise Divergence(f"loss became non-finite at epoch {epoch + 1}")
        model.history.append(loss)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, loss)
    model.seed = config.seed
    return model


def accuracy(model, X, y, batch_size=500):
    X = np.asarray(X, dtype=np.float64)
    hits = 0
    for s in range(0, len(X), batch_size):
        hits += int((np.argmax(forward(model, X[s:s + batch_size]), axis=1) == y[s:s + batch_size]).sum())
    return hits / len(X)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path):
    header = {
        "architecture": [layer.config() for layer in model.layers],
        "input_shape": list(model.input_shape),
        "shapes": [list(p.shape) for p in model.parameters()],
        "activation_mode": model.activation_mode,
        "beta": model.beta,
        "seed": model.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path):
    from .errors import BadMagic, TruncatedFile

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not an NNFRAG01 checkpoint")
    if len(data) < 16:
        raise TruncatedFile(f"{path}: missing header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise TruncatedFile(f"{path}: header truncated")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise TruncatedFile(f"{path}: parameter data truncated")
        arrays.append(np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape))
        offset = end
    it = iter(arrays)
    layers = []
    for cfg in header["architecture"]:
        kind = cfg["kind"]
        if kind == "dense":
            layers.append(Dense(next(it), next(it)))
        elif kind == "conv2d":
            layers.append(Conv2D(next(it), next(it), cfg["stride"], cfg["padding"]))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "activation":
            layers.append(Activation(cfg["fn"]))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in checkpoint")
    return Model(layers, tuple(header["input_shape"]), header["activation_mode"], header["beta"],
                 seed=header.get("seed"))
