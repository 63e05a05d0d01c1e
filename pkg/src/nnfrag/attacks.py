"""Perturbations that keep the predicted label but change the saliency map.

The iterative attacks take signed-gradient steps on a dissimilarity between
the original and the current saliency map, projecting each iterate back into
the L-infinity ball around the original input and into the valid value
range.  Gradients are taken on the softplus surrogate of the network; the
predicted label is always checked on the exact (ReLU) network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine, interpret, metrics
from .errors import DegenerateSaliency, NonFiniteGradient, ShapeMismatch

KINDS = ("random_sign", "top_k", "targeted", "mass_center")
SHORT_KINDS = {"rand": "random_sign", "topk": "top_k", "target": "targeted", "center": "mass_center"}
# below this center displacement (pixels) the mass-center gradient is undefined
CENTER_TOL = 1e-9


def resolve_kind(kind):
    kind = SHORT_KINDS.get(kind, kind)
    if kind not in KINDS:
        raise ValueError(f"unknown attack kind {kind!r}")
    return kind


def default_k(input_shape):
    """100 for images up to 32x32-ish, 1000 at ImageNet scale."""
    h, w = input_shape[-2:] if len(input_shape) >= 2 else (1, input_shape[0])
    return 1000 if h * w >= 224 * 224 else min(100, int(np.prod(input_shape)))


@dataclass
class AttackConfig:
    kind: str
    epsilon: float
    alpha: float = 0.5 / 255
    P: int = 300
    seed: int = 0
    saliency_method: str = "simple_gradient"
    k: int | None = None
    mask: np.ndarray | None = None
    M: int = interpret.DEFAULT_M
    reference: interpret.ReferencePoint | None = None
    beta: float | None = None
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        self.kind = resolve_kind(self.kind)
        self.saliency_method = interpret.resolve_method(self.saliency_method)
        if self.epsilon < 0 or self.alpha <= 0 or self.P < 1:
            raise ValueError("need epsilon >= 0, alpha > 0, P >= 1")
        if self.epsilon > 0 and self.alpha > self.epsilon * self.P:
            raise ValueError("alpha exceeds epsilon * P")
        if self.kind == "targeted" and self.mask is None:
            raise ValueError("targeted attack needs a mask")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    dissimilarity_trace: list
    selected_iteration: int
    prediction_preserved: bool
    confidence_before: float
    confidence_after: float
    metrics: metrics.MetricReport | None = None
    preserved_trace: list = field(default_factory=list)
    label: int = -1


def random_sign_perturbation(x_t, epsilon, seed, value_range=(0.0, 1.0)):
    """x_t + epsilon * s with s uniform on {-1, +1}^d, clipped to the value range."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    x_t = np.asarray(x_t, dtype=np.float64)
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, size=x_t.shape) * 2.0 - 1.0
    out = x_t + epsilon * s
    if value_range is not None:
        out = np.clip(out, *value_range)
    return out


def _mask_like(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == tuple(shape):
        return mask
    if len(shape) == 3 and mask.shape == tuple(shape[1:]):
        return np.broadcast_to(mask, shape)
    raise ShapeMismatch(f"mask shape {mask.shape} does not match input {tuple(shape)}")


def _grid_coords(shape):
    """(row, col) 1-based coordinate arrays broadcast to an input shape."""
    if len(shape) < 2:
        raise ShapeMismatch("mass-center attack needs image-shaped inputs")
    h, w = shape[-2:]
    rows = np.broadcast_to(np.arange(1, h + 1, dtype=np.float64)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(1, w + 1, dtype=np.float64)[None, :], (h, w))
    return np.broadcast_to(rows, shape), np.broadcast_to(cols, shape)


class Dissimilarity:
    """D(x_t, x) as a function of the normalized map I(x), with dD/dI."""

    def __init__(self, kind, I_t, k=None, mask=None):
        self.kind = resolve_kind(kind)
        I_t = np.asarray(I_t, dtype=np.float64)
        self.shape = I_t.shape
        if self.kind == "top_k":
            k = k or default_k(self.shape)
            sel = np.zeros(I_t.size, dtype=bool)
            sel[metrics.topk_indices(I_t, k)] = True
            self.weights = -sel.reshape(self.shape).astype(np.float64)
        elif self.kind == "targeted":
            self.weights = _mask_like(mask, self.shape).astype(np.float64)
        elif self.kind == "mass_center":
            self.rows, self.cols = _grid_coords(self.shape)
            self.c_t = self.center(I_t)
        else:
            raise ValueError("random_sign has no dissimilarity")

    def center(self, I):
        return np.array([np.sum(I * self.rows), np.sum(I * self.cols)])

    def value(self, I):
        if self.kind == "mass_center":
            return float(np.linalg.norm(self.center(I) - self.c_t))
        return float(np.sum(self.weights * I))

    def grad(self, I):
        if self.kind == "mass_center":
            diff = self.center(I) - self.c_t
            norm = math.sqrt(float(diff @ diff) + 1e-12)
            return (diff[0] * self.rows + diff[1] * self.cols) / norm
        return self.weights


def dissimilarity(kind, x_t, x, saliency_fn, k=None, mask=None):
    """D between the maps of x_t and x; ``saliency_fn`` returns a SaliencyMap."""
    I_t = saliency_fn(x_t).values
    I = I_t if x is x_t else saliency_fn(x).values
    return Dissimilarity(kind, I_t, k, mask).value(I)


def _project(x, x_t, eps, value_range):
    x = np.clip(x, x_t - eps, x_t + eps)
    if value_range is not None:
        x = np.clip(x, *value_range)
    return x


def _confidence(model, x, label):
    return float(engine.softmax(engine.forward(model, x))[label])


def _finite(g):
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient of the dissimilarity is not finite")
    return g


def attack_gradient(obj, method, surrogate, x, label, ref, M):
    """Value of D at x and grad_x D on the surrogate model."""
    A, vjp = interpret.attribution_vjp(method, surrogate, x, label, ref, M)
    I = np.abs(A) / np.abs(A).sum() if np.abs(A).sum() >= interpret.DEGENERATE_SUM else None
    if I is None:
        raise DegenerateSaliency("surrogate saliency vanished")
    value = obj.value(I)
    if obj.kind == "mass_center" and value < CENTER_TOL:
        # D is not differentiable at zero displacement; step along whichever
        # image axis the center can move fastest
        best = None
        for d in (obj.rows, obj.cols):
            g = vjp(interpret.normalized_jacobian_t(A, d))
            if best is None or np.abs(g).sum() > np.abs(best).sum():
                best = g
        return value, _finite(best)
    return value, _finite(vjp(interpret.normalized_jacobian_t(A, obj.grad(I))))


def iterative_attack(model, x_t, cfg: AttackConfig, before=None):
    """Run a random-sign or iterative saliency attack on one input.

    ``model`` may be in either activation mode; the exact twin is used for
    predictions and reported saliency maps, the softplus twin for gradients.
    ``before`` optionally supplies the exact-model saliency map of ``x_t``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != model.input_shape:
        raise ShapeMismatch(f"input {x_t.shape} vs model {model.input_shape}")
    exact = model.exact()
    surrogate = model.smooth(cfg.beta)
    label = int(np.argmax(engine.forward(exact, x_t)))
    k = cfg.k or default_k(x_t.shape)
    ref = cfg.reference
    conf_before = _confidence(exact, x_t, label)

    if cfg.kind == "random_sign" or cfg.epsilon == 0:
        if cfg.kind == "random_sign":
            x_adv = random_sign_perturbation(x_t, cfg.epsilon, cfg.seed, cfg.value_range)
        else:
            x_adv = x_t.copy()
        preserved = int(np.argmax(engine.forward(exact, x_adv))) == label
        trace, selected = [], 1 if cfg.kind == "random_sign" else 0
        if not preserved:
            x_adv, selected = x_t.copy(), 0
        result = AttackResult(x_adv, trace, selected, preserved, conf_before,
                              _confidence(exact, x_adv, label), preserved_trace=[preserved], label=label)
    else:
        I_t = interpret.saliency(cfg.saliency_method, surrogate, x_t, ref, cfg.M, label).values
        obj = Dissimilarity(cfg.kind, I_t, k, cfg.mask)
        x = x_t.copy()
        trace, preserved_trace = [], []
        best_val, best_x, best_p = -np.inf, None, 0
        _, grad = attack_gradient(obj, cfg.saliency_method, surrogate, x, label, ref, cfg.M)
        for p in range(1, cfg.P + 1):
            x = _project(x + cfg.alpha * np.sign(grad), x_t, cfg.epsilon, cfg.value_range)
            ok = int(np.argmax(engine.forward(exact, x))) == label
            if p < cfg.P:
                val, grad = attack_gradient(obj, cfg.saliency_method, surrogate, x, label, ref, cfg.M)
            else:
                I = interpret.saliency(cfg.saliency_method, surrogate, x, ref, cfg.M, label).values
                val = obj.value(I)
            trace.append(val)
            preserved_trace.append(ok)
            if ok and val > best_val:
                best_val, best_x, best_p = val, x.copy(), p
        if best_x is None:
            result = AttackResult(x_t.copy(), trace, 0, False, conf_before, conf_before,
                                  preserved_trace=preserved_trace, label=label)
        else:
            result = AttackResult(best_x, trace, best_p, True, conf_before,
                                  _confidence(exact, best_x, label), preserved_trace=preserved_trace,
                                  label=label)

    if before is None:
        before = interpret.saliency(cfg.saliency_method, exact, x_t, ref, cfg.M, label)
    after = interpret.saliency(cfg.saliency_method, exact, result.x_adv, ref, cfg.M, label)
    result.metrics = metrics.compare(before.values, after.values, k)
    result.saliency_before, result.saliency_after = before, after
    return result
