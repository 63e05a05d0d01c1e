"""Geometry of saliency sensitivity.

Dominant singular directions of the input Hessian, the angle between the
direction that moves the saliency map fastest and the prediction gradient, the
closed-form relative saliency change of a single-unit model and how it
scales with input dimension, and a Lipschitz bound on the input gradient.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import engine
from .engine import Activation, Conv2D, Dense, Flatten
from .errors import (DegenerateDirection, NoConvergence, NotOrthogonal, UnsupportedActivation,
                     UnsupportedLayer, ZeroDerivative)

POWER_ITERS = 200
POWER_TOL = 1e-9


@dataclass
class DirectionPair:
    interp_dir: np.ndarray
    pred_dir: np.ndarray
    angle_deg: float


@dataclass
class PowerResult:
    vector: np.ndarray
    value: float
    history: list
    converged: bool


def canonical_sign(v, tiny=1e-12):
    """Flip ``v`` so that its first clearly nonzero entry is positive."""
    flat = v.ravel()
    nz = np.flatnonzero(np.abs(flat) > tiny * np.abs(flat).max())
    if nz.size and flat[nz[0]] < 0:
        return -v
    return v


def power_iteration(matvec, shape, iters=POWER_ITERS, tol=POWER_TOL, seed=0):
    """Dominant eigenpair of a symmetric positive semidefinite operator.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    Raises NoConvergence if the operator annihilates the iterate.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=shape)
    v /= np.linalg.norm(v)
    history = []
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        if not np.all(np.isfinite(w)):
            raise NoConvergence("operator produced non-finite values", residual=math.inf)
        lam_new = float(np.sum(v * w))
        norm = np.linalg.norm(w)
        if norm == 0.0 or lam_new <= 0.0:
            raise NoConvergence("operator is zero along the iterate", residual=0.0)
        history.append(lam_new)
        v = w / norm
        if lam and abs(lam_new - lam) <= tol * abs(lam_new):
            return PowerResult(v, lam_new, history, True)
        lam = lam_new
    return PowerResult(v, lam, history, False)


def top_hessian_direction(model, x, class_index=None, iters=POWER_ITERS, tol=POWER_TOL, seed=0,
                          strict=True, return_result=False):
    """Dominant right singular direction of the input Hessian of S_l.

    Power iteration runs on v -> H(Hv), whose top eigenvector is the
    singular direction of the symmetric H with largest |eigenvalue|.
    """
    x = np.asarray(x, dtype=np.float64)
    if class_index is None:
        class_index = int(np.argmax(engine.forward(model, x)))

    def hh(v):
        return engine.hessian_input_vp(model, x, engine.hessian_input_vp(model, x, v, class_index),
                                       class_index)

    res = power_iteration(hh, x.shape, iters, tol, seed)
    if strict and not res.converged:
        last = abs(res.history[-1] - res.history[-2]) / res.history[-1] if len(res.history) > 1 else math.inf
        raise NoConvergence(f"power iteration did not converge in {iters} steps", residual=last)
    res.vector = canonical_sign(res.vector)
    return res if return_result else res.vector


def _angle(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateDirection("cannot measure the angle of a zero vector")
    cos = abs(float(np.sum(a * b))) / (na * nb)
    return math.degrees(math.acos(min(1.0, cos)))


def attack_angle(model, x, class_index=None, **power_kw):
    """Angle (degrees, in [0, 90]) between the Hessian's dominant direction
    and the gradient of the class score."""
    x = np.asarray(x, dtype=np.float64)
    if class_index is None:
        class_index = int(np.argmax(engine.forward(model, x)))
    interp = top_hessian_direction(model, x, class_index, **power_kw)
    g = engine.grad_input(model, x, class_index)
    n = np.linalg.norm(g)
    if n == 0:
        raise DegenerateDirection("score gradient vanishes")
    return DirectionPair(interp, g / n, _angle(interp, g))


def attack_angles(model, X, **power_kw):
    """Batch version; non-converged power iterations are kept (strict=False)."""
    power_kw.setdefault("strict", False)
    return [attack_angle(model, x, **power_kw) for x in X]


def influence_attack_angle(model, train_set=None, z_t=None, top_m=3, damping=1e-3, cache=None):
    """Angle between the (pre-sign) influence attack gradient and the
    prediction gradient at the test input."""
    from . import influence

    x, label = np.asarray(z_t[0], dtype=np.float64), int(z_t[1])
    gt = influence.final_layer_grads(model, x, [label])[0]
    if not np.any(gt):
        raise DegenerateDirection("test loss gradient is zero")
    gi = influence.top_influence_objective_grad(model, (x, label), top_m, train_set, damping, cache)
    gp = engine.grad_input(model, x, int(np.argmax(engine.forward(model, x))))
    ni, npd = np.linalg.norm(gi), np.linalg.norm(gp)
    if ni == 0 or npd == 0:
        raise DegenerateDirection("influence or prediction gradient vanishes")
    return DirectionPair(gi / ni, gp / npd, _angle(gi, gp))


def angle_histogram(angles, bin_width=5.0):
    """Counts over [0, 90] in bins of ``bin_width`` degrees."""
    edges = np.arange(0.0, 90.0 + bin_width, bin_width)
    counts, _ = np.histogram(np.clip(angles, 0, 90), bins=edges)
    return edges, counts


def write_angles_csv(path, angles):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "angle_deg"])
        for i, a in enumerate(angles):
            w.writerow([i, f"{a:.9g}"])
        edges, counts = angle_histogram(angles)
    with open(str(path).rsplit(".", 1)[0] + "_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:g}", f"{hi:g}", int(c)])


# --------------------------------------------------------------------------
# single-unit closed forms

def activation_derivs(g="softplus", beta=1.0):
    """(g', g'') as callables for a named activation, or pass a pair through."""
    if not isinstance(g, str):
        return g
    if g == "softplus":
        def d1(z):
            return 1 / (1 + np.exp(-beta * z))

        def d2(z):
            s = d1(z)
            return beta * s * (1 - s)

        return d1, d2
    if g == "sigmoid":
        def d1(z):
            s = 1 / (1 + np.exp(-z))
            return s * (1 - s)

        def d2(z):
            s = 1 / (1 + np.exp(-z))
            return s * (1 - s) * (1 - 2 * s)

        return d1, d2
    if g == "tanh":
        return (lambda z: 1 - np.tanh(z) ** 2,
                lambda z: -2 * np.tanh(z) * (1 - np.tanh(z) ** 2))
    raise ValueError(f"unknown activation {g!r}")


def relative_saliency_change(w, x, delta, g="softplus", beta=1.0):
    """w.delta * g''(w.x) / g'(w.x): relative change of every gradient entry
    of S = g(w.x) to first order, the same for each feature."""
    w, x, delta = (np.asarray(a, dtype=np.float64).ravel() for a in (w, x, delta))
    d1, d2 = activation_derivs(g, beta)
    z = float(w @ x)
    gp = float(d1(z))
    if gp == 0.0:
        raise ZeroDerivative(f"g'({z:g}) is zero")
    return float(w @ delta) * float(d2(z)) / gp


def relative_influence_change(w, x, delta, g="softplus", beta=1.0):
    """Relative change of d L / d w_i for L = |y - g(w.x)|; the x_i factors
    cancel and the result matches :func:`relative_saliency_change`."""
    w, x, delta = (np.asarray(a, dtype=np.float64).ravel() for a in (w, x, delta))
    d1, d2 = activation_derivs(g, beta)
    z = float(w @ x)
    gp = float(d1(z))
    if gp == 0.0:
        raise ZeroDerivative(f"g'({z:g}) is zero")
    i = int(np.argmax(np.abs(x)))
    return (x[i] * float(w @ delta) * float(d2(z))) / (x[i] * gp)


@dataclass
class ScalingResult:
    rows: list
    slope: float
    p_values: list

    def means(self):
        dims = sorted({r["dim"] for r in self.rows})
        return dims, [np.mean([r["saliency_change"] for r in self.rows if r["dim"] == d]) for d in dims]


def dimension_scaling_experiment(dims=(10, 100, 1000, 10000), trials=100, seed=0, epsilon=8 / 255,
                                 g="softplus", beta=1.0, out=None):
    """Relative saliency/influence change at delta = eps * sign(w) for random
    unit-norm w and x, with a log-log slope fit of the mean against d."""
    if any(d < 1 for d in dims):
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    rows = []
    for d in dims:
        for t in range(trials):
            w = rng.normal(size=d)
            w /= np.linalg.norm(w)
            x = rng.normal(size=d)
            x /= np.linalg.norm(x)
            delta = epsilon * np.sign(w)
            rows.append({"dim": d, "trial": t,
                         "saliency_change": relative_saliency_change(w, x, delta, g, beta),
                         "influence_change": relative_influence_change(w, x, delta, g, beta)})
    by_dim = [np.array([r["saliency_change"] for r in rows if r["dim"] == d]) for d in dims]
    means = [b.mean() for b in by_dim]
    slope = float(np.polyfit(np.log(dims), np.log(means), 1)[0]) if len(dims) > 1 else float("nan")
    pvals = [float(stats.mannwhitneyu(a, b, alternative="less").pvalue) for a, b in zip(by_dim, by_dim[1:])]
    res = ScalingResult(rows, slope, pvals)
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dim", "trial", "saliency_change", "influence_change"])
            for r in rows:
                w.writerow([r["dim"], r["trial"], f"{r['saliency_change']:.9g}", f"{r['influence_change']:.9g}"])
    return res


def two_layer_steepest_direction(model, x, class_index=0, tol=1e-8):
    """Closed-form steepest direction of gradient change for S = v . g(Wx + b)
    with mutually orthogonal rows of W.

    Returns the unit row direction w_k / |w_k| and its 0-based index k,
    k = argmax_j |v_j g''(w_j . x + b_j)| |w_j|^2.
    """
    dense = [l for l in model.layers if isinstance(l, Dense)]
    acts = [l for l in model.layers if isinstance(l, Activation)]
    if len(dense) != 2 or len(acts) != 1 or not isinstance(model.layers[0], Dense):
        raise UnsupportedLayer("expected Dense -> activation -> Dense")
    W, b = dense[0].W, dense[0].b
    v = dense[1].W[class_index]
    h, d = W.shape
    if h >= d:
        raise NotOrthogonal(f"need fewer hidden units than inputs (h={h}, d={d})")
    G = W @ W.T
    off = G - np.diag(np.diag(G))
    if np.max(np.abs(off)) > tol * max(1.0, np.max(np.diag(G))):
        raise NotOrthogonal("rows of the first layer are not mutually orthogonal")
    z = W @ np.asarray(x, dtype=np.float64).ravel() + b
    _, _, d2 = acts[0].evaluate(z, model.activation_mode, model.beta)
    score = np.abs(v * d2) * np.diag(G)
    k = int(np.argmax(score))
    return canonical_sign(W[k] / np.linalg.norm(W[k])), k


# --------------------------------------------------------------------------
# Lipschitz bound

def operator_norm(W, iters=POWER_ITERS, tol=POWER_TOL, seed=0, strict=True):
    """Largest singular value of a matrix via power iteration on W^T W."""
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        raise ValueError("operator norm of a zero matrix is not defined here")
    res = power_iteration(lambda v: W.T @ (W @ v), (W.shape[1],), iters, tol, seed)
    if strict and not res.converged:
        raise NoConvergence("operator norm power iteration did not converge",
                            residual=abs(res.history[-1] - res.history[-2]) / res.history[-1])
    return math.sqrt(res.value)


def layer_operator_norm(layer, in_shape, iters=1000, tol=1e-12, seed=0):
    """Operator norm of a Dense or Conv2D layer's linear part; convolutions
    are applied as operators and never unrolled into a matrix."""
    if isinstance(layer, Dense):
        return operator_norm(layer.W, iters, tol, seed, strict=False)
    if isinstance(layer, Conv2D):
        shape = (1,) + tuple(in_shape)

        def op(v):
            # backward only needs the input shape from its context
            y = layer.linear(v.reshape(shape))
            return layer.backward(y, (None, shape)).reshape(v.shape)

        res = power_iteration(op, (int(np.prod(in_shape)),), iters, tol, seed)
        return math.sqrt(res.value)
    raise UnsupportedLayer(f"no operator norm for {type(layer).__name__}")


def lipschitz_interpretation_bound(model):
    """Product bound on the Lipschitz constant of the input gradient.

    Every linear layer followed by a nonlinearity g contributes
    |W|^2 L(g') with L(softplus_beta') = beta / 4 and L(identity') = 0.
    A final linear read-out contributes |W| only.  Networks with no
    nonlinearity have a constant gradient and get 0.
    """
    shapes = model.shapes
    groups = []  # (linear layer, input shape, activation or None)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (Dense, Conv2D)):
            groups.append([layer, shapes[i], None])
        elif isinstance(layer, Activation):
            if not groups or groups[-1][2] is not None:
                raise UnsupportedLayer("activation must follow a linear layer")
            groups[-1][2] = layer
        elif not isinstance(layer, Flatten):
            raise UnsupportedLayer(f"cannot bound {type(layer).__name__}")
    for _, _, act in groups:
        if act is not None and act.kind == "relu" and not model.is_smooth:
            raise UnsupportedActivation("exact ReLU has a discontinuous derivative; use the softplus surrogate")
    nonlinear = [act for _, _, act in groups if act is not None and act.kind == "relu"]
    if not nonlinear:
        return 0.0
    bound = 1.0
    for idx, (layer, in_shape, act) in enumerate(groups):
        norm = layer_operator_norm(layer, in_shape)
        if act is None:
            if idx != len(groups) - 1:
                raise UnsupportedLayer("linear layers must be followed by an activation")
            bound *= norm
        elif act.kind == "identity":
            return 0.0
        else:
            bound *= norm ** 2 * model.beta / 4
    return bound


def sampled_gradient_ratios(model, class_index, n=1000, seed=0, scale=1.0, step=None):
    """max over random (x, delta) of |grad S(x + delta) - grad S(x)| / |delta|."""
    rng = np.random.default_rng(seed)
    shape = (n,) + tuple(model.input_shape)
    X = rng.normal(scale=scale, size=shape)
    D = rng.normal(scale=step or scale, size=shape)
    _, g0 = engine.score_and_grad(model, X, class_index)
    _, g1 = engine.score_and_grad(model, X + D, class_index)
    num = np.linalg.norm((g1 - g0).reshape(n, -1), axis=1)
    den = np.linalg.norm(D.reshape(n, -1), axis=1)
    return num / den
