"""Influence of training points on a test loss, restricted to the final
dense layer, and the single-step gradient-sign attack against it.

Influence follows the up-weighting convention

    I(z_i, z_t) = -grad L(z_t)^T H^{-1} grad L(z_i),

so it approximates the change in test loss per unit of extra weight on
z_i, and records are ranked by descending influence.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import engine, metrics
from .errors import NonFiniteGradient, SingularHessian

DEFAULT_DAMPING = 1e-3
DEFAULT_TOP_M = 3
TOP_K = 5


@dataclass
class InfluenceRecord:
    train_index: int
    influence: float
    ihvp: np.ndarray


def param_version(model):
    """Digest of the model parameters; stale caches are detected with it."""
    h = hashlib.sha1()
    for p in model.parameters():
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()


def final_layer_grads(model, X, y):
    """Per-example cross-entropy gradients over the final dense layer, (n, p),
    ordered like :func:`engine.grad_params`."""
    X, _ = engine._as_batch(model, X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    H, P = engine.final_layer_jacobian_blocks(model, X)
    R = P.copy()
    R[np.arange(len(y)), y] -= 1.0
    gW = (R[:, :, None] * H[:, None, :]).reshape(len(y), -1)
    return np.concatenate([gW, R], axis=1)


def influence_from_gradients(g_test, G_train, H):
    """Generic core: -g_test^T H^{-1} g_i for every row g_i of ``G_train``."""
    U = engine.solve_hessian(H, np.asarray(G_train, dtype=np.float64).T)
    return -(U.T @ np.asarray(g_test, dtype=np.float64)), U


class InfluenceCache:
    """Factorized final-layer Hessian and inverse-Hessian-vector products for a
    training set.  Solves are done once; test points only need their own
    loss gradient."""

    def __init__(self, model, X, y, damping=DEFAULT_DAMPING):
        self.model = model
        self.damping = damping
        self.version = param_version(model)
        self.y = np.asarray(y, dtype=np.int64)
        H = engine.hessian_final_layer(model, X, self.y, damping)
        try:
            self.factor = linalg.cho_factor(H)
        except linalg.LinAlgError as exc:
            raise SingularHessian(f"final-layer Hessian not positive definite: {exc}") from exc
        self.G = final_layer_grads(model, X, self.y)
        self.U = linalg.cho_solve(self.factor, self.G.T)  # (p, n)
        if not np.all(np.isfinite(self.U)):
            raise SingularHessian("non-finite inverse-Hessian-vector product")

    def check(self, model):
        if param_version(model) != self.version:
            raise ValueError("influence cache was built for different parameters")

    def influences(self, x, label):
        g = final_layer_grads(self.model, x, [label])[0]
        return -(g @ self.U)

    def records(self, x, label):
        infl = self.influences(x, label)
        order = np.argsort(-infl, kind="stable")
        return [InfluenceRecord(int(i), float(infl[i]), self.U[:, i]) for i in order]


def _cache_for(model, train_set, damping, cache):
    if cache is not None:
        cache.check(model)
        return cache
    X, y = train_set
    return InfluenceCache(model, X, y, damping)


def influence_all(model, train_set, z_t, damping=DEFAULT_DAMPING, cache=None):
    """Influence of every training point on ``z_t = (x, label)``, most
    influential first."""
    cache = _cache_for(model, train_set, damping, cache)
    return cache.records(*z_t)


def objective_grad(model, x, label, u):
    """grad_x of Phi(x) = grad_theta L((x, label))^T u over the final layer.

    With r = softmax(Wh + b) - e_label and a = U_W h + u_b, Phi = r^T a and
    dPhi/dh = U_W^T r + W^T (p * a - p (p . a)); the rest is ordinary
    back-propagation from the final layer's input down to x.
    """
    X, _ = engine._as_batch(model, x)
    k = model.final_dense_index()
    W, b = model.layers[k].W, model.layers[k].b
    c, f = W.shape
    Uw, ub = u[:c * f].reshape(c, f), u[c * f:]
    cache = engine._run(model, X)
    h = engine._run_partial(model, X, k)[0]
    p = engine.softmax(h @ W.T + b)
    r = p.copy()
    r[label] -= 1.0
    a = Uw @ h + ub
    g = (Uw.T @ r + W.T @ (p * a - p * (p @ a)))[None]
    for i in range(k - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, engine.Activation):
            g = cache.d1[i] * g
        else:
            g = layer.backward(g, cache.ctx[i])
    g = g[0]
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("influence objective gradient is not finite")
    return g


def top_influence_objective_grad(model, z_t, top_m=DEFAULT_TOP_M, train_set=None,
                                 damping=DEFAULT_DAMPING, cache=None):
    """Gradient (before the sign) of the summed objective over the ``top_m``
    most influential training points."""
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    cache = _cache_for(model, train_set, damping, cache)
    x, label = z_t
    infl = cache.influences(x, label)
    top = np.argsort(-infl, kind="stable")[:top_m]
    return objective_grad(model, x, label, cache.U[:, top].sum(axis=1))


def influence_attack_direction(model, z_t, top_m=DEFAULT_TOP_M, epsilon=8 / 255, train_set=None,
                               damping=DEFAULT_DAMPING, cache=None):
    """delta = -epsilon * sign(grad_x sum_i grad L(z_t)^T H^{-1} grad L(z_(i)))."""
    x = np.asarray(z_t[0], dtype=np.float64)
    if epsilon == 0:
        return np.zeros_like(x)
    g = top_influence_objective_grad(model, z_t, top_m, train_set, damping, cache)
    return -epsilon * np.sign(g)


@dataclass
class InfluenceAttackOutcome:
    gradient: metrics.MetricReport
    random: metrics.MetricReport
    gradient_preserved: bool
    random_preserved: bool
    before: np.ndarray
    after_gradient: np.ndarray
    after_random: np.ndarray


def _report(before, after, k=TOP_K):
    rho = metrics.spearman(before, after) if np.ptp(before) > 0 and np.ptp(after) > 0 else 1.0
    return metrics.MetricReport(rho, metrics.topk_intersection(before, after, k), k, 0.0)


def influence_attack_eval(model, train_set, z_t, epsilon, seed=0, top_m=DEFAULT_TOP_M,
                          damping=DEFAULT_DAMPING, cache=None, value_range=(0.0, 1.0)):
    """Gradient-sign versus random-sign perturbation of one test point.

    Rank correlation is taken over all training influences; intersection
    over the top five.
    """
    from .attacks import random_sign_perturbation

    cache = _cache_for(model, train_set, damping, cache)
    x, label = np.asarray(z_t[0], dtype=np.float64), int(z_t[1])
    pred = int(np.argmax(engine.forward(model, x)))
    before = cache.influences(x, label)
    x_g = x + influence_attack_direction(model, (x, label), top_m, epsilon, cache=cache)
    if value_range is not None:
        x_g = np.clip(x_g, *value_range)
    x_r = random_sign_perturbation(x, epsilon, seed, value_range)
    after_g, after_r = cache.influences(x_g, label), cache.influences(x_r, label)
    return InfluenceAttackOutcome(
        _report(before, after_g), _report(before, after_r),
        int(np.argmax(engine.forward(model, x_g))) == pred,
        int(np.argmax(engine.forward(model, x_r))) == pred,
        before, after_g, after_r)
