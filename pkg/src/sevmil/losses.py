"""Severity-aware classification losses with analytic logit gradients.

Every loss takes per-level logits, applies a softmax internally and returns a
:class:`LossValueAndGrad`.  Logits for one level may be a vector ``(C,)`` or a
batch ``(N, C)``; the value is the sum over samples and levels, and the
gradient has the same shape as the logits.

Each loss is written as ``L(p)``; its derivative with respect to the
probabilities is pushed through the softmax Jacobian by
:func:`softmax_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hierarchy import Hierarchy

EPS = 1e-12


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.6
    lambda1: float = 2.0
    lambda2: float = 1.0
    delta_co2: float = 0.05
    lambda_co2: float = 1.0
    alpha_cdw: float = 1.0
    alpha_hxe: float = 0.1
    class_weights: tuple | None = None


@dataclass
class LossValueAndGrad:
    value: float
    grads: list[np.ndarray]
    flags: frozenset[str] = field(default_factory=frozenset)

    def __add__(self, other: "LossValueAndGrad") -> "LossValueAndGrad":
        return LossValueAndGrad(self.value + other.value,
                                [a + b for a, b in zip(self.grads, other.grads)],
                                self.flags | other.flags)

    def scale(self, c: float) -> "LossValueAndGrad":
        return LossValueAndGrad(c * self.value, [c * g for g in self.grads], self.flags)


@dataclass(frozen=True)
class LossWeightMatrix:
    level: int
    entries: np.ndarray
    alpha: float


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain ``dL/dp`` through the softmax: ``p * (g - <g, p>)``."""
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def _clog(x):
    return np.log(np.maximum(x, EPS))


def _dclog(x):
    # derivative of log(max(x, EPS))
    return np.where(x > EPS, 1.0 / np.maximum(x, EPS), 0.0)


def _prep(logits, targets):
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {y.shape[0]} targets")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("target index out of range")
    return z, y, single


def _levels(logits_per_level, targets_per_level):
    if len(logits_per_level) != len(targets_per_level):
        raise ValueError(f"{len(logits_per_level)} logit levels but {len(targets_per_level)} target levels")
    return zip(logits_per_level, targets_per_level)


def _out(grad, single):
    return grad[0] if single else grad


def _ce_level(z, y, weights=None):
    p = softmax(z)
    rows = np.arange(len(y))
    py = p[rows, y]
    w = np.ones(len(y)) if weights is None else weights[y]
    value = float(np.sum(-w * _clog(py)))
    g = np.zeros_like(p)
    g[rows, y] = -w * _dclog(py)
    return value, softmax_backward(p, g)


def cross_entropy(logits_per_level: Sequence, targets_per_level: Sequence) -> LossValueAndGrad:
    value, grads = 0.0, []
    for logits, targets in _levels(logits_per_level, targets_per_level):
        z, y, single = _prep(logits, targets)
        v, g = _ce_level(z, y)
        value += v
        grads.append(_out(g, single))
    return LossValueAndGrad(value, grads)


def weighted_ce(logits_per_level, targets_per_level, class_weights) -> LossValueAndGrad:
    if len(class_weights) != len(logits_per_level):
        raise ValueError("need one weight vector per level")
    value, grads = 0.0, []
    for (logits, targets), w in zip(_levels(logits_per_level, targets_per_level), class_weights):
        z, y, single = _prep(logits, targets)
        w = np.asarray(w, dtype=float)
        if w.shape != (z.shape[1],):
            raise ValueError(f"weight vector of length {w.size} for {z.shape[1]} classes")
        if np.any(w <= 0):
            raise ValueError("class weights must be positive")
        v, g = _ce_level(z, y, w)
        value += v
        grads.append(_out(g, single))
    return LossValueAndGrad(value, grads)


def build_loss_weights(hierarchy: Hierarchy, alpha: float) -> list[LossWeightMatrix]:
    """``M[i, j] = alpha * |i - j|`` where predicting ``i`` for true ``j`` is severe, else 1."""
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    out = []
    for h in range(hierarchy.depth):
        n = hierarchy.n_classes(h)
        idx = np.arange(n)
        dist = np.abs(idx[:, None] - idx[None, :]).astype(float)
        M = np.where(hierarchy.severe_mask(h), alpha * dist, 1.0)
        M.setflags(write=False)
        out.append(LossWeightMatrix(h, M, alpha))
    return out


def msce(logits_per_level, targets_per_level, weights: Sequence[LossWeightMatrix]) -> LossValueAndGrad:
    """Cross-entropy scaled by the directional weight ``w = sum_i p[i] * M[i, y]``."""
    if len(weights) != len(logits_per_level):
        raise ValueError("need one weight matrix per level")
    value, grads = 0.0, []
    for (logits, targets), W in zip(_levels(logits_per_level, targets_per_level), weights):
        z, y, single = _prep(logits, targets)
        M = W.entries
        if M.shape != (z.shape[1], z.shape[1]):
            raise ValueError(f"weight matrix {M.shape} does not match {z.shape[1]} classes")
        p = softmax(z)
        rows = np.arange(len(y))
        py = p[rows, y]
        col = M[:, y].T                      # (N, C): M[i, y_n]
        w = np.sum(p * col, axis=1)
        ce = -_clog(py)
        value += float(np.sum(w * ce))
        g = col * ce[:, None]
        g[rows, y] += w * -_dclog(py)
        grads.append(_out(softmax_backward(p, g), single))
    return LossValueAndGrad(value, grads)


def hierarchy_alignment(logits_per_level, hierarchy: Hierarchy) -> LossValueAndGrad:
    """Sum of Jensen-Shannon divergences between each level and its aggregated child level."""
    H = len(logits_per_level)
    if H != hierarchy.depth:
        raise ValueError(f"{H} logit levels for a {hierarchy.depth}-level hierarchy")
    zs = [np.asarray(z, dtype=float) for z in logits_per_level]
    single = zs[0].ndim == 1
    ps = [softmax(np.atleast_2d(z)) for z in zs]
    gp = [np.zeros_like(p) for p in ps]
    value = 0.0
    for h in range(H - 1):
        A = hierarchy.aggregation_matrix(h + 1)
        p = ps[h]
        q = ps[h + 1] @ A.T
        m = 0.5 * (p + q)
        value += float(np.sum(0.5 * (p * (_clog(p) - _clog(m)) + q * (_clog(q) - _clog(m)))))
        gp[h] += 0.5 * (_clog(p) - _clog(m))
        gp[h + 1] += (0.5 * (_clog(q) - _clog(m))) @ A
    grads = [_out(softmax_backward(p, g), single) for p, g in zip(ps, gp)]
    return LossValueAndGrad(value, grads)


def combined_loss(logits_per_level, targets_per_level, weights, hierarchy: Hierarchy,
                  hp: HyperParams) -> LossValueAndGrad:
    """``lambda1 * msce + lambda2 * hierarchy_alignment``."""
    out = msce(logits_per_level, targets_per_level, weights).scale(hp.lambda1)
    return out + hierarchy_alignment(logits_per_level, hierarchy).scale(hp.lambda2)


def _leaf_ancestors(hierarchy: Hierarchy) -> list[np.ndarray]:
    n = hierarchy.n_classes(hierarchy.finest)
    return [np.array([hierarchy.ancestor(hierarchy.finest, c, h) for c in range(n)])
            for h in range(hierarchy.depth)]


def hxe(logits_finest, targets, hierarchy: Hierarchy, alpha_hxe: float) -> LossValueAndGrad:
    """Hierarchical cross-entropy on the finest-level softmax.

    Along the target's leaf-to-root path, each conditional
    ``p(node | parent) = mass(node) / mass(parent)`` is weighted by
    ``exp(-alpha * height)`` where the leaf has height 0 and the coarsest
    level below the root has height ``depth - 1``.
    """
    if hierarchy.depth < 2:
        raise ValueError("hxe needs at least two hierarchy levels")
    z, y, single = _prep(logits_finest, targets)
    if z.shape[1] != hierarchy.n_classes(hierarchy.finest):
        raise ValueError("logits do not match the finest level")
    p = softmax(z)
    anc = _leaf_ancestors(hierarchy)
    H = hierarchy.depth
    # masks[k]: (N, C) indicator of leaves below the path node at height k; height H is the root
    masks = []
    for k in range(H):
        level = H - 1 - k
        masks.append(anc[level][None, :] == anc[level][y][:, None])
    masks.append(np.ones_like(p, dtype=bool))
    mass = [np.sum(p * m, axis=1) for m in masks]
    flags = set()
    if any(np.any(s <= EPS) for s in mass):
        flags.add("clamped-zero-mass-node")
    value = 0.0
    g = np.zeros_like(p)
    for k in range(H):
        c = np.exp(-alpha_hxe * k)
        value += float(np.sum(-c * (_clog(mass[k]) - _clog(mass[k + 1]))))
        g -= c * (masks[k] * _dclog(mass[k])[:, None] - masks[k + 1] * _dclog(mass[k + 1])[:, None])
    return LossValueAndGrad(value, [_out(softmax_backward(p, g), single)], frozenset(flags))


def co2(logits, targets, delta: float, lambda_co2: float) -> LossValueAndGrad:
    """Cross-entropy plus a unimodality hinge around the target class.

    Above the target (``c >= t``) mass must decrease by at least ``delta``
    per step; below it (``c < t``) it must increase.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    z, y, single = _prep(logits, targets)
    ce, g_ce = _ce_level(z, y)
    p = softmax(z)
    C = p.shape[1]
    c = np.arange(C - 1)[None, :]
    above = c >= y[:, None]                  # penalise p[c+1] - p[c] + delta
    diff = p[:, 1:] - p[:, :-1]              # p[c+1] - p[c]
    arg = np.where(above, delta + diff, delta - diff)
    active = arg > 0
    value = ce + lambda_co2 * float(np.sum(np.where(active, arg, 0.0)))
    s = np.where(active, np.where(above, 1.0, -1.0), 0.0) * lambda_co2
    g = np.zeros_like(p)
    g[:, 1:] += s
    g[:, :-1] -= s
    return LossValueAndGrad(value, [_out(g_ce + softmax_backward(p, g), single)])


def cdw_ce(logits, targets, alpha_cdw: float) -> LossValueAndGrad:
    """Class-distance weighted CE: ``-sum_c log(1 - p[c]) * |c - t|**alpha``."""
    z, y, single = _prep(logits, targets)
    p = softmax(z)
    C = p.shape[1]
    dist = np.abs(np.arange(C)[None, :] - y[:, None]).astype(float) ** alpha_cdw
    q = 1.0 - p
    flags = frozenset({"clamped-log-argument"}) if np.any((q <= EPS) & (dist > 0)) else frozenset()
    value = float(np.sum(-dist * _clog(q)))
    g = dist * _dclog(q)
    return LossValueAndGrad(value, [_out(softmax_backward(p, g), single)], flags)
