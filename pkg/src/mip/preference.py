"""Cluster weights, user-item scoring and training objectives.

A user with embeddings ``Z`` and cluster weights ``w`` scores an item ``p`` as
``y = max_c beta * w_c * (z_c . p)``; ``beta`` is 1 except under the triplet
objective. The max routes gradient to a single cluster; ties go to the
lowest index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .attention import glorot
from .clustering import ClusterAssignment
from .numerics import Param

PROB_CLAMP = 1e-12


def init_weight_params(cfg, rng: np.random.Generator) -> dict[str, Param]:
    """Cluster-weight FFN. The output layer starts at zero with bias 1, so an
    untrained weight module gives every cluster weight exactly 1."""
    n_in, hid = cfg.weight_input_len, cfg.weight_hidden
    return {
        "weight.w1": Param("weight.w1", glorot(rng, n_in, hid, (n_in, hid))),
        "weight.b1": Param("weight.b1", np.zeros(hid)),
        "weight.w2": Param("weight.w2", np.zeros((hid, 1))),
        "weight.b2": Param("weight.b2", np.ones(1)),
    }


def weight_inputs(Z, labels, tau, max_len: int) -> np.ndarray:
    """Rows ``[z_c; 1[C_1=c] tau_1; ...; 1[C_L=c] tau_L]`` zero-padded to ``max_len`` slots."""
    Z = np.asarray(Z, dtype=float)
    tau = np.asarray(tau, dtype=float)
    lam, d = Z.shape
    l, dt = tau.shape
    if l > max_len:
        tau, labels = tau[-max_len:], np.asarray(labels)[-max_len:]
        l = max_len
    X = np.zeros((lam, d + max_len * dt))
    X[:, :d] = Z
    if dt:
        onehot = (np.asarray(labels)[None, :] == np.arange(lam)[:, None]).astype(float)
        X[:, d : d + l * dt] = (onehot[:, :, None] * tau[None, :, :]).reshape(lam, l * dt)
    return X


@dataclass
class WeightCache:
    X: np.ndarray
    T: np.ndarray


def learned_weights(Z, labels, tau, params: dict[str, Param], max_len: int):
    """Per-cluster weights from the weight FFN; returns (w, cache)."""
    X = weight_inputs(Z, labels, tau, max_len)
    T = np.tanh(X @ params["weight.w1"].value + params["weight.b1"].value)
    w = (T @ params["weight.w2"].value + params["weight.b2"].value)[:, 0]
    return w, WeightCache(X, T)


def learned_weights_backward(params: dict[str, Param], cache: WeightCache, dw: np.ndarray, d: int) -> np.ndarray:
    """Accumulate weight-FFN grads; return the gradient w.r.t. ``Z``."""
    g = dw[:, None]
    params["weight.w2"].grad += cache.T.T @ g
    params["weight.b2"].grad += g.sum(axis=0)
    dU = (g @ params["weight.w2"].value.T) * (1.0 - cache.T * cache.T)
    params["weight.w1"].grad += cache.X.T @ dU
    params["weight.b1"].grad += dU.sum(axis=0)
    return (dU @ params["weight.w1"].value.T)[:, :d]


def exp_decay_weights(c: ClusterAssignment, timestamps, eps: float = 0.01, t_now: float | None = None) -> np.ndarray:
    """Sum over each cluster's items of ``exp(-eps (t_now - t_i))``.

    ``t_now`` defaults to the last engagement time.
    """
    t = np.asarray(timestamps, dtype=float)
    t_now = float(t.max()) if t_now is None else t_now
    contrib = np.exp(-eps * (t_now - t))
    return np.bincount(c.labels, weights=contrib, minlength=c.n_clusters)


@dataclass(frozen=True)
class ScoredPair:
    y: float
    probability: float
    cluster: int


def sigmoid(y):
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    e = np.exp(y[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def score_candidates(Z, w, P, beta: float = 1.0):
    """Scores for every candidate row of ``P``.

    Returns:
        (y, argmax cluster per candidate, dot products ``P @ Z.T``)
    """
    s = np.asarray(P, dtype=float) @ np.asarray(Z, dtype=float).T
    terms = beta * (s * np.asarray(w, dtype=float)[None, :])
    arg = np.argmax(terms, axis=1)
    return terms[np.arange(terms.shape[0]), arg], arg, s


def score(Z, w, p, beta: float = 1.0) -> ScoredPair:
    y, arg, _ = score_candidates(Z, w, np.asarray(p, dtype=float)[None, :], beta)
    return ScoredPair(float(y[0]), float(sigmoid(y)[0]), int(arg[0]))


def score_backward(Z, w, P, arg, s, dy, beta: float = 1.0):
    """Route ``dy`` through the max to the winning cluster.

    Returns:
        (dZ, dw, dP, dbeta)
    """
    n = dy.shape[0]
    rows = np.arange(n)
    wa = w[arg]
    sa = s[rows, arg]
    dterm = dy * beta
    dZ = np.zeros_like(Z)
    np.add.at(dZ, arg, (dterm * wa)[:, None] * P)
    dw = np.bincount(arg, weights=dterm * sa, minlength=Z.shape[0])
    dP = (dterm * wa)[:, None] * Z[arg]
    dbeta = float(np.sum(dy * wa * sa))
    return dZ, dw, dP, dbeta


def nll_terms(y, labels):
    """Summed binary NLL of ``sigmoid(y)`` and its gradient w.r.t. ``y``.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]``; the gradient is zero
    where the clamp is active.
    """
    y = np.asarray(y, dtype=float)
    lab = np.asarray(labels, dtype=float)
    p = sigmoid(y)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.sum(lab * np.log(pc) + (1.0 - lab) * np.log(1.0 - pc))
    dy = p - lab
    dy[(p != pc)] = 0.0
    return float(loss), dy


def nll_loss(probabilities, labels) -> float:
    """Mean NLL over all pairs given probabilities ``sigmoid(y)``."""
    p = np.clip(np.asarray(probabilities, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    lab = np.asarray(labels, dtype=float)
    if p.size == 0:
        return 0.0
    return float(-np.mean(lab * np.log(p) + (1.0 - lab) * np.log(1.0 - p)))


def triplet_terms(y_pos, y_neg, alpha: float):
    """Summed hinge ``max(0, alpha + y- - y+)`` and grads w.r.t. y+ and y-."""
    y_pos = np.asarray(y_pos, dtype=float)
    y_neg = np.asarray(y_neg, dtype=float)
    viol = alpha + y_neg - y_pos
    active = (viol > 0).astype(float)
    return float(np.sum(viol * active)), -active, active


def triplet_loss(y_pos, y_neg, alpha: float) -> float:
    """Mean hinge triplet loss over aligned positive/negative scores."""
    if alpha <= 0:
        warnings.warn(f"triplet margin alpha={alpha} is not positive", UserWarning)
    y_pos = np.asarray(y_pos, dtype=float)
    if y_pos.size == 0:
        return 0.0
    return triplet_terms(y_pos, y_neg, alpha)[0] / y_pos.size
