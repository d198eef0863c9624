"""Cluster-masked multi-head self-attention user encoder.

Scores are ``S[h, i, j] = key_h(e_i) . query_h(e_j) / sqrt(d_model)`` and are
normalized over the key index ``i`` for every query ``j``. Values are the raw
item embeddings; there is no value projection. The mask is applied after the
softmax, so in-cluster coefficients for a query sum to at most one.

Projection weights are stored input-major: ``wq`` has shape
``(heads, embed_len, d_model)`` and a row vector ``e`` projects as ``e @ wq[h]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clustering import ClusterAssignment, ClusterSpec, assignment_to_mask, last_indices
from .numerics import Param, softmax


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_encoder_params(cfg, rng: np.random.Generator) -> dict[str, Param]:
    H, de, dm, d, hid = cfg.heads, cfg.embed_len, cfg.d_model, cfg.d, cfg.ffn_hidden
    return {
        "attn.wq": Param("attn.wq", glorot(rng, de, dm, (H, de, dm))),
        "attn.bq": Param("attn.bq", np.zeros((H, dm))),
        "attn.wk": Param("attn.wk", glorot(rng, de, dm, (H, de, dm))),
        # adds q_j . b_k to every key of query j; the key softmax cancels it
        "attn.bk": Param("attn.bk", np.zeros((H, dm)), trainable=False),
        "fuse.w1": Param("fuse.w1", glorot(rng, H * d, hid, (H * d, hid))),
        "fuse.b1": Param("fuse.b1", np.zeros(hid)),
        "fuse.w2": Param("fuse.w2", glorot(rng, hid, d, (hid, d))),
        "fuse.b2": Param("fuse.b2", np.zeros(d)),
    }


def attention_scores(E, wq, bq, wk, bk) -> np.ndarray:
    """Single-head score matrix; ``S[i, j]`` pairs key ``i`` with query ``j``."""
    E = np.asarray(E, dtype=float)
    q = E @ wq + bq
    k = E @ wk + bk
    return (k @ q.T) / math.sqrt(q.shape[1])


def attention_weights(S) -> np.ndarray:
    """Softmax over the key index: every column sums to one."""
    return softmax(np.asarray(S, dtype=float), axis=0)


def context_vectors(A, M, P) -> np.ndarray:
    """Per-head context vectors ``phi[h, j] = sum_i A[h, i, j] M[i, j] p_i``.

    ``A`` may be a single (l, l) matrix or a (heads, l, l) stack.
    """
    A = np.asarray(A, dtype=float)
    B = A * M
    if B.ndim == 2:
        return B.T @ P
    return B.transpose(0, 2, 1) @ P


def fuse_heads(phi_heads, w1, b1, w2, b2, dropout_mask=None) -> np.ndarray:
    """``W2 tanh(W1 drop(concat_h phi_h) + b1) + b2`` at every position."""
    H, l, d = phi_heads.shape
    x = phi_heads.transpose(1, 0, 2).reshape(l, H * d)
    if dropout_mask is not None:
        x = x * dropout_mask
    return np.tanh(x @ w1 + b1) @ w2 + b2


@dataclass
class EncoderCache:
    E: np.ndarray
    P: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Xd: np.ndarray
    T: np.ndarray
    drop: np.ndarray | None


def encoder_forward(params: dict[str, Param], E, P, M, drop=None) -> tuple[np.ndarray, EncoderCache]:
    """All heads at once; returns the fused context vectors (l, d) and a cache."""
    wq, bq = params["attn.wq"].value, params["attn.bq"].value
    wk, bk = params["attn.wk"].value, params["attn.bk"].value
    l = E.shape[0]
    H, _, dm = wq.shape
    Q = E @ wq + bq[:, None, :]
    K = E @ wk + bk[:, None, :]
    S = (K @ Q.transpose(0, 2, 1)) / math.sqrt(dm)
    A = softmax(S, axis=1)
    B = A * M
    ph = B.transpose(0, 2, 1) @ P
    X = ph.transpose(1, 0, 2).reshape(l, -1)
    Xd = X * drop if drop is not None else X
    T = np.tanh(Xd @ params["fuse.w1"].value + params["fuse.b1"].value)
    Phi = T @ params["fuse.w2"].value + params["fuse.b2"].value
    return Phi, EncoderCache(E, P, M, Q, K, A, B, Xd, T, drop)


def encoder_backward(params: dict[str, Param], cache: EncoderCache | None, dPhi: np.ndarray):
    """Accumulate encoder parameter grads; return (dE, dP) for the inputs.

    ``dP`` is the gradient through the value path only; the item part of the
    interaction embedding is the first ``d`` columns of ``dE``.
    """
    if cache is None:
        raise RuntimeError("encoder_backward called without a forward cache")
    c = cache
    w1, w2 = params["fuse.w1"].value, params["fuse.w2"].value
    wq, wk = params["attn.wq"].value, params["attn.wk"].value
    H, _, dm = wq.shape
    l, d = c.P.shape
    params["fuse.w2"].grad += c.T.T @ dPhi
    params["fuse.b2"].grad += dPhi.sum(axis=0)
    dU = (dPhi @ w2.T) * (1.0 - c.T * c.T)
    params["fuse.w1"].grad += c.Xd.T @ dU
    params["fuse.b1"].grad += dU.sum(axis=0)
    dX = dU @ w1.T
    if c.drop is not None:
        dX = dX * c.drop
    dph = dX.reshape(l, H, d).transpose(1, 0, 2)
    dB = c.P @ dph.transpose(0, 2, 1)
    dP = np.einsum("hij,hjd->id", c.B, dph)
    dA = dB * c.M
    dS = c.A * (dA - np.sum(c.A * dA, axis=1, keepdims=True))
    dS /= math.sqrt(dm)
    dK = dS @ c.Q
    dQ = dS.transpose(0, 2, 1) @ c.K
    params["attn.wq"].grad += c.E.T @ dQ
    params["attn.bq"].grad += dQ.sum(axis=1)
    params["attn.wk"].grad += c.E.T @ dK
    params["attn.bk"].grad += dK.sum(axis=1)
    dE = np.einsum("hlm,hem->le", dQ, wq) + np.einsum("hlm,hem->le", dK, wk)
    return dE, dP


@dataclass
class MultiInterestUser:
    """Multi-interest user embeddings ``Z`` picked from the context vectors."""

    Z: np.ndarray
    assignment: ClusterAssignment
    phi: np.ndarray
    mu: np.ndarray
    cache: EncoderCache


def encode_user(
    P,
    E,
    params: dict[str, Param],
    clusterer: ClusterSpec,
    metadata_present: bool,
    assignment: ClusterAssignment | None = None,
    drop=None,
) -> MultiInterestUser:
    """Run the encoder on one sequence and select one embedding per cluster.

    With item metadata the items themselves are clustered and the mask
    restricts attention to same-cluster items. Without metadata the mask is
    all ones and the fused context vectors are clustered afterwards. A
    precomputed ``assignment`` skips the clustering call.
    """
    P = np.asarray(P, dtype=float)
    l = P.shape[0]
    if l == 0:
        raise ValueError("cannot encode an empty sequence")
    if metadata_present:
        if assignment is None:
            assignment = clusterer(P)
        M = assignment_to_mask(assignment)
        phi, cache = encoder_forward(params, E, P, M, drop)
    else:
        phi, cache = encoder_forward(params, E, P, np.ones((l, l)), drop)
        if assignment is None:
            assignment = clusterer(phi)
    mu = last_indices(assignment)
    return MultiInterestUser(Z=phi[mu], assignment=assignment, phi=phi, mu=mu, cache=cache)
