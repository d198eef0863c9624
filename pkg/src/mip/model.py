"""The assembled model: item lookup, encodings, encoder, weights and scoring."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .attention import MultiInterestUser, encode_user, encoder_backward, init_encoder_params
from .clustering import ClusterAssignment, ClusterSpec
from .config import ModelConfig
from .encoding import encode, interaction_embeddings
from .numerics import Param, make_rng
from .preference import (
    WeightCache,
    exp_decay_weights,
    init_weight_params,
    learned_weights,
    learned_weights_backward,
    score_backward,
    score_candidates,
)


@dataclass
class SequenceForward:
    items: np.ndarray
    cands: np.ndarray
    P: np.ndarray
    Pc: np.ndarray
    tau: np.ndarray
    user: MultiInterestUser
    w: np.ndarray
    wcache: WeightCache | None
    beta: float
    y: np.ndarray
    arg: np.ndarray
    s: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        return self.user.Z

    @property
    def assignment(self) -> ClusterAssignment:
        return self.user.assignment


class MIPModel:
    """Multi-interest user model with learned per-cluster preference weights.

    Items are either looked up in a trainable table (no metadata) or taken
    from a fixed dense feature table (``cfg.metadata_present``).
    """

    def __init__(self, cfg: ModelConfig, n_items: int, features: np.ndarray | None = None, seed: int = 0):
        self.cfg = cfg
        self.n_items = n_items
        self.frozen_weights = False
        rng = make_rng(seed)
        params = init_encoder_params(cfg, rng)
        params.update(init_weight_params(cfg, rng))
        params["beta"] = Param("beta", np.ones(1), trainable=cfg.loss == "triplet" and cfg.learn_beta)
        if cfg.metadata_present:
            if features is None:
                raise ValueError("metadata_present requires a dense feature table")
            features = np.asarray(features, dtype=float)
            if features.shape != (n_items, cfg.d):
                raise ValueError(f"feature table has shape {features.shape}, expected {(n_items, cfg.d)}")
            params["item.features"] = Param("item.features", features, trainable=False)
        else:
            params["item.table"] = Param("item.table", rng.normal(0.0, 0.1, size=(n_items, cfg.d)))
        self.params = params

    @property
    def item_matrix(self) -> np.ndarray:
        key = "item.features" if self.cfg.metadata_present else "item.table"
        return self.params[key].value

    @property
    def weight_mode(self) -> str:
        if self.cfg.weight_mode == "learned" and self.frozen_weights:
            return "equal"
        return self.cfg.weight_mode

    def set_weights_frozen(self, frozen: bool):
        """Stage-1 switch: bypass the weight module with unit weights."""
        self.frozen_weights = frozen
        for name, p in self.params.items():
            if name.startswith("weight."):
                p.trainable = not frozen

    def param_list(self) -> list[Param]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].value[...] = v

    def clone(self) -> "MIPModel":
        return copy.deepcopy(self)

    def forward(
        self,
        items,
        times,
        cands,
        *,
        drop_rng: np.random.Generator | None = None,
        clusterer: ClusterSpec | None = None,
        assignment: ClusterAssignment | None = None,
        weight_mode: str | None = None,
    ) -> SequenceForward:
        """Encode one input sequence and score candidate items.

        ``drop_rng`` switches on training-mode dropout. ``clusterer``
        overrides the configured one (inference re-clustering).
        """
        cfg = self.cfg
        items = np.asarray(items, dtype=np.int64)
        cands = np.asarray(cands, dtype=np.int64)
        times = np.asarray(times, dtype=float)
        if items.size == 0:
            raise ValueError("cannot encode an empty sequence")
        if items.size > cfg.max_len:
            raise ValueError(f"sequence length {items.size} exceeds max_len {cfg.max_len}")
        table = self.item_matrix
        P = table[items]
        Pc = table[cands]
        E = interaction_embeddings(P, times, cfg.temporal, cfg.positional)
        drop = None
        if drop_rng is not None and cfg.dropout > 0:
            keep = drop_rng.random((items.size, cfg.heads * cfg.d)) >= cfg.dropout
            drop = keep / (1.0 - cfg.dropout)
        user = encode_user(
            P, E, self.params, clusterer or cfg.clusterer, cfg.metadata_present, assignment=assignment, drop=drop
        )
        tau = encode(times, cfg.temporal)
        mode = weight_mode or self.weight_mode
        wcache = None
        if mode == "learned":
            w, wcache = learned_weights(user.Z, user.assignment.labels, tau, self.params, cfg.max_len)
        elif mode == "equal":
            w = np.ones(user.assignment.n_clusters)
        elif mode == "exp_decay":
            w = exp_decay_weights(user.assignment, times, cfg.decay_eps)
        else:
            raise ValueError(f"unknown weight mode {mode!r}")
        beta = float(self.params["beta"].value[0]) if cfg.loss == "triplet" else 1.0
        y, arg, s = score_candidates(user.Z, w, Pc, beta)
        return SequenceForward(items, cands, P, Pc, tau, user, w, wcache, beta, y, arg, s)

    def backward(self, fw: SequenceForward, dy: np.ndarray):
        """Accumulate parameter gradients for upstream ``dL/dy``."""
        cfg = self.cfg
        dZ, dw, dPc, dbeta = score_backward(fw.Z, fw.w, fw.Pc, fw.arg, fw.s, dy, fw.beta)
        if cfg.loss == "triplet":
            self.params["beta"].grad[0] += dbeta
        if fw.wcache is not None:
            dZ = dZ + learned_weights_backward(self.params, fw.wcache, dw, cfg.d)
        dPhi = np.zeros_like(fw.user.phi)
        dPhi[fw.user.mu] += dZ
        dE, dP = encoder_backward(self.params, fw.user.cache, dPhi)
        if not cfg.metadata_present:
            g = self.params["item.table"].grad
            np.add.at(g, fw.items, dP + dE[:, : cfg.d])
            np.add.at(g, fw.cands, dPc)
