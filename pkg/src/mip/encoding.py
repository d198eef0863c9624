"""Temporal and positional encodings and the per-interaction embedding."""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


class EncodingConfig(BaseModel):
    """One encoding block (temporal or positional).

    ``dim`` is the sinusoid length and also its frequency divisor; one-hot and
    two-hot vectors have ``bucket_count`` entries.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["none", "sinusoid", "onehot", "twohot"] = "sinusoid"
    dim: int = 8
    max_scale: float = 1e4
    base: float = 2.0
    bucket_count: int = 16

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "sinusoid" and (self.dim < 2 or self.dim % 2):
            raise ValueError(f"sinusoid dim must be even and >= 2, got {self.dim}")
        if self.kind in ("onehot", "twohot"):
            if self.base <= 1:
                raise ValueError("bucket base must exceed 1")
            if self.bucket_count < 2:
                raise ValueError("bucket_count must be >= 2")
        return self

    @property
    def length(self) -> int:
        if self.kind == "none":
            return 0
        if self.kind == "sinusoid":
            return self.dim
        return self.bucket_count


NONE = EncodingConfig(kind="none")


def sinusoid_encode(t: float, cfg: EncodingConfig) -> np.ndarray:
    return sinusoid_batch(np.array([t], dtype=float), cfg)[0]


def sinusoid_batch(t: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    if cfg.dim % 2:
        raise ValueError(f"sinusoid dim must be even, got {cfg.dim}")
    m = np.arange(cfg.dim // 2)
    freq = cfg.max_scale ** (2.0 * m / cfg.dim)
    arg = np.asarray(t, dtype=float)[:, None] / freq[None, :]
    out = np.empty((arg.shape[0], cfg.dim))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def _bucket(t: float, base: float, k: int) -> int:
    # index i with t in [b^i, b^(i+1)); [0, b) is bucket 0
    if t < base:
        return 0
    i = int(math.floor(math.log(t) / math.log(base)))
    # guard against log rounding at exact powers
    if base ** (i + 1) <= t:
        i += 1
    elif base**i > t:
        i -= 1
    return min(i, k - 1)


def onehot_encode(t: float, cfg: EncodingConfig) -> np.ndarray:
    if t < 0:
        raise ValueError(f"timestamp must be non-negative, got {t}")
    out = np.zeros(cfg.bucket_count)
    out[_bucket(t, cfg.base, cfg.bucket_count)] = 1.0
    return out


def twohot_encode(t: float, cfg: EncodingConfig) -> np.ndarray:
    """Interpolate between the two buckets around ``log_b(t)``.

    For ``b^i <= t < b^(i+1)`` entry ``i`` gets ``log_b(t) - i`` and entry
    ``i+1`` gets ``i + 1 - log_b(t)``. Values below 1 (including 0) put all
    mass on entry 0; values at or past ``b^(k-1)`` on the last entry.
    """
    if t < 0:
        raise ValueError(f"timestamp must be non-negative, got {t}")
    k = cfg.bucket_count
    out = np.zeros(k)
    if t < 1.0:
        out[0] = 1.0
        return out
    u = math.log(t) / math.log(cfg.base)
    i = int(math.floor(u))
    if cfg.base ** (i + 1) <= t:
        i += 1
    elif cfg.base**i > t:
        i -= 1
    if i >= k - 1:
        out[k - 1] = 1.0
        return out
    frac = min(max(u - i, 0.0), 1.0)
    out[i] = frac
    out[i + 1] = 1.0 - frac
    return out


def encode(values: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Encode a vector of timestamps or positions into an (n, length) block."""
    values = np.asarray(values, dtype=float)
    if cfg.kind == "none":
        return np.zeros((values.shape[0], 0))
    if cfg.kind == "sinusoid":
        return sinusoid_batch(values, cfg)
    fn = onehot_encode if cfg.kind == "onehot" else twohot_encode
    return np.stack([fn(float(v), cfg) for v in values]) if values.size else np.zeros((0, cfg.length))


def build_interaction_embedding(p, t: float, j: int, temporal: EncodingConfig, positional: EncodingConfig):
    """``[p; temporal(t); positional(j)]`` for a single interaction."""
    p = np.asarray(p, dtype=float)
    return np.concatenate([p, encode([t], temporal)[0], encode([j], positional)[0]])


def interaction_embeddings(
    P: np.ndarray, times: np.ndarray, temporal: EncodingConfig, positional: EncodingConfig
) -> np.ndarray:
    """Stack of interaction embeddings for a whole sequence (positions 0..l-1)."""
    P = np.asarray(P, dtype=float)
    times = np.asarray(times, dtype=float)
    if P.shape[0] != times.shape[0]:
        raise ValueError(f"{P.shape[0]} item embeddings but {times.shape[0]} timestamps")
    pos = np.arange(P.shape[0], dtype=float)
    return np.concatenate([P, encode(times, temporal), encode(pos, positional)], axis=1)
