"""Dense float64 linear algebra, parameters with gradient buffers, Adam, and
a finite-difference gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Random streams
come from :func:`make_rng`, which always uses numpy's PCG64 bit generator
(PCG XSL-RR 128/64) so a seed pins the stream on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when an optimizer step sees a non-finite gradient."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class Param:
    """A named trainable tensor with its gradient buffer and Adam moments."""

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.reset_moments()

    def zero_grad(self):
        self.grad.fill(0.0)

    def reset_moments(self):
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_row(v) -> np.ndarray:
    """Numerically stable softmax of a 1-d vector (max-subtracted)."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        return v.copy()
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    """Stable softmax along ``axis`` of an arbitrary array."""
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle-method tournament: n-1 rounds of n/2 disjoint pairs (n even)
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigen_symmetric(a, tol: float = 1e-10, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by parallel cyclic Jacobi.

    Each round applies n/2 disjoint plane rotations at once (round-robin
    ordering), so a sweep is n-1 vectorized rounds.

    Returns:
        (eigenvalues ascending, eigenvectors as columns)
    """
    a = np.array(a, dtype=DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10):
        raise ValueError("matrix is not symmetric within 1e-10")
    n0 = a.shape[0]
    if n0 == 0:
        return np.zeros(0), np.zeros((0, 0))
    a = 0.5 * (a + a.T)
    n = n0 + (n0 % 2)
    if n != n0:
        # decoupled padding row: its off-diagonals stay exactly zero
        a = np.pad(a, ((0, 1), (0, 1)))
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        # summed directly: total-minus-diagonal cancels away small residues
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * 1e-3 * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            live = np.abs(apq) > 1e-300
            if not live.any():
                continue
            app = a[p, p]
            aqq = a[q, q]
            safe = np.where(live, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(live, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp = a[p, :].copy()
            rq = a[q, :]
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp = a[:, p].copy()
            cq = a[:, q]
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    vals = np.diag(a).copy()
    if n != n0:
        # drop the eigenpair living on the padding coordinate
        pad_col = int(np.argmax(np.abs(v[n0, :])))
        keep = [i for i in range(n) if i != pad_col]
        vals = vals[keep]
        v = v[:n0, keep]
    order = np.argsort(vals, kind="stable")
    return vals[order], v[:, order]


def adam_step(
    params: Iterable[Param],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
):
    """One bias-corrected Adam update, in place, on every trainable param.

    ``t`` is the 1-based step count used for bias correction.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Iterable[Param],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must be deterministic and, each time it is called, compute the
    loss and overwrite the ``grad`` buffers of ``params``. The analytic
    gradient is taken from the first call; every trainable scalar is then
    perturbed by ``±h``. If ``max_entries`` is set, at most that many scalars
    per parameter are probed (chosen with ``rng``).

    Returns:
        max over probed scalars of ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = [p for p in params if p.trainable]
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or make_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ag = analytic[p.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = ag[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    loss_fn()
    return worst
