"""Ranking metrics, model evaluation with inference-time re-clustering, and
latency profiling."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .clustering import ClusterSpec
from .numerics import adam_step
from .preference import nll_loss, nll_terms, sigmoid


def _average_ranks(x: np.ndarray) -> np.ndarray:
    # 1-based ranks, ties share the mean rank
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    _, start, counts = np.unique(sorted_x, return_index=True, return_counts=True)
    mean_rank = start + (counts + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(mean_rank, counts)
    return ranks


def auc(pos_scores, neg_scores) -> float:
    """P(pos > neg) with ties counted as one half, via the rank-sum statistic."""
    pos = np.asarray(pos_scores, dtype=float).ravel()
    neg = np.asarray(neg_scores, dtype=float).ravel()
    m, n = pos.size, neg.size
    if m == 0 or n == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = _average_ranks(np.concatenate([pos, neg]))
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


def _hits(ranked: Sequence, positives, k: int) -> np.ndarray:
    pos = set(np.asarray(positives).tolist())
    return np.array([x in pos for x in list(ranked)[:k]], dtype=float)


def recall_at_k(ranked, positives, k: int) -> float:
    n_pos = len(positives)
    return float(_hits(ranked, positives, k).sum() / n_pos) if n_pos else 0.0


def precision_at_k(ranked, positives, k: int) -> float:
    return float(_hits(ranked, positives, k).sum() / k)


def _dcg(rel: np.ndarray) -> float:
    return float(np.sum(rel / np.log2(np.arange(2, rel.size + 2))))


def ndcg_at_k(ranked, positives, k: int) -> float:
    """Binary-relevance nDCG; the ideal ranking puts every positive first."""
    rel = _hits(ranked, positives, k)
    ideal = _dcg(np.ones(min(k, len(positives))))
    return _dcg(rel) / ideal if ideal > 0 else 0.0


def relevance_metrics(scores: np.ndarray, labels: np.ndarray, k: int) -> tuple[float, float, float]:
    """(recall, nDCG, precision) at ``k`` for one labelled candidate list."""
    order = np.argsort(-scores, kind="stable")
    rel = labels[order][:k].astype(float)
    n_pos = int(labels.sum())
    recall = rel.sum() / n_pos if n_pos else 0.0
    ideal = _dcg(np.ones(min(k, n_pos)))
    return float(recall), (_dcg(rel) / ideal if ideal > 0 else 0.0), float(rel.sum() / k)


@dataclass
class EvalReport:
    auc: float
    recall_at_k: dict[int, float]
    ndcg_at_k: dict[int, float]
    precision_at_k: dict[int, float]
    nll: float
    k_values: list[int]
    cluster_method: str
    mean_clusters: float
    weight_mode: str
    n_sequences: int
    latency: list[dict] = field(default_factory=list)

    def to_dict(self, stable: bool = False) -> dict:
        d = asdict(self)
        for key in ("recall_at_k", "ndcg_at_k", "precision_at_k"):
            d[key] = {str(k): v for k, v in d[key].items()}
        if stable:
            d.pop("latency")
        return d

    def row(self, k: int | None = None) -> dict:
        k = k or self.k_values[0]
        return {
            "AUC": self.auc,
            f"recall@{k}": self.recall_at_k[k],
            f"nDCG@{k}": self.ndcg_at_k[k],
            f"precision@{k}": self.precision_at_k[k],
            "NLL": self.nll,
        }


def candidates(seq) -> tuple[np.ndarray, np.ndarray]:
    cands = np.concatenate([seq.positives, seq.negatives])
    labels = np.concatenate([np.ones(seq.positives.size), np.zeros(seq.negatives.size)])
    return cands, labels


def evaluate(
    model,
    sequences,
    clusterer: ClusterSpec | None = None,
    k_values=(50,),
    weight_mode: str | None = None,
    assignments: dict | None = None,
) -> EvalReport:
    """Score every sequence's candidates with dropout off and pool the metrics.

    ``clusterer`` replaces the training-time clusterer (method and count)
    without retraining. AUC and NLL are pooled over all pairs of all
    sequences; ranking metrics are averaged per sequence.
    """
    if not sequences:
        raise ValueError("nothing to evaluate")
    mode = weight_mode or model.weight_mode
    spec = clusterer or model.cfg.clusterer
    pos_scores, neg_scores, probs, labs, n_clusters = [], [], [], [], []
    rec = {k: [] for k in k_values}
    ndc = {k: [] for k in k_values}
    pre = {k: [] for k in k_values}
    for idx, seq in enumerate(sequences):
        cands, labels = candidates(seq)
        asg = assignments.get(idx) if assignments is not None else None
        fw = model.forward(seq.items, seq.times, cands, clusterer=spec, weight_mode=mode, assignment=asg)
        y = fw.y
        pos_scores.append(y[labels == 1])
        neg_scores.append(y[labels == 0])
        probs.append(sigmoid(y))
        labs.append(labels)
        n_clusters.append(fw.assignment.n_clusters)
        for k in k_values:
            r, n, p = relevance_metrics(y, labels, k)
            rec[k].append(r)
            ndc[k].append(n)
            pre[k].append(p)
    return EvalReport(
        auc=auc(np.concatenate(pos_scores), np.concatenate(neg_scores)),
        recall_at_k={k: float(np.mean(v)) for k, v in rec.items()},
        ndcg_at_k={k: float(np.mean(v)) for k, v in ndc.items()},
        precision_at_k={k: float(np.mean(v)) for k, v in pre.items()},
        nll=nll_loss(np.concatenate(probs), np.concatenate(labs)),
        k_values=list(k_values),
        cluster_method=spec.label,
        mean_clusters=float(np.mean(n_clusters)),
        weight_mode=mode,
        n_sequences=len(sequences),
    )


@dataclass
class LatencyProbe:
    phase: str
    samples: int
    mean_ms: float
    std_ms: float


def _probe(phase: str, times: list[float], warmup: int) -> LatencyProbe:
    kept = [t * 1e3 for t in times[warmup:]]
    std = statistics.stdev(kept) if len(kept) > 1 else 0.0
    return LatencyProbe(phase, len(kept), statistics.fmean(kept), std)


def profile_latency(model, sequences, samples: int = 50, warmup: int = 5, batch_size: int = 1) -> list[LatencyProbe]:
    """Wall-clock per-call latency of a training step, inference, and clustering.

    Every call handles ``batch_size`` sequences. Inference includes its own
    clustering step; the standalone clustering probe times the clusterer on
    the same inputs. The first ``warmup`` calls of each phase are discarded.
    """
    if not sequences:
        raise ValueError("no sequences to profile")
    total = samples + warmup
    batches = [[sequences[(i * batch_size + j) % len(sequences)] for j in range(batch_size)] for i in range(total)]
    cfg = model.cfg
    spec = cfg.clusterer

    inf_t = []
    for batch in batches:
        t0 = time.perf_counter()
        for seq in batch:
            cands, _ = candidates(seq)
            model.forward(seq.items, seq.times, cands)
        inf_t.append(time.perf_counter() - t0)

    # clustering inputs: item features with metadata, fused context vectors without
    inputs = []
    for batch in batches:
        pts = []
        for seq in batch:
            if cfg.metadata_present:
                pts.append(model.item_matrix[seq.items])
            else:
                cands, _ = candidates(seq)
                pts.append(model.forward(seq.items, seq.times, cands).user.phi)
        inputs.append(pts)
    clu_t = []
    for pts in inputs:
        t0 = time.perf_counter()
        for p in pts:
            spec(p)
        clu_t.append(time.perf_counter() - t0)

    work = model.clone()
    rng = np.random.Generator(np.random.PCG64(0))
    train_t = []
    for step, batch in enumerate(batches, start=1):
        t0 = time.perf_counter()
        work.zero_grad()
        n_pairs = sum(s.positives.size + s.negatives.size for s in batch)
        for seq in batch:
            cands, labels = candidates(seq)
            fw = work.forward(seq.items, seq.times, cands, drop_rng=rng)
            _, dy = nll_terms(fw.y, labels)
            work.backward(fw, dy / n_pairs)
        adam_step(work.param_list(), t=step)
        train_t.append(time.perf_counter() - t0)

    return [_probe("train_step", train_t, warmup), _probe("inference", inf_t, warmup), _probe("clustering", clu_t, warmup)]


def markdown_table(header: list[str], rows: list[list]) -> str:
    def fmt(x):
        return f"{x:.4f}" if isinstance(x, float) else str(x)

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(x) for x in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"
