"""Interaction ingestion, sequence construction, negative sampling, user-level
splits, the split directory format, and a synthetic multi-interest generator.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLIT_FORMAT_VERSION = 1
SECONDS_PER_DAY = 86400.0
POSITIVE_LABELS = frozenset({"", "1", "pos", "positive", "click", "clickthrough", "repin", "re-pin"})
NEGATIVE_LABELS = frozenset({"0", "neg", "negative", "hide", "impression"})


@dataclass
class RawInteraction:
    user: str
    item: str
    timestamp: float
    label: str | None = None

    @property
    def positive(self) -> bool:
        return self.label is None or self.label.lower() in POSITIVE_LABELS


@dataclass
class SequenceExample:
    """One training/evaluation unit: an input window plus its label items."""

    user: str
    items: np.ndarray
    times: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    observed_negatives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "items": self.items.tolist(),
            "times": self.times.tolist(),
            "positives": self.positives.tolist(),
            "negatives": self.negatives.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SequenceExample":
        return cls(
            user=str(d["user"]),
            items=np.asarray(d["items"], dtype=np.int64),
            times=np.asarray(d["times"], dtype=float),
            positives=np.asarray(d["positives"], dtype=np.int64),
            negatives=np.asarray(d["negatives"], dtype=np.int64),
        )


@dataclass
class DatasetSplit:
    train: list[SequenceExample]
    valid: list[SequenceExample]
    test: list[SequenceExample]
    vocab: list[str]
    features: np.ndarray | None = None
    topics: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)
    raw: list = field(default_factory=list, repr=False)

    @property
    def n_items(self) -> int:
        return len(self.vocab)


class DataError(ValueError):
    pass


def ingest(path, time_unit: str = "s") -> list[RawInteraction]:
    """Read ``user,item,timestamp[,label]`` rows (comma or tab separated).

    Timestamps are converted to days (``time_unit`` is ``"s"`` or ``"d"``)
    and shifted per user so each history starts at day 0. Rows are returned
    grouped by user (sorted ids) in chronological order; equal timestamps
    keep file order.
    """
    if time_unit not in ("s", "d"):
        raise DataError(f"unknown time unit {time_unit!r}")
    divisor = SECONDS_PER_DAY if time_unit == "s" else 1.0
    path = Path(path)
    rows: dict[str, list[RawInteraction]] = defaultdict(list)
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split("\t" if "\t" in line else ",")]
            if len(parts) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            try:
                ts = float(parts[2])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            if not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            if not math.isfinite(ts):
                raise DataError(f"{path}:{lineno}: non-finite timestamp")
            label = parts[3] if len(parts) == 4 else None
            rows[parts[0]].append(RawInteraction(parts[0], parts[1], ts / divisor, label))
    out = []
    for user in sorted(rows):
        seq = rows[user]
        ts = [r.timestamp for r in seq]
        if any(b < a for a, b in zip(ts, ts[1:])):
            log.warning("user %s: timestamps out of order, sorting", user)
            seq = sorted(seq, key=lambda r: r.timestamp)
        t0 = seq[0].timestamp
        out.extend(RawInteraction(r.user, r.item, r.timestamp - t0, r.label) for r in seq)
    return out


def ten_core_filter(interactions: list[RawInteraction], min_count: int = 10, iterate: bool = False):
    """Drop items seen fewer than ``min_count`` times.

    With ``iterate`` users are filtered too and both passes repeat to a
    fixpoint.
    """
    cur = list(interactions)
    while True:
        counts = Counter(r.item for r in cur)
        nxt = [r for r in cur if counts[r.item] >= min_count]
        if iterate:
            ucounts = Counter(r.user for r in nxt)
            nxt = [r for r in nxt if ucounts[r.user] >= min_count]
        if not iterate or len(nxt) == len(cur):
            return nxt
        cur = nxt


def build_vocab(interactions) -> list[str]:
    return sorted({r.item for r in interactions})


def _by_user(interactions) -> dict[str, list[RawInteraction]]:
    groups: dict[str, list[RawInteraction]] = defaultdict(list)
    for r in interactions:
        groups[r.user].append(r)
    return {u: groups[u] for u in sorted(groups)}


def build_sequences(interactions, vocab: list[str], min_len: int = 100, input_len: int = 50) -> list[SequenceExample]:
    """Cut each user's history into disjoint ``min_len`` windows.

    The first ``input_len`` items of a window are the input, the rest are
    positive labels; a trailing remainder shorter than ``min_len`` is
    dropped. Input times are shifted to start at day 0.
    """
    index = {item: i for i, item in enumerate(vocab)}
    out = []
    for user, rows in _by_user(interactions).items():
        for start in range(0, len(rows) - min_len + 1, min_len):
            win = rows[start : start + min_len]
            ids = np.array([index[r.item] for r in win], dtype=np.int64)
            t = np.array([r.timestamp for r in win[:input_len]], dtype=float)
            out.append(SequenceExample(user, ids[:input_len], t - t[0], ids[input_len:]))
    return out


def user_histories(interactions, vocab: list[str]) -> dict[str, set[int]]:
    index = {item: i for i, item in enumerate(vocab)}
    hist: dict[str, set[int]] = defaultdict(set)
    for r in interactions:
        if r.item in index:
            hist[r.user].add(index[r.item])
    return hist


def sample_negatives(n_items: int, history, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct items drawn uniformly from outside ``history``."""
    pool = np.setdiff1d(np.arange(n_items), np.fromiter(history, dtype=np.int64, count=len(history)))
    if pool.size < n:
        raise DataError(f"only {pool.size} non-interacted items available, need {n}")
    return rng.choice(pool, size=n, replace=False)


def mix_negatives(observed, random, n: int) -> np.ndarray:
    """Half observed, half random negatives (odd ``n`` favours observed).

    A short observed pool is topped up from the random pool.
    """
    observed = np.asarray(observed, dtype=np.int64)
    random = np.asarray(random, dtype=np.int64)
    n_obs = min((n + 1) // 2, observed.size)
    taken = list(observed[:n_obs])
    seen = set(taken)
    for r in random:
        if len(taken) >= n:
            break
        if r not in seen:
            taken.append(r)
            seen.add(r)
    if len(taken) < n:
        raise DataError(f"could only assemble {len(taken)} of {n} negatives")
    return np.array(taken, dtype=np.int64)


def build_gap_split(
    interactions, vocab: list[str], gap_days: float = 1.0, input_len: int = 50, label_len: int = 50
) -> list[SequenceExample]:
    """Windows whose labels start at least ``gap_days`` after the last input.

    Inputs and positive labels are positive engagements; negative-labelled
    engagements inside the label period become observed negatives.
    """
    index = {item: i for i, item in enumerate(vocab)}
    out = []
    for user, rows in _by_user(interactions).items():
        pos = [r for r in rows if r.positive]
        neg = [r for r in rows if not r.positive]
        k = 0
        while k + input_len <= len(pos):
            inp = pos[k : k + input_len]
            t_last = inp[-1].timestamp
            j = k + input_len
            while j < len(pos) and pos[j].timestamp < t_last + gap_days:
                j += 1
            labels = pos[j : j + label_len]
            if len(labels) < label_len:
                break
            t_end = labels[-1].timestamp
            obs = [index[r.item] for r in neg if t_last + gap_days <= r.timestamp <= t_end]
            t = np.array([r.timestamp for r in inp])
            out.append(
                SequenceExample(
                    user,
                    np.array([index[r.item] for r in inp], dtype=np.int64),
                    t - t[0],
                    np.array([index[r.item] for r in labels], dtype=np.int64),
                    observed_negatives=np.array(obs, dtype=np.int64),
                )
            )
            k = j + label_len
    return out


def split_by_user(
    sequences: list[SequenceExample], vocab, proportions=(0.9, 0.05, 0.05), rng=None, **extra
) -> DatasetSplit:
    """Assign whole users to train/valid/test by the given proportions."""
    users = sorted({s.user for s in sequences})
    rng = rng if rng is not None else np.random.default_rng(0)
    order = list(rng.permutation(len(users)))
    n = len(users)
    n_valid = int(round(proportions[1] * n))
    n_test = int(round(proportions[2] * n))
    if n >= 3:
        n_valid, n_test = max(n_valid, 1), max(n_test, 1)
    test_u = {users[i] for i in order[:n_test]}
    valid_u = {users[i] for i in order[n_test : n_test + n_valid]}
    parts = {"train": [], "valid": [], "test": []}
    for s in sequences:
        key = "test" if s.user in test_u else "valid" if s.user in valid_u else "train"
        parts[key].append(s)
    return DatasetSplit(parts["train"], parts["valid"], parts["test"], list(vocab), **extra)


def load_features(path, vocab: list[str]) -> np.ndarray:
    """Read the ``item,f1,...,fd`` sidecar into a (|vocab|, d) table."""
    index = {item: i for i, item in enumerate(vocab)}
    table = None
    seen = set()
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric feature") from None
            if table is None:
                table = np.zeros((len(vocab), len(vals)))
            if len(vals) != table.shape[1]:
                raise DataError(f"{path}:{lineno}: expected {table.shape[1]} features, got {len(vals)}")
            if row[0] in index:
                table[index[row[0]]] = vals
                seen.add(row[0])
    if table is None:
        raise DataError(f"{path}: no feature rows")
    missing = len(vocab) - len(seen)
    if missing:
        raise DataError(f"{path}: {missing} vocabulary items have no features")
    return table


def prepare(
    interactions: list[RawInteraction],
    *,
    min_count: int = 10,
    iterate_core: bool = False,
    min_len: int = 100,
    input_len: int = 50,
    n_negatives: int = 50,
    gap_days: float | None = None,
    proportions=(0.9, 0.05, 0.05),
    seed: int = 0,
    features_path=None,
) -> DatasetSplit:
    """The full preparation pipeline from raw interactions to a split."""
    rng = np.random.Generator(np.random.PCG64(seed))
    kept = ten_core_filter(interactions, min_count, iterate_core)
    vocab = build_vocab(kept)
    if gap_days is None:
        seqs = build_sequences(kept, vocab, min_len, input_len)
    else:
        seqs = build_gap_split(kept, vocab, gap_days, input_len, min_len - input_len)
    if not seqs:
        raise DataError("no sequences survived preparation")
    hist = user_histories(kept, vocab)
    for s in seqs:
        rand = sample_negatives(len(vocab), hist[s.user], n_negatives, rng)
        s.negatives = mix_negatives(s.observed_negatives, rand, n_negatives) if gap_days is not None else rand
    features = load_features(features_path, vocab) if features_path else None
    return split_by_user(seqs, vocab, proportions, rng, features=features)


def save_split(split: DatasetSplit, out_dir, manifest: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        with (out / f"{name}.jsonl").open("w") as fh:
            for s in getattr(split, name):
                fh.write(json.dumps(s.to_json()) + "\n")
    (out / "vocab.txt").write_text("".join(v + "\n" for v in split.vocab))
    if split.features is not None:
        with (out / "features.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            for item, row in zip(split.vocab, split.features):
                w.writerow([item, *(repr(float(x)) for x in row)])
    if split.topics is not None:
        (out / "topics.txt").write_text("".join(f"{int(t)}\n" for t in split.topics))
    info = {
        "format_version": SPLIT_FORMAT_VERSION,
        "n_items": split.n_items,
        "counts": {k: len(getattr(split, k)) for k in ("train", "valid", "test")},
        "has_features": split.features is not None,
        **split.manifest,
        **(manifest or {}),
    }
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def load_split(path) -> DatasetSplit:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"{path} is not a split directory (no manifest.json)")
    manifest = json.loads(mf.read_text())
    if manifest.get("format_version") != SPLIT_FORMAT_VERSION:
        raise DataError(f"split format version {manifest.get('format_version')} != {SPLIT_FORMAT_VERSION}")
    vocab = (path / "vocab.txt").read_text().splitlines()
    parts = {}
    for name in ("train", "valid", "test"):
        with (path / f"{name}.jsonl").open() as fh:
            parts[name] = [SequenceExample.from_json(json.loads(line)) for line in fh if line.strip()]
    features = load_features(path / "features.csv", vocab) if (path / "features.csv").exists() else None
    topics = None
    if (path / "topics.txt").exists():
        topics = np.array([int(x) for x in (path / "topics.txt").read_text().split()])
    return DatasetSplit(parts["train"], parts["valid"], parts["test"], vocab, features, topics, manifest)


def _separated_centroids(n: int, dim: int, min_dist: float, rng, radius: float = 1.0, tries: int = 10000):
    cents: list[np.ndarray] = []
    for _ in range(tries):
        c = rng.normal(size=dim)
        c *= radius / np.linalg.norm(c)
        if all(np.linalg.norm(c - o) >= min_dist for o in cents):
            cents.append(c)
            if len(cents) == n:
                return np.array(cents)
    raise DataError(f"could not place {n} centroids {min_dist} apart on a radius-{radius} sphere in {dim}-d")


def synth_generate(
    num_users: int = 2000,
    K: int = 3,
    items_per_interest: int | None = None,
    vocab_per_interest: int = 20,
    embed_dim: int = 8,
    noise_sigma: float = 0.05,
    skew: float | str = 1.0,
    rng: np.random.Generator | None = None,
    *,
    n_topics: int = 30,
    seq_len: int = 100,
    input_len: int = 50,
    n_negatives: int = 50,
    proportions=(0.9, 0.05, 0.05),
    mean_gap_days: float = 1.0,
) -> DatasetSplit:
    """Synthetic users with ``K`` interests each, drawn from ``n_topics`` topics.

    Topic centroids sit on the unit sphere at least ``10 * noise_sigma``
    apart; an item's features are its topic centroid plus Gaussian noise.
    Each user picks ``K`` topics and a pool of ``items_per_interest`` items in
    each, then draws ``seq_len`` interactions with mixing proportions from a
    symmetric Dirichlet(``skew``) (``skew="uniform"`` gives exactly 1/K).
    Gaps between interactions are exponential with mean ``mean_gap_days``.
    ``topics`` on the result holds each item's ground-truth topic.
    """
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
    if K > n_topics:
        raise DataError(f"K={K} exceeds n_topics={n_topics}")
    pool_size = vocab_per_interest if items_per_interest is None else items_per_interest
    if pool_size > vocab_per_interest:
        raise DataError("items_per_interest cannot exceed vocab_per_interest")
    cents = _separated_centroids(n_topics, embed_dim, 10.0 * noise_sigma, rng)
    topics = np.repeat(np.arange(n_topics), vocab_per_interest)
    features = cents[topics] + noise_sigma * rng.normal(size=(topics.size, embed_dim))
    vocab = [f"i{i:05d}" for i in range(topics.size)]
    rows: list[RawInteraction] = []
    for u in range(num_users):
        user = f"u{u:06d}"
        chosen = rng.choice(n_topics, size=K, replace=False)
        pools = [c * vocab_per_interest + rng.choice(vocab_per_interest, size=pool_size, replace=False) for c in chosen]
        mix = np.full(K, 1.0 / K) if skew == "uniform" else rng.dirichlet(np.full(K, float(skew)))
        which = rng.choice(K, size=seq_len, p=mix)
        t = np.cumsum(rng.exponential(mean_gap_days, size=seq_len))
        t -= t[0]
        for k, ts in zip(which, t):
            item = pools[k][rng.integers(pool_size)]
            rows.append(RawInteraction(user, vocab[item], float(ts)))
    seqs = build_sequences(rows, vocab, seq_len, input_len)
    hist = user_histories(rows, vocab)
    for s in seqs:
        s.negatives = sample_negatives(len(vocab), hist[s.user], n_negatives, rng)
    split = split_by_user(seqs, vocab, proportions, rng, features=features, topics=topics)
    split.manifest = {"synthetic": True, "K": K, "n_topics": n_topics, "noise_sigma": noise_sigma}
    split.raw = rows
    return split
