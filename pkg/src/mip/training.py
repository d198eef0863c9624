"""Training loops: two-stage (weights frozen at 1, then released) and joint."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import DatasetSplit
from .metrics import candidates, evaluate
from .model import MIPModel
from .numerics import adam_step, make_rng
from .preference import nll_terms, triplet_terms

log = logging.getLogger(__name__)

EVAL_K = 50


def early_stop(history, patience: int) -> tuple[bool, int]:
    """Stop once the last ``patience`` epochs fail to strictly beat the best.

    Returns:
        (stop, index of the best epoch)
    """
    if not len(history):
        return False, -1
    best = 0
    for i, v in enumerate(history):
        if v > history[best]:
            best = i
    return len(history) - 1 - best >= patience, best


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    val_recall: float


@dataclass
class StageReport:
    name: str
    initial_val_auc: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch]


@dataclass
class TrainReport:
    stages: list[StageReport]

    @property
    def best_val_auc(self) -> float:
        return self.stages[-1].best.val_auc

    @property
    def total_epochs(self) -> int:
        return sum(len(s.epochs) for s in self.stages)

    def to_dict(self, stable: bool = False) -> dict:
        stages = []
        start = 0
        for s in self.stages:
            d = asdict(s)
            d["first_epoch"] = start
            d["last_epoch"] = start + len(s.epochs) - 1
            start += len(s.epochs)
            if stable:
                d.pop("seconds")
            stages.append(d)
        return {"stages": stages, "best_val_auc": self.best_val_auc, "total_epochs": self.total_epochs}

    def markdown(self) -> str:
        lines = ["| stage | epoch | train loss | val AUC | val recall@50 |", "|---|---|---|---|---|"]
        for s in self.stages:
            for e in s.epochs:
                mark = " *" if e.epoch == s.best_epoch else ""
                lines.append(f"| {s.name} | {e.epoch}{mark} | {e.train_loss:.5f} | {e.val_auc:.4f} | {e.val_recall:.4f} |")
        return "\n".join(lines) + "\n"


def _pair_loss(cfg: ModelConfig, y: np.ndarray, n_pos: int):
    """Summed loss, dL/dy and the number of pairs for one candidate list."""
    if cfg.loss == "nll":
        labels = np.zeros(y.size)
        labels[:n_pos] = 1.0
        loss, dy = nll_terms(y, labels)
        return loss, dy, y.size
    n = min(n_pos, y.size - n_pos)
    loss, dpos, dneg = triplet_terms(y[:n], y[n_pos : n_pos + n], cfg.margin)
    dy = np.zeros_like(y)
    dy[:n] = dpos
    dy[n_pos : n_pos + n] = dneg
    return loss, dy, n


class _Trainer:
    def __init__(self, model: MIPModel, data: DatasetSplit, tcfg: TrainConfig):
        if not data.train or not data.valid:
            raise ValueError("training needs non-empty train and validation sets")
        self.model = model
        self.data = data
        self.tcfg = tcfg
        self.rng = make_rng(tcfg.seed)
        cfg = model.cfg
        # with metadata the clusters depend only on fixed features
        self.train_asg = self.valid_asg = None
        if cfg.metadata_present:
            self.train_asg = [cfg.clusterer(model.item_matrix[s.items]) for s in data.train]
            self.valid_asg = {i: cfg.clusterer(model.item_matrix[s.items]) for i, s in enumerate(data.valid)}

    def validate(self) -> tuple[float, float]:
        rep = evaluate(self.model, self.data.valid, k_values=(EVAL_K,), assignments=self.valid_asg)
        return rep.auc, rep.recall_at_k[EVAL_K]

    def epoch(self, step: int) -> tuple[float, int]:
        model, tcfg = self.model, self.tcfg
        order = self.rng.permutation(len(self.data.train))
        total_loss, total_pairs = 0.0, 0
        for start in range(0, order.size, tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            model.zero_grad()
            outs = []
            n_pairs = 0
            for i in batch:
                seq = self.data.train[i]
                cands, _ = candidates(seq)
                asg = self.train_asg[i] if self.train_asg is not None else None
                fw = model.forward(seq.items, seq.times, cands, drop_rng=self.rng, assignment=asg)
                loss, dy, n = _pair_loss(model.cfg, fw.y, seq.positives.size)
                outs.append((fw, dy))
                total_loss += loss
                n_pairs += n
            for fw, dy in outs:
                model.backward(fw, dy / n_pairs)
            step += 1
            adam_step(model.param_list(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps, step)
            total_pairs += n_pairs
        return total_loss / total_pairs, step

    def run_stage(self, name: str) -> StageReport:
        model = self.model
        for p in model.param_list():
            p.reset_moments()
        t0 = time.perf_counter()
        auc0, _ = self.validate()
        rep = StageReport(name, auc0)
        best_state = model.state()
        step = 0
        history = []
        for ep in range(self.tcfg.max_epochs):
            loss, step = self.epoch(step)
            auc, rec = self.validate()
            rep.epochs.append(EpochRecord(ep, loss, auc, rec))
            history.append(auc)
            stop, best = early_stop(history, self.tcfg.patience)
            if best == ep:
                best_state = model.state()
            log.info("%s epoch %d loss %.5f val_auc %.4f recall@%d %.4f", name, ep, loss, auc, EVAL_K, rec)
            if stop:
                rep.stopped_early = True
                break
        rep.best_epoch = early_stop(history, self.tcfg.patience)[1]
        model.load_state(best_state)
        rep.seconds = time.perf_counter() - t0
        return rep


def build_model(data: DatasetSplit, mcfg: ModelConfig, seed: int = 0) -> MIPModel:
    features = data.features if mcfg.metadata_present else None
    return MIPModel(mcfg, data.n_items, features=features, seed=seed)


def train_two_stage(data: DatasetSplit, mcfg: ModelConfig, tcfg: TrainConfig, model: MIPModel | None = None):
    """Stage 1 trains with every cluster weight held at 1; stage 2 resumes
    from the stage-1 best state with the weight module released.

    ``max_epochs`` and ``patience`` apply to each stage. Returns
    (model at its best validation epoch, TrainReport).
    """
    if mcfg.weight_mode != "learned":
        raise ValueError("two-stage training requires weight_mode='learned'")
    model = model or build_model(data, mcfg, tcfg.seed)
    trainer = _Trainer(model, data, tcfg)
    model.set_weights_frozen(True)
    s1 = trainer.run_stage("stage1")
    model.set_weights_frozen(False)
    s2 = trainer.run_stage("stage2")
    return model, TrainReport([s1, s2])


def train_joint(data: DatasetSplit, mcfg: ModelConfig, tcfg: TrainConfig, model: MIPModel | None = None):
    """All parameters trained together from the start."""
    model = model or build_model(data, mcfg, tcfg.seed)
    model.set_weights_frozen(False)
    trainer = _Trainer(model, data, tcfg)
    return model, TrainReport([trainer.run_stage("joint")])


def train(data: DatasetSplit, mcfg: ModelConfig, tcfg: TrainConfig):
    if tcfg.stage == "two_stage" and mcfg.weight_mode == "learned":
        return train_two_stage(data, mcfg, tcfg)
    return train_joint(data, mcfg, tcfg)
