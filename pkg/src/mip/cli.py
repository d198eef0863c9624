"""``mip`` command line: prepare, synth, train, eval, recluster-sweep, ablate, latency."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .clustering import METHODS, ClusterSpec
from .config import ModelConfig, RunConfig, deep_merge
from .data import DataError, ingest, load_split, prepare, save_split, synth_generate
from .encoding import NONE, EncodingConfig
from .metrics import evaluate, markdown_table, profile_latency
from .numerics import TrainingError, make_rng
from .training import train

log = logging.getLogger("mip")

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_VERSION = 5
EXIT_RUNTIME = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


# -- config and output helpers ----------------------------------------------


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _dotted(key: str, value) -> dict:
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def effective_config(args) -> RunConfig:
    base = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        base = json.loads(path.read_text())
    for item in args.set or []:
        if "=" not in item:
            raise CliError("usage", f"--set expects key=value, got {item!r}", EXIT_USAGE)
        key, raw = item.split("=", 1)
        base = deep_merge(base, _dotted(key, _parse_value(raw)))
    if args.seed is not None:
        base = deep_merge(base, {"seed": args.seed, "train": {"seed": args.seed}})
    return RunConfig.model_validate(base)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Output:
    def __init__(self, out_dir, cfg: RunConfig, command: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command

    def write(self, name: str, text: str):
        (self.dir / name).write_text(text)

    def json(self, name: str, obj):
        self.write(name, _dump(obj))

    def finish(self, **inputs):
        self.json("config.json", self.cfg.model_dump(mode="json"))
        # a split directory already has a manifest; keep its fields
        path = self.dir / "manifest.json"
        manifest = json.loads(path.read_text()) if path.exists() else {}
        manifest.update(
            command=self.command,
            version=__version__,
            seed=self.cfg.seed,
            config_hash=self.cfg.hash(),
            inputs={k: str(v) for k, v in inputs.items() if v is not None},
        )
        self.json("manifest.json", manifest)


def _split_path(args, cfg: RunConfig) -> str:
    path = args.split or cfg.data.split
    if not path:
        raise CliError("usage", "no split directory given (--split or data.split)", EXIT_USAGE)
    return path


# -- commands ----------------------------------------------------------------


def cmd_prepare(args, cfg: RunConfig):
    rows = ingest(args.input, time_unit=args.time_unit)
    split = prepare(
        rows,
        min_count=args.min_count,
        iterate_core=args.iterate_core,
        min_len=args.seq_len,
        input_len=args.input_len,
        n_negatives=args.negatives,
        gap_days=args.gap_days,
        seed=cfg.seed,
        features_path=args.features,
    )
    out = Output(args.out, cfg, "prepare")
    save_split(split, out.dir, {"seed": cfg.seed, "config_hash": cfg.hash(), "source": str(args.input)})
    out.finish(input=args.input, features=args.features)
    return {"n_items": split.n_items, "train": len(split.train), "valid": len(split.valid), "test": len(split.test)}


def cmd_synth(args, cfg: RunConfig):
    skew = "uniform" if args.skew == "uniform" else float(args.skew)
    split = synth_generate(
        num_users=args.users,
        K=args.interests,
        items_per_interest=args.items_per_interest,
        vocab_per_interest=args.vocab_per_interest,
        embed_dim=args.embed_dim,
        noise_sigma=args.noise,
        skew=skew,
        rng=make_rng(cfg.seed),
        n_topics=args.topics,
    )
    out = Output(args.out, cfg, "synth")
    save_split(split, out.dir, {"seed": cfg.seed, "config_hash": cfg.hash()})
    out.finish()
    return {"n_items": split.n_items, "train": len(split.train), "valid": len(split.valid), "test": len(split.test)}


def cmd_train(args, cfg: RunConfig):
    split_path = _split_path(args, cfg)
    data = load_split(split_path)
    model, report = train(data, cfg.model, cfg.train)
    out = Output(args.out, cfg, "train")
    save_checkpoint(out.dir / "model.ckpt", model, {"config_hash": cfg.hash()})
    out.json("train_report.json", report.to_dict(stable=args.stable))
    out.write("train_report.md", report.markdown())
    out.finish(split=split_path)
    return report.to_dict(stable=True)


def _clusterer(args, model) -> ClusterSpec:
    spec = model.cfg.clusterer
    update = {}
    if args.method:
        update["method"] = args.method
    if args.clusters:
        update["k"] = args.clusters
    return spec.model_copy(update=update) if update else spec


def cmd_eval(args, cfg: RunConfig):
    model, _ = load_checkpoint(args.checkpoint)
    data = load_split(_split_path(args, cfg))
    rep = evaluate(model, getattr(data, args.part), _clusterer(args, model), tuple(args.k), args.weight_mode)
    out = Output(args.out, cfg, "eval")
    out.json("eval_report.json", rep.to_dict(stable=args.stable))
    row = rep.row()
    out.write("eval_report.md", markdown_table(["clusterer", *row], [[rep.cluster_method, *row.values()]]))
    out.finish(checkpoint=args.checkpoint, split=args.split)
    return rep.to_dict(stable=True)


def sweep_specs(methods, ks, seed: int = 0) -> list[tuple[str, str, ClusterSpec]]:
    """(method, k label, spec) rows: ``none`` and ``dbscan`` once, others per k."""
    rows = []
    for m in methods:
        if m in ("none", "dbscan"):
            rows.append((m, "-", ClusterSpec(method=m, seed=seed)))
        else:
            rows.extend((m, str(k), ClusterSpec(method=m, k=k, seed=seed)) for k in ks)
    return rows


def recluster_sweep(models: dict, seqs, methods, ks, seed: int = 0) -> list[dict]:
    rows = []
    for method, k, spec in sweep_specs(methods, ks, seed):
        row = {"method": method, "clusters": k}
        for label, model in models.items():
            row[label] = evaluate(model, seqs, spec).auc
        rows.append(row)
    return rows


def cmd_recluster_sweep(args, cfg: RunConfig):
    models = {}
    for item in args.checkpoint:
        label, _, path = item.rpartition("=")
        models[label or Path(path).stem] = load_checkpoint(path)[0]
    data = load_split(_split_path(args, cfg))
    rows = recluster_sweep(models, getattr(data, args.part), ["none", *args.methods], args.ks, cfg.seed)
    out = Output(args.out, cfg, "recluster-sweep")
    out.json("recluster_sweep.json", rows)
    header = ["method", "clusters", *models]
    out.write("recluster_sweep.md", markdown_table(header, [[r[h] for h in header] for r in rows]))
    out.finish(split=args.split, checkpoints=",".join(args.checkpoint))
    return rows


def ablation_arms(axis: str, mcfg: ModelConfig) -> list[tuple[str, dict]]:
    """Named config overrides for one ablation axis."""
    if axis == "weights":
        return [
            ("unweighted", {"clusterer": ClusterSpec(method="none"), "weight_mode": "equal"}),
            ("equal", {"weight_mode": "equal"}),
            ("exp_decay", {"weight_mode": "exp_decay"}),
            ("learned", {"weight_mode": "learned"}),
        ]
    if axis == "loss":
        arms = [("nll", {"loss": "nll"})]
        arms += [(f"triplet-{a}", {"loss": "triplet", "margin": a, "learn_beta": True}) for a in (0.2, 0.5, 0.8)]
        return arms
    if axis == "encodings":
        temporal = mcfg.temporal if mcfg.temporal.kind != "none" else EncodingConfig()
        positional = mcfg.positional if mcfg.positional.kind != "none" else EncodingConfig()
        return [
            ("item", {"temporal": NONE, "positional": NONE}),
            ("+positional", {"temporal": NONE, "positional": positional}),
            ("+temporal", {"temporal": temporal, "positional": NONE}),
            ("+both", {"temporal": temporal, "positional": positional}),
            ("+onehot-temporal", {"temporal": EncodingConfig(kind="onehot"), "positional": positional}),
            ("+twohot-temporal", {"temporal": EncodingConfig(kind="twohot"), "positional": positional}),
        ]
    raise CliError("usage", f"unknown ablation axis {axis!r}", EXIT_USAGE)


def run_ablation(data, cfg: RunConfig, axis: str, k: int = 50) -> list[dict]:
    rows = []
    for name, override in ablation_arms(axis, cfg.model):
        mcfg = cfg.model.model_copy(update=override)
        tcfg = cfg.train
        if mcfg.weight_mode != "learned":
            tcfg = tcfg.model_copy(update={"stage": "joint"})
        model, report = train(data, mcfg, tcfg)
        rep = evaluate(model, data.test, k_values=(k,))
        row = {"arm": name, "weight_mode": mcfg.weight_mode, "loss": mcfg.loss}
        if mcfg.loss == "triplet":
            row["margin"] = mcfg.margin
            row["beta"] = float(model.params["beta"].value[0])
        row.update(rep.row(k))
        row["embed_len"] = mcfg.embed_len
        row["epochs"] = report.total_epochs
        row["finite"] = bool(np.isfinite([rep.auc, rep.nll]).all())
        rows.append(row)
    return rows


def cmd_ablate(args, cfg: RunConfig):
    data = load_split(_split_path(args, cfg))
    rows = run_ablation(data, cfg, args.axis, args.k)
    out = Output(args.out, cfg, f"ablate-{args.axis}")
    out.json(f"ablate_{args.axis}.json", rows)
    header = list(dict.fromkeys(h for r in rows for h in r))
    out.write(f"ablate_{args.axis}.md", markdown_table(header, [[r.get(h, "-") for h in header] for r in rows]))
    out.finish(split=args.split)
    return rows


def cmd_latency(args, cfg: RunConfig):
    model, _ = load_checkpoint(args.checkpoint)
    data = load_split(_split_path(args, cfg))
    probes = profile_latency(model, getattr(data, args.part), args.samples, args.warmup, args.batch_size)
    rep = evaluate(model, getattr(data, args.part))
    rows = [vars(p) for p in probes]
    result = {"latency": rows, "recall@50": rep.recall_at_k[50], "auc": rep.auc}
    out = Output(args.out, cfg, "latency")
    if args.stable:
        result = {k: v for k, v in result.items() if k != "latency"}
    out.json("latency.json", result)
    out.write(
        "latency.md",
        markdown_table(["phase", "samples", "mean ms", "std ms"], [[p.phase, p.samples, p.mean_ms, p.std_ms] for p in probes]),
    )
    out.finish(checkpoint=args.checkpoint, split=args.split)
    return result


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "recluster-sweep": cmd_recluster_sweep,
    "ablate": cmd_ablate,
    "latency": cmd_latency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--stable", action="store_true", help="omit timing fields from outputs")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.lr=0.01")

    p = argparse.ArgumentParser(prog="mip", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="raw interactions -> split directory")
    s.add_argument("--input", required=True)
    s.add_argument("--features")
    s.add_argument("--time-unit", choices=["s", "d"], default="s")
    s.add_argument("--min-count", type=int, default=10)
    s.add_argument("--iterate-core", action="store_true")
    s.add_argument("--seq-len", type=int, default=100)
    s.add_argument("--input-len", type=int, default=50)
    s.add_argument("--negatives", type=int, default=50)
    s.add_argument("--gap-days", type=float)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-interest split")
    s.add_argument("--users", type=int, default=2000)
    s.add_argument("--interests", type=int, default=3)
    s.add_argument("--topics", type=int, default=30)
    s.add_argument("--vocab-per-interest", type=int, default=20)
    s.add_argument("--items-per-interest", type=int)
    s.add_argument("--embed-dim", type=int, default=8)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--skew", default="1.0", help="Dirichlet concentration or 'uniform'")

    s = sub.add_parser("train", parents=[common], help="train a model on a split")
    s.add_argument("--split")

    def evaluating(s):
        s.add_argument("--split")
        s.add_argument("--part", choices=["valid", "test"], default="test")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    evaluating(s)
    s.add_argument("--k", type=int, nargs="+", default=[50])
    s.add_argument("--method", choices=["none", *METHODS])
    s.add_argument("--clusters", type=int)
    s.add_argument("--weight-mode", choices=["learned", "equal", "exp_decay"])

    s = sub.add_parser("recluster-sweep", parents=[common], help="AUC per inference clusterer")
    s.add_argument("--checkpoint", action="append", required=True, metavar="LABEL=PATH")
    evaluating(s)
    s.add_argument("--methods", nargs="+", default=list(METHODS), choices=list(METHODS))
    s.add_argument("--ks", type=int, nargs="+", default=[5, 8, 10])

    s = sub.add_parser("ablate", parents=[common], help="train and compare ablation arms")
    s.add_argument("--axis", choices=["weights", "loss", "encodings"], required=True)
    s.add_argument("--split")
    s.add_argument("--k", type=int, default=50)

    s = sub.add_parser("latency", parents=[common], help="time training, inference and clustering")
    s.add_argument("--checkpoint", required=True)
    evaluating(s)
    s.add_argument("--samples", type=int, default=50)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--batch-size", type=int, default=1)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    print(f"mip: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    level = os.environ.get("MIP_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        with threadpool_limits(limits=args.threads):
            result = COMMANDS[args.command](args, cfg)
    except CliError as e:
        return _fail(e.kind, str(e), e.code)
    except FileNotFoundError as e:
        return _fail("missing_file", str(e), EXIT_MISSING)
    except ValidationError as e:
        return _fail("schema", str(e), EXIT_SCHEMA)
    except json.JSONDecodeError as e:
        return _fail("schema", f"invalid JSON: {e}", EXIT_SCHEMA)
    except CheckpointError as e:
        kind = "version_mismatch" if "version" in str(e) else "checkpoint"
        return _fail(kind, str(e), EXIT_VERSION)
    except DataError as e:
        kind = "version_mismatch" if "version" in str(e) else "data"
        return _fail(kind, str(e), EXIT_VERSION if kind == "version_mismatch" else EXIT_RUNTIME)
    except (TrainingError, ValueError) as e:
        return _fail("runtime", str(e), EXIT_RUNTIME)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
