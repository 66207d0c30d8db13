"""Command line: synth, stats, train, eval, predict, inspect.

Machine-readable output goes to stdout as JSON; progress goes to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .data import DataError, corpus_stats, load_dataset, load_word_vectors, synth_corpus, write_dataset
from .evaluate import MetricError, classification_metrics, tune_threshold
from .graphbuild import collate
from .model import SDGNNConfig
from .numcore import make_rng
from .train import CheckpointError, TrainConfig, TrainingError, load_checkpoint, predict, save_checkpoint, train

log = logging.getLogger("sdgnn")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    d: int = 64
    d_word: int = 50
    k: int = 2
    dropout: float = 0.5
    leaky_slope: float = 0.01
    mode: str = "attention"
    max_len: int = 50
    share_relations: bool = False
    # optimisation
    lr: float = 0.001
    batch_size: int = 512
    eta: float = 1.0
    l2: float = 1e-5
    max_epochs: int = 50
    patience: int = 5
    min_freq: int = 1
    seed: int = 0
    # io
    train: str = ""
    val: str = ""
    vectors: str = ""
    out: str = "."

    def model_config(self):
        return SDGNNConfig(d=self.d, d_word=self.d_word, k=self.k, dropout=self.dropout,
                           leaky_slope=self.leaky_slope, mode=self.mode, max_len=self.max_len,
                           share_relations=self.share_relations)

    def train_config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, eta=self.eta, l2=self.l2,
                           max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
                           min_freq=self.min_freq)


def _coerce(field, raw):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return {"int": int, "float": float}.get(kind, str)(raw)
    except ValueError:
        raise UsageError(f"{field.name}: cannot parse {raw!r} as {kind}") from None


def read_config_file(path):
    """Flat ``key = value`` pairs, one per line, ``#`` starts a comment."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], raw)
    return values


def resolve_config(args):
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        cli_value = getattr(args, f.name, None)
        if cli_value is not None:
            values[f.name] = _coerce(f, str(cli_value))
    cfg = RunConfig(**values)
    try:
        cfg.model_config()
        cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_records(path, flag):
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.exists(path):
        raise UsageError(f"{flag}: no such file: {path}")
    records = load_dataset(path)
    if not records:
        raise DataError(f"{flag}: dataset {path} is empty")
    return records


def _checkpoint_data(args):
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"--checkpoint: no such file: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    records = _load_records(args.data, "--data")
    vocabs = ckpt.vocabs()
    _check_compatible(records, vocabs)
    return ckpt, ckpt.model(), vocabs, records


def _check_compatible(records, vocabs):
    words, rels, _ = vocabs
    arcs = [a.rel for r in records for a in r.arcs if a.head != 0]
    known_rel = sum(f"{rel}:fwd" in rels for rel in arcs)
    if arcs and known_rel == 0:
        raise DataError("dataset shares no dependency relations with the checkpoint vocabulary")
    tokens = [t.norm for r in records for t in r.tokens]
    if tokens and not any(t in words for t in tokens):
        raise DataError("dataset shares no tokens with the checkpoint vocabulary")
    if known_rel < len(arcs):
        log.warning("%d of %d arcs use relations unknown to the checkpoint and are dropped",
                    len(arcs) - known_rel, len(arcs))


# --- commands -----------------------------------------------------------------------------

def cmd_synth(args):
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    if not args.out:
        raise UsageError("--out is required")
    seed = args.seed if args.seed is not None else 0
    write_dataset(synth_corpus(args.n, seed), args.out)
    log.info("wrote %d records to %s", args.n, args.out)


def cmd_stats(args):
    if not args.data or not os.path.exists(args.data):
        raise UsageError(f"--data: no such file: {args.data}")
    records, errors = load_dataset(args.data, strict=False)
    for err in errors:
        print(f"sdgnn stats: {err}", file=sys.stderr)
    if not records:
        raise DataError("no valid records")
    _emit(corpus_stats(records))
    return 1 if errors else 0


def cmd_train(args):
    cfg = resolve_config(args)
    train_records = _load_records(cfg.train, "--train")
    val_records = _load_records(cfg.val, "--val")
    os.makedirs(cfg.out, exist_ok=True)
    embeddings = None
    if cfg.vectors:
        if not os.path.exists(cfg.vectors):
            raise UsageError(f"--vectors: no such file: {cfg.vectors}")
        embeddings = lambda vocab, d_word, rng: load_word_vectors(cfg.vectors, vocab, d_word, rng).vectors  # noqa: E731
    log_path = os.path.join(cfg.out, "log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %(epoch)d train_loss %(train_loss).4f val_auroc %(val_auroc).4f", entry)

        result = train(train_records, val_records, cfg.model_config(), cfg.train_config(),
                       embeddings=embeddings, on_epoch=on_epoch)
    save_checkpoint(result.best, os.path.join(cfg.out, "best.ckpt"))
    save_checkpoint(result.final, os.path.join(cfg.out, "final.ckpt"))
    _emit({"best_epoch": result.best.epoch, "best_val_auroc": result.best.best_metric,
           "epochs": len(result.log), "out": cfg.out})


def cmd_eval(args):
    ckpt, model, vocabs, records = _checkpoint_data(args)
    probs = predict(model, records, vocabs, args.batch_size)
    labels = np.array([r.label for r in records])
    threshold = args.threshold
    if args.tune_on:
        tune_records = _load_records(args.tune_on, "--tune-on")
        threshold = tune_threshold(predict(model, tune_records, vocabs, args.batch_size),
                                   np.array([r.label for r in tune_records]))
    report = classification_metrics(probs, labels, threshold)
    _emit(dataclasses.asdict(report))


def cmd_predict(args):
    _, model, vocabs, records = _checkpoint_data(args)
    probs = predict(model, records, vocabs, args.batch_size)
    for r, p in zip(records, probs):
        _emit({"id": r.id, "y_hat": float(p)})


def cmd_inspect(args):
    _, model, vocabs, records = _checkpoint_data(args)
    matches = [r for r in records if r.id == args.id]
    if not matches:
        raise DataError(f"no record with id {args.id!r}")
    _emit(attention_dump(model, matches[0], vocabs))


def attention_dump(model, record, vocabs):
    """Per-edge attention for every layer plus pooling weights, for one record."""
    batch = collate([record], vocabs, model.cfg.max_len)
    out = model(batch)
    rel_names = vocabs[1].itos
    n = batch.graphs[0].n
    tokens = [t.form for t in record.tokens[:n]]
    edges = []
    for e, (u, v, r) in enumerate(zip(batch.recv, batch.send, batch.rel)):
        edges.append({
            "u": int(u), "v": int(v),
            "receiver": tokens[u], "sender": tokens[v],
            "relation": rel_names[r],
            "attention": [float(layer[e]) for layer in out.attention],
        })
    return {
        "id": record.id,
        "tokens": tokens,
        "genres": list(record.genres),
        "label": record.label,
        "y_hat": float(out.probs[0]),
        "mode": model.cfg.mode,
        "edges": edges,
        "pooling": [float(a) for a in out.pool_weights[0, :n]],
    }


# --- parser ----------------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(prog="sdgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic twin corpus as JSONL")
    _common(p)
    p.add_argument("--n", type=int, default=200)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset statistics as JSON")
    _common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train and write best/final checkpoints and log.jsonl")
    _common(p)
    for f in fields(RunConfig):
        if f.name in ("seed", "out"):
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar=f.name.upper())
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "metrics report as JSON"),
        ("predict", cmd_predict, "one JSON line per record"),
        ("inspect", cmd_inspect, "attention dump for one record"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--batch-size", type=int, default=512)
        if name == "eval":
            p.add_argument("--threshold", type=float, default=0.5)
            p.add_argument("--tune-on", help="dataset used to pick the F1-maximising threshold")
        if name == "inspect":
            p.add_argument("--id", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"sdgnn {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DataError, MetricError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"sdgnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
