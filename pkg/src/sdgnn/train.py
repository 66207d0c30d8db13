"""Weighted BCE objective, L2 penalty, Adam, the epoch loop, and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .data import GenreVocab, RelationVocab, Vocab, build_vocabs
from .evaluate import auroc, classification_metrics
from .graphbuild import make_batches
from .model import SDGNN, SDGNNConfig, is_weight
from .numcore import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 512
    eta: float = 1.0
    l2: float = 1e-5
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    min_freq: int = 1

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")


# --- objective -----------------------------------------------------------------------

def bce(prob, y):
    """Unweighted binary cross entropy, batch mean."""
    prob = nc.as_tensor(prob)
    y = np.asarray(y, dtype=np.float64)
    pos = y * nc.log(prob, LOG_CLAMP)
    neg = (1.0 - y) * nc.log(1.0 - prob, LOG_CLAMP)
    return -nc.mean(pos + neg)


def weighted_bce(prob, y, eta):
    """-mean(y log p + eta (1 - y) log(1 - p)); log arguments clamped at 1e-12."""
    prob = nc.as_tensor(prob)
    y = np.asarray(y, dtype=np.float64)
    pos = y * nc.log(prob, LOG_CLAMP)
    neg = eta * ((1.0 - y) * nc.log(1.0 - prob, LOG_CLAMP))
    return -nc.mean(pos + neg)


def l2_penalty(params, lam):
    """lam * sum of squared entries over weights; biases and embedding tables excluded.

    ``params`` maps names to tensors; see ``model.is_weight`` for the rule.
    """
    total = Tensor(0.0)
    if lam == 0:
        return total
    for name, p in params.items():
        if is_weight(name):
            total = total + nc.sum(p * p)
    return lam * total


# --- Adam ------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, state: AdamState, lr):
    """One bias-corrected Adam update using ``p.grad`` of each parameter, in place."""
    for p in params:
        if not np.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {p.name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- checkpoints -------------------------------------------------------------------------

MAGIC = b"SDGNNCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: SDGNNConfig
    words: list
    relations: list
    genres: list
    params: dict  # name -> ndarray
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    rng_state: dict | None = None
    best_metric: float | None = None
    train_config: dict | None = None

    def model(self):
        params = {n: Parameter(v.copy(), n) for n, v in self.params.items()}
        return SDGNN(self.config, self.relations, params=params)

    def vocabs(self):
        return (Vocab(self.words[2:]), RelationVocab.from_names(self.relations),
                GenreVocab(self.genres))


def snapshot(model, vocabs, adam=None, epoch=0, rng=None, best_metric=None, train_config=None):
    words, rels, genres = vocabs
    adam = adam or AdamState()
    return Checkpoint(
        config=replace(model.cfg),
        words=list(words.itos), relations=list(rels.itos), genres=list(genres.itos),
        params={n: p.value.copy() for n, p in model.params.items()},
        adam=AdamState({k: v.copy() for k, v in adam.m.items()},
                       {k: v.copy() for k, v in adam.v.items()},
                       adam.t, adam.beta1, adam.beta2, adam.eps),
        epoch=epoch,
        rng_state=rng.bit_generator.state if rng is not None else None,
        best_metric=best_metric,
        train_config=train_config,
    )


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary container: magic, version, JSON header, then named little-endian f8 arrays."""
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": {"words": ckpt.words, "relations": ckpt.relations, "genres": ckpt.genres},
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps},
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "best_metric": ckpt.best_metric,
        "train_config": ckpt.train_config,
    }
    arrays = [(f"param/{n}", v) for n, v in sorted(ckpt.params.items())]
    arrays += [(f"adam.m/{n}", v) for n, v in sorted(ckpt.adam.m.items())]
    arrays += [(f"adam.v/{n}", v) for n, v in sorted(ckpt.adam.v.items())]
    blob = _canonical(header)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not an SDGNN checkpoint")
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = math.prod(shape)
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, pname = name.partition("/")
        {"param": params, "adam.m": m, "adam.v": v}[kind][pname] = arr
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    a = header["adam"]
    vocab = header["vocab"]
    return Checkpoint(
        config=SDGNNConfig(**header["config"]),
        words=vocab["words"], relations=vocab["relations"], genres=vocab["genres"],
        params=params,
        adam=AdamState(m, v, a["t"], a["beta1"], a["beta2"], a["eps"]),
        epoch=header["epoch"], rng_state=header["rng_state"],
        best_metric=header["best_metric"], train_config=header["train_config"],
    )


# --- loop ------------------------------------------------------------------------------

def predict(model, records, vocabs, batch_size=512):
    """Probabilities in input order, eval mode."""
    out = []
    for batch in make_batches(records, vocabs, batch_size, None, model.cfg.max_len):
        out.append(model(batch).probs)
    return np.concatenate(out)


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list
    vocabs: tuple


def train(records_train, records_val, model_cfg: SDGNNConfig, cfg: TrainConfig,
          embeddings=None, vocabs=None, on_epoch=None):
    """Fit SDGNN; keep the checkpoint with the best validation AUROC.

    Ties in AUROC are broken by lower validation loss. Training stops after
    ``patience`` evaluations without improvement or at ``max_epochs``.
    ``embeddings`` optionally seeds the word table (rows aligned with the
    vocabulary built from ``records_train``).
    """
    if not records_train or not records_val:
        raise TrainingError("train and validation splits must be nonempty")
    vocabs = vocabs or build_vocabs(records_train, cfg.min_freq)
    words, rels, genres = vocabs
    model_cfg = replace(model_cfg, vocab_size=len(words), n_relations=len(rels),
                        n_genres=len(genres))
    rng = nc.make_rng(cfg.seed)
    emb = embeddings(words, model_cfg.d_word, rng) if callable(embeddings) else embeddings
    model = SDGNN(model_cfg, rels.itos, rng=rng, embeddings=emb)
    adam = AdamState()
    params = model.parameters()
    y_val = np.array([r.label for r in records_val], dtype=np.float64)
    history = []
    best, best_key, bad = None, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        shuffle_seed = int(rng.integers(2**62))
        total, seen = 0.0, 0
        for bi, batch in enumerate(make_batches(records_train, vocabs, cfg.batch_size,
                                                shuffle_seed, model_cfg.max_len)):
            model.zero_grad()
            with Tape() as tape:
                out = model(batch, training=True, rng=rng)
                loss = weighted_bce(out.prob, batch.labels, cfg.eta) + l2_penalty(model.params, cfg.l2)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            nc.backward(loss, tape)
            adam_step(params, adam, cfg.lr)
            total += value * batch.size
            seen += batch.size
        probs = predict(model, records_val, vocabs, cfg.batch_size)
        val_auroc = auroc(probs, y_val)
        val_loss = float(weighted_bce(probs, y_val, cfg.eta).value)
        entry = {
            "epoch": epoch,
            "train_loss": total / seen,
            "val_auroc": val_auroc,
            "val_f1": classification_metrics(probs, y_val, with_auroc=False).f1,
            "val_loss": val_loss,
            "seconds": round(time.perf_counter() - start, 4),
        }
        history.append(entry)
        log.info("epoch %d loss %.4f val_auroc %.4f", epoch, entry["train_loss"], val_auroc)
        if on_epoch is not None:
            on_epoch(entry)
        key = (val_auroc, -val_loss)
        if best_key is None or key > best_key:
            best_key, bad = key, 0
            best = snapshot(model, vocabs, adam, epoch, rng, val_auroc, asdict(cfg))
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    final = snapshot(model, vocabs, adam, epoch, rng, best_key[0], asdict(cfg))
    return TrainResult(best, final, history, vocabs)
