"""Records -> labelled dependency graphs -> padded batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PAD, SELF, DataError
from .numcore import make_rng

MAX_LEN = 50


@dataclass
class DepGraph:
    """Per-receiver edge list: ``(u, v, r)`` means node ``u`` aggregates from ``v``."""

    n: int
    edges: list  # (u, v, r) triples
    dropped_arcs: int = 0

    def neighbors(self, u):
        return [(v, r) for uu, v, r in self.edges if uu == u]


def build_graph(record, relation_vocab, max_len=MAX_LEN):
    """Dependency graph of one record, truncated to ``max_len`` tokens.

    Each kept arc (head, dep, rel) gives the dependent a ``rel:fwd`` edge from
    the head and the head a ``rel:bwd`` edge from the dependent. Root arcs add
    nothing; every node gets a self-loop. Arcs whose relation is unknown to
    the vocabulary are dropped and counted.
    """
    n = min(len(record.tokens), max_len)
    self_id = relation_vocab[SELF]
    edges = [(u, u, self_id) for u in range(n)]
    seen = set()
    dropped = 0
    for arc in record.arcs:
        if arc.dep in seen:
            raise DataError(f"record {record.id!r}: dependent {arc.dep} has two heads")
        seen.add(arc.dep)
        if arc.head == 0 or arc.head > n or arc.dep > n:
            continue
        fwd, bwd = f"{arc.rel}:fwd", f"{arc.rel}:bwd"
        if fwd not in relation_vocab:
            dropped += 1
            continue
        h, d = arc.head - 1, arc.dep - 1
        edges.append((d, h, relation_vocab[fwd]))
        edges.append((h, d, relation_vocab[bwd]))
    return DepGraph(n, edges, dropped)


@dataclass
class Batch:
    """Padded batch.

    Nodes are addressed globally as ``b * n_max + i``. ``recv``/``send``/``rel``
    are the concatenated edges of all graphs in that addressing.
    """

    ids: list
    token_ids: np.ndarray  # B x n_max
    mask: np.ndarray  # B x n_max bool
    graphs: list
    genre_ids: list
    labels: np.ndarray
    recv: np.ndarray
    send: np.ndarray
    rel: np.ndarray
    edge_sentence: np.ndarray

    @property
    def size(self):
        return self.token_ids.shape[0]

    @property
    def n_max(self):
        return self.token_ids.shape[1]

    @property
    def lengths(self):
        return self.mask.sum(axis=1)


def collate(records, vocabs, max_len=MAX_LEN):
    word_vocab, rel_vocab, genre_vocab = vocabs
    for r in records:
        if not r.tokens:
            raise DataError(f"record {r.id!r} has no tokens")
    graphs = [build_graph(r, rel_vocab, max_len) for r in records]
    n_max = max(1, max(g.n for g in graphs))
    B = len(records)
    token_ids = np.full((B, n_max), PAD, dtype=np.int64)
    mask = np.zeros((B, n_max), dtype=bool)
    recv, send, rel, owner = [], [], [], []
    for b, (r, g) in enumerate(zip(records, graphs)):
        token_ids[b, :g.n] = [word_vocab[t.norm] for t in r.tokens[:g.n]]
        mask[b, :g.n] = True
        for u, v, rid in g.edges:
            recv.append(b * n_max + u)
            send.append(b * n_max + v)
            rel.append(rid)
            owner.append(b)
    return Batch(
        ids=[r.id for r in records],
        token_ids=token_ids,
        mask=mask,
        graphs=graphs,
        genre_ids=[genre_vocab.ids(r.genres) for r in records],
        labels=np.array([r.label for r in records], dtype=np.float64),
        recv=np.array(recv, dtype=np.int64),
        send=np.array(send, dtype=np.int64),
        rel=np.array(rel, dtype=np.int64),
        edge_sentence=np.array(owner, dtype=np.int64),
    )


def make_batches(records, vocabs, batch_size, shuffle_seed=None, max_len=MAX_LEN):
    """Split ``records`` into padded batches; the last one may be partial.

    ``shuffle_seed=None`` keeps input order.
    """
    if not records:
        raise DataError("make_batches: no records")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = make_rng(shuffle_seed).permutation(len(records))
    return [collate([records[i] for i in order[s:s + batch_size]], vocabs, max_len)
            for s in range(0, len(records), batch_size)]
