"""SDGNN: BiLSTM encoder, relation-aware attention GNN, genre-aware pooling, sigmoid classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .data import SELF
from .numcore import Parameter, Tensor

MODES = ("attention", "gating", "collapsed")


@dataclass
class SDGNNConfig:
    d: int = 64
    d_word: int = 50
    k: int = 2
    n_relations: int = 1
    vocab_size: int = 2
    n_genres: int = 0
    dropout: float = 0.5
    leaky_slope: float = 0.01
    mode: str = "attention"
    max_len: int = 50
    share_relations: bool = False

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"d must be a positive even number, got {self.d}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_relations < 1:
            raise ValueError("n_relations must be >= 1")

    @property
    def effective_relations(self):
        """Relation inventory size actually parameterised in this mode."""
        return {"attention": self.n_relations, "gating": 3, "collapsed": 2}[self.mode]

    def to_dict(self):
        return asdict(self)


def relation_map(relation_names, mode):
    """Map full relation ids onto the ids used by ``mode``.

    gating keeps only self / forward / backward; collapsed keeps self / other.
    """
    if mode == "attention":
        return np.arange(len(relation_names), dtype=np.int64)
    out = np.zeros(len(relation_names), dtype=np.int64)
    for i, name in enumerate(relation_names):
        if name == SELF:
            continue
        if mode == "collapsed":
            out[i] = 1
        else:
            out[i] = 1 if name.endswith(":fwd") else 2
    return out


def param_shapes(cfg: SDGNNConfig):
    d, h, L = cfg.d, cfg.d // 2, cfg.effective_relations
    shapes = {"embedding.word": (cfg.vocab_size, cfg.d_word)}
    for side in ("fwd", "bwd"):
        shapes[f"lstm.{side}.W_ih"] = (cfg.d_word, 4 * h)
        shapes[f"lstm.{side}.W_hh"] = (h, 4 * h)
        shapes[f"lstm.{side}.b"] = (4 * h,)
    for k in range(1, cfg.k + 1):
        shapes[f"gnn{k}.W"] = (d, d)
        shapes[f"gnn{k}.b"] = (d,)
        if cfg.mode != "gating":
            shapes[f"gnn{k}.W_att"] = (d, d)
        if not cfg.share_relations:
            shapes[f"gnn{k}.rel_emb"] = (L, d)
            shapes[f"gnn{k}.rel_bias"] = (L,)
    if cfg.share_relations:
        shapes["gnn.rel_emb"] = (L, d)
        shapes["gnn.rel_bias"] = (L,)
    shapes["genre.emb"] = (cfg.n_genres, d)
    shapes["pool.W"] = (d, d)
    shapes["cls.w"] = (d,)
    shapes["cls.b"] = (1,)
    return shapes


# parameters subject to the L2 penalty: weight matrices and the classifier weight vector
WEIGHT_SUFFIXES = (".W", ".W_att", ".W_ih", ".W_hh", "cls.w")


def is_weight(name):
    return name.endswith(WEIGHT_SUFFIXES)


def param_count(cfg: SDGNNConfig):
    """Exact parameter counts, total and per group.

    ``relation_independent`` counts the per-layer W and W_att matrices plus the
    layer bias; ``relation_dependent`` counts relation embeddings and biases.
    """
    shapes = param_shapes(cfg)
    sizes = {name: math.prod(s) for name, s in shapes.items()}
    layers = []
    for k in range(1, cfg.k + 1):
        pre = f"gnn{k}." if not cfg.share_relations else "gnn."
        layers.append({
            "W": sizes[f"gnn{k}.W"],
            "W_att": sizes.get(f"gnn{k}.W_att", 0),
            "b": sizes[f"gnn{k}.b"],
            "rel_emb": sizes[pre + "rel_emb"],
            "rel_bias": sizes[pre + "rel_bias"],
        })
    groups = {
        "embedding": sizes["embedding.word"],
        "lstm": sum(v for n, v in sizes.items() if n.startswith("lstm.")),
        "gnn_matrices": sum(v for n, v in sizes.items()
                            if n.startswith("gnn") and n.endswith((".W", ".W_att"))),
        "gnn_bias": sum(v for n, v in sizes.items() if n.startswith("gnn") and n.endswith(".b")),
        "gnn_relations": sum(v for n, v in sizes.items() if n.endswith((".rel_emb", ".rel_bias"))),
        "genre": sizes["genre.emb"],
        "pool": sizes["pool.W"],
        "classifier": sizes["cls.w"] + sizes["cls.b"],
    }
    return {"total": sum(sizes.values()), "groups": groups, "per_layer": layers}


def init_params(cfg: SDGNNConfig, rng, embeddings=None):
    """Fresh parameters.

    Matrices ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases 0 (LSTM forget gate 1),
    relation/genre/word embeddings ~ N(0, 0.1^2) unless ``embeddings`` is given.
    """
    params = {}
    h = cfg.d // 2
    for name, shape in param_shapes(cfg).items():
        if name == "embedding.word":
            if embeddings is not None:
                value = np.array(embeddings, dtype=np.float64)
                if value.shape != shape:
                    raise ValueError(f"embedding matrix shape {value.shape} != {shape}")
            else:
                value = rng.normal(0.0, 0.1, size=shape)
                value[0] = 0.0
        elif name.endswith(("rel_emb", "genre.emb")):
            value = rng.normal(0.0, 0.1, size=shape)
        elif is_weight(name):
            bound = math.sqrt(1.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape)
            if name.startswith("lstm.") and name.endswith(".b"):
                value[h:2 * h] = 1.0
        params[name] = Parameter(value, name)
    return params


# --- stages ------------------------------------------------------------------------------

def lstm(x, mask, W_ih, W_hh, b):
    """Unidirectional LSTM over left-aligned sequences.

    ``x`` is B x n x d_in (Tensor); outputs at padded steps are zero and the
    state is carried through them unchanged. Gate order: input, forget, cell, output.
    """
    B, n, d_in = x.shape
    h_size = W_hh.shape[0]
    xw = nc.reshape(nc.reshape(x, (B * n, d_in)) @ W_ih, (B, n, 4 * h_size))
    h = Tensor(np.zeros((B, h_size)))
    c = Tensor(np.zeros((B, h_size)))
    outs = []
    for t in range(n):
        z = xw[:, t, :] + h @ W_hh + b
        i = nc.sigmoid(z[:, :h_size])
        f = nc.sigmoid(z[:, h_size:2 * h_size])
        g = nc.tanh(z[:, 2 * h_size:3 * h_size])
        o = nc.sigmoid(z[:, 3 * h_size:])
        c_new = f * c + i * g
        h_new = o * nc.tanh(c_new)
        m = mask[:, t:t + 1].astype(np.float64)
        out = h_new * m
        h = out + h * (1.0 - m)
        c = c_new * m + c * (1.0 - m)
        outs.append(out)
    return nc.stack(outs, axis=1)


def reverse_index(mask):
    """Flat gather index reversing each row's real tokens, padding left in place."""
    B, n = mask.shape
    idx = np.tile(np.arange(n), (B, 1))
    for b, L in enumerate(mask.sum(axis=1)):
        idx[b, :L] = np.arange(L)[::-1]
    return (idx + np.arange(B)[:, None] * n).reshape(-1)


def encode(token_ids, mask, params, cfg, training=False, rng=None):
    """Word embeddings -> BiLSTM. Returns h0 as (B*n) x d, zero at padding."""
    B, n = token_ids.shape
    emb = nc.take_rows(params["embedding.word"], token_ids.reshape(-1))
    emb = nc.dropout(emb, cfg.dropout, training, rng)
    x = nc.reshape(emb, (B, n, cfg.d_word))
    fwd = lstm(x, mask, params["lstm.fwd.W_ih"], params["lstm.fwd.W_hh"], params["lstm.fwd.b"])
    rev = reverse_index(mask)
    x_rev = nc.reshape(nc.take_rows(nc.reshape(x, (B * n, cfg.d_word)), rev), (B, n, cfg.d_word))
    bwd = lstm(x_rev, mask, params["lstm.bwd.W_ih"], params["lstm.bwd.W_hh"], params["lstm.bwd.b"])
    h = cfg.d // 2
    bwd = nc.take_rows(nc.reshape(bwd, (B * n, h)), rev)
    return nc.concat([nc.reshape(fwd, (B * n, h)), bwd], axis=1)


def _check_relations(rel, n_rel):
    if rel.size and (rel.max() >= n_rel or rel.min() < 0):
        raise ValueError(f"relation id {int(rel.max())} outside [0, {n_rel})")


def relation_attention(h_prev, recv, rel, layer, slope=0.01):
    """Raw per-edge scores LeakyReLU(h_u . (W_att e_r) + b_r).

    Depends only on the receiver's features and the edge relation.
    """
    _check_relations(rel, layer["rel_emb"].shape[0])
    q = layer["rel_emb"] @ nc.transpose(layer["W_att"])
    s = nc.sum(nc.take_rows(h_prev, recv) * nc.take_rows(q, rel), axis=1)
    return nc.leaky_relu(s + nc.take_rows(layer["rel_bias"], rel), slope)


def normalize_attention(raw, recv, n_nodes):
    return nc.segment_softmax(raw, recv, n_nodes)


def gating_scores(h_prev, recv, rel, layer):
    """Unnormalised gates sigmoid(h_u . e_r + b_r), one per edge."""
    _check_relations(rel, layer["rel_emb"].shape[0])
    s = nc.sum(nc.take_rows(h_prev, recv) * nc.take_rows(layer["rel_emb"], rel), axis=1)
    return nc.sigmoid(s + nc.take_rows(layer["rel_bias"], rel))


def gnn_layer(h_prev, weights, recv, send, n_nodes, layer, node_mask=None):
    """h_u = ReLU(sum_v weight_(u,v) * W h_v + b), computed for all nodes at once."""
    wh = h_prev @ nc.transpose(layer["W"])
    msg = nc.take_rows(wh, send) * nc.reshape(weights, (len(send), 1))
    pre = nc.segment_sum(msg, recv, n_nodes) + layer["b"]
    if node_mask is not None:
        # zero padded rows before the kink so they never straddle it
        pre = pre * node_mask.reshape(-1, 1).astype(np.float64)
    return nc.relu(pre)


def genre_matrix(genre_ids, n_genres):
    """Row b averages the genre embeddings of sentence b (zero row if none)."""
    A = np.zeros((len(genre_ids), n_genres))
    for b, ids in enumerate(genre_ids):
        if ids:
            for g in ids:
                A[b, g] += 1.0 / len(ids)
    return A


def genre_pool(h, mask, genre_ids, params, slope=0.01):
    """Attention pooling of token features guided by the mean genre embedding.

    Returns (sentence vectors B x d, pooling weights B x n).
    """
    B, n = mask.shape
    d = h.shape[1]
    g = Tensor(genre_matrix(genre_ids, params["genre.emb"].shape[0])) @ params["genre.emb"]
    q = g @ nc.transpose(params["pool.W"])
    h3 = nc.reshape(h, (B, n, d))
    scores = nc.leaky_relu(nc.sum(h3 * nc.reshape(q, (B, 1, d)), axis=2), slope)
    alpha = nc.softmax_masked(scores, mask, axis=1)
    x = nc.sum(h3 * nc.reshape(alpha, (B, n, 1)), axis=1)
    return x, alpha


def classify(x, params):
    d = x.shape[1]
    logit = nc.reshape(x @ nc.reshape(params["cls.w"], (d, 1)), (x.shape[0],)) + params["cls.b"]
    return nc.sigmoid(logit)


def layer_params(params, k, cfg):
    pre = f"gnn{k}."
    rel = "gnn." if cfg.share_relations else pre
    layer = {"W": params[pre + "W"], "b": params[pre + "b"],
             "rel_emb": params[rel + "rel_emb"], "rel_bias": params[rel + "rel_bias"]}
    if pre + "W_att" in params:
        layer["W_att"] = params[pre + "W_att"]
    return layer


@dataclass
class ForwardOutput:
    prob: Tensor
    attention: list = field(default_factory=list)  # per layer, per edge weights
    pool_weights: np.ndarray = None

    @property
    def probs(self):
        return self.prob.value


def forward(batch, params, cfg, rel_map=None, training=False, rng=None):
    """Full pipeline for one batch."""
    B, n = batch.token_ids.shape
    N = B * n
    rel = batch.rel if rel_map is None else rel_map[batch.rel]
    h = encode(batch.token_ids, batch.mask, params, cfg, training, rng)
    attention = []
    for k in range(1, cfg.k + 1):
        layer = layer_params(params, k, cfg)
        if cfg.mode == "gating":
            weights = gating_scores(h, batch.recv, rel, layer)
        else:
            raw = relation_attention(h, batch.recv, rel, layer, cfg.leaky_slope)
            weights = normalize_attention(raw, batch.recv, N)
        attention.append(weights.value.copy())
        h = gnn_layer(h, weights, batch.recv, batch.send, N, layer, batch.mask)
        h = nc.dropout(h, cfg.dropout, training, rng)
    x, alpha = genre_pool(h, batch.mask, batch.genre_ids, params, cfg.leaky_slope)
    return ForwardOutput(classify(x, params), attention, alpha.value.copy())


class SDGNN:
    """Parameters plus the relation inventory they were built for."""

    def __init__(self, cfg: SDGNNConfig, relation_names, params=None, rng=None, embeddings=None):
        if len(relation_names) != cfg.n_relations:
            raise ValueError(
                f"config has {cfg.n_relations} relations but {len(relation_names)} names given")
        self.cfg = cfg
        self.relation_names = list(relation_names)
        self.rel_map = relation_map(self.relation_names, cfg.mode)
        if params is None:
            params = init_params(cfg, rng if rng is not None else nc.make_rng(0), embeddings)
        self.params = params

    def __call__(self, batch, training=False, rng=None):
        return forward(batch, self.params, self.cfg, self.rel_map, training, rng)

    def parameters(self):
        return list(self.params.values())

    def weights(self):
        return [p for n, p in self.params.items() if is_weight(n)]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
