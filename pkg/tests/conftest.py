import numpy as np
import pytest

from sdgnn import numcore as nc
from sdgnn.data import Arc, Record, Token, build_vocabs, synth_corpus
from sdgnn.graphbuild import collate
from sdgnn.model import SDGNN, SDGNNConfig

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_tree_record(rng, rid, n_min=1, n_max=6, relations=("dobj", "nsubj"), vocab=8,
                       genres=("g0", "g1", "g2")):
    """Random single-rooted dependency tree over ``n`` tokens."""
    n = int(rng.integers(n_min, n_max + 1))
    tokens = [Token(f"w{rng.integers(vocab)}") for _ in range(n)]
    order = [int(i) + 1 for i in rng.permutation(n)]
    arcs = [Arc(0, order[0], "root")]
    for idx in range(1, n):
        head = order[int(rng.integers(idx))]
        arcs.append(Arc(head, order[idx], relations[int(rng.integers(len(relations)))]))
    k = int(rng.integers(0, len(genres) + 1))
    picked = sorted(rng.choice(list(genres), size=k, replace=False).tolist()) if k else []
    return Record(rid, tokens, arcs, picked, int(rng.integers(2)))


@pytest.fixture
def make_records():
    def make(n, seed=0, **kw):
        rng = nc.make_rng(seed)
        return [random_tree_record(rng, f"r{i}", **kw) for i in range(n)]
    return make


@pytest.fixture
def tiny_setup():
    """A small model (d=8) over a few random trees; dropout off."""
    def make(seed=0, n_records=3, mode="attention", relations=("dobj", "nsubj"), **cfg_kw):
        rng = nc.make_rng(seed)
        records = [random_tree_record(rng, f"r{i}", 2, 6, relations) for i in range(n_records)]
        vocabs = build_vocabs(records)
        cfg = SDGNNConfig(d=8, d_word=8, k=2, n_relations=len(vocabs[1]),
                          vocab_size=len(vocabs[0]), n_genres=len(vocabs[2]), dropout=0.0,
                          mode=mode, **cfg_kw)
        model = SDGNN(cfg, vocabs[1].itos, rng=rng)
        return model, collate(records, vocabs), records, vocabs
    return make


@pytest.fixture(scope="session")
def synth_small():
    return synth_corpus(20, seed=3)

