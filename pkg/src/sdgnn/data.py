"""Ingestion: CoNLL-U parses, JSONL records, word vectors, vocabularies, synthetic corpus."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numcore import make_rng

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
SELF = "self"


class DataError(ValueError):
    pass


class ConlluError(DataError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class RecordError(DataError):
    def __init__(self, record_id, msg):
        super().__init__(f"record {record_id!r}: {msg}")
        self.record_id = record_id


@dataclass(frozen=True)
class Token:
    form: str
    norm: str = ""

    def __post_init__(self):
        if not self.norm:
            object.__setattr__(self, "norm", self.form.lower() or "_")


@dataclass(frozen=True)
class Arc:
    head: int  # 0 = root
    dep: int
    rel: str


@dataclass
class Record:
    id: str
    tokens: list[Token]
    arcs: list[Arc]
    genres: list[str] = field(default_factory=list)
    label: int = 0

    def to_json(self):
        return {
            "id": self.id,
            "tokens": [t.form for t in self.tokens],
            "arcs": [[a.head, a.dep, a.rel] for a in self.arcs],
            "genres": list(self.genres),
            "label": self.label,
        }


def validate_arcs(arcs, n, record_id="?"):
    seen = set()
    for a in arcs:
        if not 1 <= a.dep <= n:
            raise RecordError(record_id, f"dependent index {a.dep} outside [1, {n}]")
        if not 0 <= a.head <= n:
            raise RecordError(record_id, f"head index {a.head} outside [0, {n}]")
        if a.head == a.dep:
            raise RecordError(record_id, f"arc {a.head}->{a.dep} is a self-arc")
        if a.dep in seen:
            raise RecordError(record_id, f"dependent {a.dep} has more than one head")
        seen.add(a.dep)


# --- CoNLL-U -------------------------------------------------------------------

def parse_conllu(text: str):
    """Return a list of ``(tokens, arcs)`` per sentence.

    Multiword ranges (``3-4``) and empty nodes (``5.1``) are skipped.
    """
    sentences = []
    tokens, arcs = [], []

    def flush():
        if tokens:
            sentences.append((list(tokens), list(arcs)))
        tokens.clear()
        arcs.clear()

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(lineno, f"expected 10 tab-separated columns, found {len(cols)}")
        tid = cols[0]
        if "-" in tid or "." in tid:
            continue
        try:
            idx = int(tid)
        except ValueError:
            raise ConlluError(lineno, f"bad token id {tid!r}") from None
        if idx != len(tokens) + 1:
            raise ConlluError(lineno, f"token id {idx} out of sequence")
        try:
            head = int(cols[6])
        except ValueError:
            raise ConlluError(lineno, f"non-integer head {cols[6]!r}") from None
        tokens.append(Token(cols[1]))
        arcs.append(Arc(head, idx, cols[7]))
    flush()
    return sentences


def to_conllu(sentences) -> str:
    out = []
    for tokens, arcs in sentences:
        by_dep = {a.dep: a for a in arcs}
        for i, tok in enumerate(tokens, start=1):
            a = by_dep.get(i)
            head, rel = (a.head, a.rel) if a else ("_", "_")
            out.append("\t".join([str(i), tok.form, tok.norm, "_", "_", "_", str(head), rel, "_", "_"]))
        out.append("")
    return "\n".join(out) + "\n"


# --- JSONL dataset ----------------------------------------------------------------

def record_from_json(obj) -> Record:
    rid = obj.get("id", "?") if isinstance(obj, dict) else "?"
    if not isinstance(obj, dict):
        raise RecordError(rid, "not a JSON object")
    for key in ("id", "tokens", "arcs", "label"):
        if key not in obj:
            raise RecordError(rid, f"missing field {key!r}")
    label = obj["label"]
    if label not in (0, 1) or isinstance(label, bool):
        raise RecordError(rid, f"label must be 0 or 1, got {label!r}")
    tokens = [Token(str(t)) for t in obj["tokens"]]
    if not tokens:
        raise RecordError(rid, "record has no tokens")
    try:
        arcs = [Arc(int(h), int(d), str(r)) for h, d, r in obj["arcs"]]
    except (TypeError, ValueError):
        raise RecordError(rid, "arcs must be [head, dep, relation] triples") from None
    validate_arcs(arcs, len(tokens), rid)
    genres = [str(g) for g in obj.get("genres", [])]
    return Record(str(obj["id"]), tokens, arcs, genres, int(label))


def load_dataset(path, strict=True):
    """Read JSONL records.

    With ``strict=False`` bad lines are skipped and returned as
    ``(records, errors)``; otherwise the first bad line raises.
    """
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                err = RecordError(f"<line {lineno}>", f"invalid JSON: {exc.msg}")
            else:
                try:
                    records.append(record_from_json(obj))
                    continue
                except RecordError as exc:
                    err = exc
            if strict:
                raise err
            errors.append(err)
    if strict:
        return records
    return records, errors


def write_dataset(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# --- vocabularies ---------------------------------------------------------------------

def _rank(counter):
    return sorted(counter, key=lambda s: (-counter[s], s))


class Vocab:
    def __init__(self, tokens, min_freq=1):
        self.itos = ["<pad>", "<unk>"] + [t for t in tokens if t not in ("<pad>", "<unk>")]
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.min_freq = min_freq

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, token):
        return self.stoi.get(token, UNK)

    def __contains__(self, token):
        return token in self.stoi


class RelationVocab:
    """Directed relation labels; ``self`` is always id 0."""

    def __init__(self, relations):
        names = [SELF]
        for rel in relations:
            names += [f"{rel}:fwd", f"{rel}:bwd"]
        self.itos = names
        self.stoi = {s: i for i, s in enumerate(names)}

    @classmethod
    def from_names(cls, names):
        if not names or names[0] != SELF:
            raise DataError("relation inventory must start with 'self'")
        vocab = cls([])
        vocab.itos = list(names)
        vocab.stoi = {s: i for i, s in enumerate(vocab.itos)}
        return vocab

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, name):
        try:
            return self.stoi[name]
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None

    def __contains__(self, name):
        return name in self.stoi

    @property
    def base_relations(self):
        return [s[:-4] for s in self.itos[1::2]]


class GenreVocab:
    def __init__(self, genres):
        self.itos = list(genres)
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, genre):
        return self.stoi[genre]

    def ids(self, genres):
        return [self.stoi[g] for g in genres if g in self.stoi]


def build_vocabs(records, min_freq=1):
    """Build word, relation and genre vocabularies.

    Ids follow (frequency desc, string asc). Root arcs contribute no relation.
    """
    if not records:
        raise DataError("cannot build vocabularies from an empty corpus")
    words, rels, genres = Counter(), Counter(), Counter()
    for r in records:
        words.update(t.norm for t in r.tokens)
        rels.update(a.rel for a in r.arcs if a.head != 0)
        genres.update(r.genres)
    kept = [w for w in _rank(words) if words[w] >= min_freq]
    return Vocab(kept, min_freq), RelationVocab(_rank(rels)), GenreVocab(_rank(genres))


# --- word vectors ----------------------------------------------------------------------------

@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    pretrained: np.ndarray  # bool per row


def load_word_vectors(path, vocab, d_word, rng):
    """Initial embedding table from a GloVe-style text file.

    Rows for tokens absent from the file are drawn from N(0, 0.1^2); the PAD
    row is zero.
    """
    n = len(vocab)
    vectors = rng.normal(0.0, 0.1, size=(n, d_word))
    found = np.zeros(n, dtype=bool)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) <= 1 and not parts[0]:
                    continue
                if len(parts) != d_word + 1:
                    raise DataError(
                        f"{path}:{lineno}: expected {d_word} values, found {len(parts) - 1}")
                word = parts[0]
                if word in vocab and vocab[word] > UNK:
                    idx = vocab[word]
                    vectors[idx] = np.array(parts[1:], dtype=np.float64)
                    found[idx] = True
    vectors[PAD] = 0.0
    return EmbeddingMatrix(vectors, found)


# --- statistics ---------------------------------------------------------------------

def corpus_stats(records):
    """Corpus summary keyed like the dataset-statistics table."""
    n = len(records)
    if n == 0:
        raise DataError("empty corpus")
    nodes = sum(len(r.tokens) for r in records)
    edges = sum(2 * sum(1 for a in r.arcs if a.head != 0) for r in records)
    genres = sum(len(r.genres) for r in records)
    rels = {a.rel for r in records for a in r.arcs if a.head != 0}
    return {
        "# of Sentences": n,
        "# of Edge Types": 2 * len(rels) + 1,
        "# of Genre": len({g for r in records for g in r.genres}),
        "Avg. # of Nodes per Sentence": nodes / n,
        "Avg. # of Edges per Sentence": edges / n,
        "Avg. # of Genre per Sentence": genres / n,
    }


# --- synthetic corpus -------------------------------------------------------------------------

GENRE_POOL = ["fantasy", "romance", "mystery", "horror"]
_DETS = ["the", "a", "this", "that"]
_ADJS = ["old", "young", "dark", "quiet", "brave", "cruel", "tired", "strange"]
_NOUNS = ["king", "girl", "wizard", "captain", "doctor", "sister", "stranger", "hero",
          "villain", "queen", "boy", "detective"]
_VERBS = ["kills", "saves", "betrays"]
_PATIENTS = ["me", "him", "her"]
_ADVS = ["finally", "slowly", "suddenly", "quietly", "again"]


def _synth_twin(rng):
    """One sentence skeleton; returns tokens, arcs (with a placeholder) and genres."""
    tokens, arcs = [], []

    def push(word):
        tokens.append(Token(word))
        return len(tokens)

    det = push(_DETS[rng.integers(len(_DETS))])
    adj = push(_ADJS[rng.integers(len(_ADJS))]) if rng.random() < 0.5 else None
    subj = push(_NOUNS[rng.integers(len(_NOUNS))])
    verb = push(_VERBS[rng.integers(len(_VERBS))])
    patient = push(_PATIENTS[rng.integers(len(_PATIENTS))])
    adv = push(_ADVS[rng.integers(len(_ADVS))]) if rng.random() < 0.6 else None
    punct = push(".")
    arcs.append(Arc(subj, det, "det"))
    if adj:
        arcs.append(Arc(subj, adj, "amod"))
    arcs.append(Arc(verb, subj, "nsubj"))
    arcs.append(Arc(0, verb, "root"))
    arcs.append(Arc(verb, patient, None))  # relation decided per twin
    if adv:
        arcs.append(Arc(verb, adv, "advmod"))
    arcs.append(Arc(verb, punct, "punct"))
    n_genres = 1 + int(rng.integers(2))
    genres = sorted(rng.choice(GENRE_POOL, size=n_genres, replace=False).tolist())
    return tokens, arcs, genres


def synth_corpus(n_records, seed=0):
    """Twin records separable only through one relation label.

    Each pair shares tokens, arc topology and genres; the positive twin links
    verb and patient with ``dobj``, the negative twin with ``nsubj``.
    """
    if n_records < 2:
        raise DataError("synth_corpus needs at least 2 records")
    rng = make_rng(seed)
    records = []
    n_pairs = (n_records + 1) // 2
    for i in range(n_pairs):
        tokens, arcs, genres = _synth_twin(rng)
        for label, rel in ((1, "dobj"), (0, "nsubj")):
            if len(records) == n_records:
                break
            twin_arcs = [Arc(a.head, a.dep, rel if a.rel is None else a.rel) for a in arcs]
            records.append(Record(f"synth-{i:05d}-{'pos' if label else 'neg'}",
                                  list(tokens), twin_arcs, list(genres), label))
    return records
