"""Graphs with per-node event sequences: containers, ingestion and generators."""

from __future__ import annotations

import json
import os
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .rng import substream

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
FRAUD, BENIGN, UNLABELED = 1, 0, -1
GEOHASH_ALPHABET = frozenset("0123456789bcdefghjkmnpqrstuvwxyz")
DEFAULT_MAX_LEN = 64


class IngestError(ValueError):
    """A record in an input file is malformed or inconsistent."""


class GraphError(ValueError):
    pass


class SyntheticSpecError(ValueError):
    pass


class Graph:
    """Simple undirected graph on nodes ``0..num_nodes-1``.

    Edges are stored once as ``(u, v)`` with ``u < v``; duplicates collapse.
    Self-loops are rejected.
    """

    def __init__(self, num_nodes: int, edges: Iterable[tuple[int, int]] = ()):
        if num_nodes < 0:
            raise GraphError("num_nodes must be nonnegative")
        arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        arr = arr.reshape(-1, 2)
        if arr.size:
            if arr.min() < 0 or arr.max() >= num_nodes:
                raise GraphError(f"edge endpoint outside 0..{num_nodes - 1}")
            loops = arr[:, 0] == arr[:, 1]
            if loops.any():
                raise GraphError(f"self-loop on node {int(arr[loops][0, 0])}")
            arr = np.unique(np.sort(arr, axis=1), axis=0)
        self.num_nodes = int(num_nodes)
        self.edges = arr
        self.edges.setflags(write=False)
        both = np.concatenate([arr, arr[:, ::-1]]) if arr.size else arr
        order = np.lexsort((both[:, 1], both[:, 0])) if arr.size else np.zeros(0, dtype=np.int64)
        both = both[order]
        # Directed view (target, source), sorted by target then source.
        self._tgt = np.ascontiguousarray(both[:, 0]) if arr.size else np.zeros(0, dtype=np.int64)
        self._src = np.ascontiguousarray(both[:, 1]) if arr.size else np.zeros(0, dtype=np.int64)
        self._deg = np.bincount(self._tgt, minlength=self.num_nodes).astype(np.int64)
        self._ptr = np.concatenate([[0], np.cumsum(self._deg)])

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        return self._src[self._ptr[i]:self._ptr[i + 1]]

    def degree(self, i: int) -> int:
        return int(self._deg[i])

    @property
    def degrees(self) -> np.ndarray:
        return self._deg

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        k = np.searchsorted(nb, v)
        return bool(k < len(nb) and nb[k] == v)

    def directed(self) -> tuple[np.ndarray, np.ndarray]:
        """``(target, source)`` for every ordered neighbor pair, sorted by target then source."""
        return self._tgt, self._src

    def __eq__(self, other) -> bool:
        return (isinstance(other, Graph) and self.num_nodes == other.num_nodes
                and np.array_equal(self.edges, other.edges))

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


class Vocab:
    """Token string <-> id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos = [PAD_TOKEN, UNK_TOKEN]
        self._stoi = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def __len__(self) -> int:
        return len(self._itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: Graph
    sequences: tuple[np.ndarray, ...]
    vocab: Vocab
    labels: np.ndarray | None = None
    split: dict[str, np.ndarray] | None = field(default=None)

    def __post_init__(self):
        if len(self.sequences) != self.graph.num_nodes:
            raise ValueError(f"{len(self.sequences)} sequences for {self.graph.num_nodes} nodes")
        for s in self.sequences:
            s.setflags(write=False)
            if len(s) == 0:
                raise ValueError("empty sequence; pad with PAD first")
            if s.size and s.max() >= len(self.vocab):
                raise ValueError("token id outside vocabulary")
        if self.labels is not None:
            self.labels.setflags(write=False)
        if self.split is not None:
            for part in self.split.values():
                part.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.graph != other.graph or self.vocab != other.vocab:
            return False
        if len(self.sequences) != len(other.sequences) or not all(
                np.array_equal(a, b) for a, b in zip(self.sequences, other.sequences)):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        if (self.split is None) != (other.split is None):
            return False
        if self.split is not None:
            if self.split.keys() != other.split.keys():
                return False
            return all(np.array_equal(self.split[k], other.split[k]) for k in self.split)
        return True

    def with_sequences(self, sequences: Sequence[np.ndarray]) -> Dataset:
        return replace(self, sequences=tuple(np.asarray(s, dtype=np.int64) for s in sequences))

    def constant_sequences(self) -> Dataset:
        """Replace every sequence by ``[PAD]`` (graph-only ablation)."""
        return self.with_sequences([np.array([PAD])] * self.num_nodes)

    def train_graph(self) -> Graph:
        if self.split is None or self.split["train"].ndim != 2:
            raise ValueError("dataset carries no edge split")
        return Graph(self.num_nodes, self.split["train"])


def valid_positions(tokens: np.ndarray) -> np.ndarray:
    """Boolean mask of real positions in a (padded) token array.

    PAD positions are masked, except that a sequence made only of PAD is the
    padded empty sequence and keeps its first position.
    """
    tokens = np.asarray(tokens)
    valid = tokens != PAD
    empty = ~valid.any(axis=-1)
    if np.any(empty):
        valid = valid.copy()
        valid[..., 0] = valid[..., 0] | empty
    return valid


def pad_batch(sequences: Sequence[np.ndarray], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences with PAD into ``(N, M)`` ids plus the validity mask."""
    m = max((len(s) for s in sequences), default=1)
    m = max(m, 1) if length is None else length
    out = np.full((len(sequences), m), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        if len(s) > m:
            raise ValueError(f"sequence {i} longer than {m}")
        out[i, :len(s)] = s
    return out, valid_positions(out)


# -- derived structure -----------------------------------------------------------


def tokenize_geohash8(g: str) -> list[str]:
    """Split a geohash8 into its prefixes of length 2, 4, 6 and 8."""
    if not isinstance(g, str) or len(g) != 8:
        raise IngestError(f"geohash {g!r}: expected 8 characters")
    bad = sorted(set(g) - GEOHASH_ALPHABET)
    if bad:
        raise IngestError(f"geohash {g!r}: characters {''.join(bad)!r} not in the base-32 alphabet")
    return [g[:k] for k in (2, 4, 6, 8)]


def build_cooccurrence_graph(user_items: Sequence[Iterable], threshold: int = 3) -> Graph:
    """Connect users that share at least ``threshold`` items."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    by_item: dict = {}
    for u, items in enumerate(user_items):
        for it in set(items):
            by_item.setdefault(it, []).append(u)
    shared: Counter = Counter()
    for users in by_item.values():
        for a in range(len(users)):
            for b in range(a + 1, len(users)):
                shared[(users[a], users[b])] += 1
    edges = [pair for pair, c in shared.items() if c >= threshold]
    return Graph(len(user_items), edges)


def derive_fraud_labels(user_reviews: Sequence[Sequence[bool]], min_reviews: int = 5,
                        frac: float = 0.7) -> np.ndarray:
    """Label users from per-review *unhelpful* flags.

    Users with fewer than ``min_reviews`` reviews are unlabeled (-1); the
    rest are fraud (1) iff the unhelpful fraction strictly exceeds ``frac``.
    """
    if min_reviews < 1 or not 0.0 < frac < 1.0:
        raise ValueError("need min_reviews >= 1 and 0 < frac < 1")
    out = np.full(len(user_reviews), UNLABELED, dtype=np.int64)
    for u, flags in enumerate(user_reviews):
        n = len(flags)
        if n >= min_reviews:
            out[u] = FRAUD if sum(bool(f) for f in flags) / n > frac else BENIGN
    return out


# -- files -------------------------------------------------------------------------


def _read_records(path: str, what: str) -> list[tuple[int, dict]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{what} line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise IngestError(f"{what} line {lineno}: expected an object")
            records.append((lineno, rec))
    return records


def _int_field(rec: dict, key: str, where: str) -> int:
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise IngestError(f"{where}: field {key!r} must be a nonnegative integer")
    return v


def _assemble(seqs: list[list[str]], edges: list[tuple[int, int]], labels: np.ndarray | None,
              max_len: int) -> Dataset:
    vocab = Vocab()
    ids = []
    for tokens in seqs:
        kept = tokens[-max_len:] if len(tokens) > max_len else tokens
        arr = np.array([vocab.add(t) for t in kept] or [PAD], dtype=np.int64)
        ids.append(arr)
    return Dataset(Graph(len(seqs), edges), tuple(ids), vocab, labels)


def ingest_dataset(nodes_path: str, edges_path: str, labels_path: str | None = None,
                   max_len: int = DEFAULT_MAX_LEN) -> Dataset:
    """Read line-delimited JSON node and edge files into a :class:`Dataset`.

    Sequences longer than ``max_len`` keep their most recent events.
    """
    by_id: dict[int, tuple[list[str], int | None]] = {}
    for lineno, rec in _read_records(nodes_path, "nodes"):
        where = f"nodes line {lineno}"
        unknown = set(rec) - {"id", "seq", "label"}
        if unknown:
            raise IngestError(f"{where}: unknown fields {sorted(unknown)}")
        i = _int_field(rec, "id", where)
        seq = rec.get("seq")
        if not isinstance(seq, list) or not all(isinstance(t, str) for t in seq):
            raise IngestError(f"{where}: field 'seq' must be an array of strings")
        if any(t in (PAD_TOKEN, UNK_TOKEN) for t in seq):
            raise IngestError(f"{where}: reserved token in 'seq'")
        label = rec.get("label")
        if label is not None and label not in (0, 1):
            raise IngestError(f"{where}: field 'label' must be 0 or 1")
        if i in by_id:
            raise IngestError(f"{where}: duplicate node id {i}")
        by_id[i] = (seq, label)
    n = len(by_id)
    if set(by_id) != set(range(n)):
        missing = min(set(range(n)) - set(by_id))
        raise IngestError(f"nodes: ids must be dense 0..{n - 1}; {missing} is missing")

    edges = []
    for lineno, rec in _read_records(edges_path, "edges"):
        where = f"edges line {lineno}"
        u, v = _int_field(rec, "u", where), _int_field(rec, "v", where)
        if u >= n or v >= n:
            raise IngestError(f"{where}: endpoint {max(u, v)} is not a node id")
        if u == v:
            raise IngestError(f"{where}: self-loop on node {u}")
        edges.append((u, v))

    labels = None
    raw = [by_id[i][1] for i in range(n)]
    if labels_path is not None:
        for lineno, rec in _read_records(labels_path, "labels"):
            where = f"labels line {lineno}"
            i = _int_field(rec, "id", where)
            if i >= n or rec.get("label") not in (0, 1):
                raise IngestError(f"{where}: bad id or label")
            raw[i] = rec["label"]
    if any(x is not None for x in raw):
        labels = np.array([UNLABELED if x is None else x for x in raw], dtype=np.int64)
    return _assemble([by_id[i][0] for i in range(n)], edges, labels, max_len)


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_dataset(ds: Dataset, directory: str) -> tuple[str, str]:
    """Write ``nodes.jsonl`` and ``edges.jsonl``; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    nodes_path = os.path.join(directory, "nodes.jsonl")
    edges_path = os.path.join(directory, "edges.jsonl")
    with open(nodes_path, "w", encoding="utf-8", newline="\n") as fh:
        for i, s in enumerate(ds.sequences):
            rec = {"id": i, "seq": [ds.vocab.token(t) for t in s if t != PAD]}
            if ds.labels is not None and ds.labels[i] != UNLABELED:
                rec["label"] = int(ds.labels[i])
            fh.write(_dumps(rec) + "\n")
    with open(edges_path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in ds.graph.edges:
            fh.write(_dumps({"u": int(u), "v": int(v)}) + "\n")
    return nodes_path, edges_path


# -- synthetic data -------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-community generator settings.

    Communities own disjoint token blocks of ``vocab_size // communities``
    tokens each.  With ``fraud_rate > 0`` every node is labeled, and fraud
    nodes draw a ``fraud_token_frac`` share of their events from a separate
    block of ``fraud_vocab_size`` tokens.
    """

    num_nodes: int
    communities: int
    tokens_per_node: int
    vocab_size: int
    intra_edge_prob: float
    inter_edge_prob: float
    fraud_rate: float = 0.0
    fraud_token_frac: float = 0.5
    fraud_vocab_size: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SyntheticSpecError(str(exc)) from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_synthetic_spec(path: str) -> SyntheticSpec:
    with open(path, encoding="utf-8") as fh:
        return SyntheticSpec.from_dict(json.load(fh))


def generate_synthetic(spec: SyntheticSpec, seed: int, max_len: int = DEFAULT_MAX_LEN) -> Dataset:
    n, c = spec.num_nodes, spec.communities
    if n == 0:
        return _assemble([], [], None, max_len)
    if not n >= c >= 1:
        raise SyntheticSpecError(f"need num_nodes >= communities >= 1, got {n}, {c}")
    for name in ("intra_edge_prob", "inter_edge_prob", "fraud_rate", "fraud_token_frac"):
        if not 0.0 <= getattr(spec, name) <= 1.0:
            raise SyntheticSpecError(f"{name} must lie in [0, 1]")
    block = spec.vocab_size // c
    if block < 1:
        raise SyntheticSpecError(f"vocab_size {spec.vocab_size} too small for {c} disjoint blocks")
    if spec.tokens_per_node < 0:
        raise SyntheticSpecError("tokens_per_node must be nonnegative")
    if spec.fraud_rate > 0 and spec.fraud_vocab_size < 1:
        raise SyntheticSpecError("fraud_vocab_size must be >= 1")

    community = np.arange(n) % c

    rng = substream(seed, "synthetic/edges")
    iu, iv = np.triu_indices(n, k=1)
    prob = np.where(community[iu] == community[iv], spec.intra_edge_prob, spec.inter_edge_prob)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], iv[keep]], axis=1)

    labels = None
    fraud = np.zeros(n, dtype=bool)
    if spec.fraud_rate > 0:
        fraud = substream(seed, "synthetic/labels").random(n) < spec.fraud_rate
        labels = fraud.astype(np.int64)

    rng = substream(seed, "synthetic/sequences")
    m = spec.tokens_per_node
    seqs = []
    for i in range(n):
        draws = rng.integers(0, block, size=m)
        toks = [f"c{community[i]}_{t}" for t in draws]
        if fraud[i]:
            swap = rng.random(m) < spec.fraud_token_frac
            fdraw = rng.integers(0, spec.fraud_vocab_size, size=m)
            toks = [f"f_{f}" if s else t for t, s, f in zip(toks, swap, fdraw)]
        seqs.append(toks)
    return _assemble(seqs, [tuple(e) for e in edges.tolist()], labels, max_len)


def community_of(n: int, communities: int) -> np.ndarray:
    """Community assignment used by :func:`generate_synthetic` (round-robin)."""
    return np.arange(n) % communities


# -- splits ---------------------------------------------------------------------------


def _partition(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)) -> list[np.ndarray]:
    perm = rng.permutation(n)
    n_valid = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_valid - n_test
    return [perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]]


def split_edges(ds: Dataset, seed: int) -> Dataset:
    """80/10/10 edge partition by seeded shuffle; each part keeps sorted edge order."""
    parts = _partition(ds.graph.num_edges, substream(seed, "split/edges"))
    split = {name: ds.graph.edges[np.sort(idx)].copy()
             for name, idx in zip(("train", "valid", "test"), parts)}
    return replace(ds, split=split)


def split_nodes(ds: Dataset, seed: int) -> Dataset:
    """80/10/10 partition of the labeled nodes, stratified by label.

    Stratifying keeps the rare class present in small evaluation splits,
    where precision-recall metrics would otherwise be undefined.
    """
    if ds.labels is None:
        raise ValueError("dataset has no labels")
    rng = substream(seed, "split/nodes")
    chunks: dict[str, list[np.ndarray]] = {"train": [], "valid": [], "test": []}
    for label in (FRAUD, BENIGN):
        members = np.flatnonzero(ds.labels == label)
        for name, idx in zip(chunks, _partition(len(members), rng)):
            chunks[name].append(members[idx])
    split = {name: np.sort(np.concatenate(parts)) for name, parts in chunks.items()}
    return replace(ds, split=split)
