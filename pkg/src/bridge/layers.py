"""Message-passing layers: token-level cross-attention and vector GNN layers."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Graph
from .encoder import uniform_param
from .tensor import ContractError, DimensionError, Tensor

VARIANTS = ("TokenXAttn", "GCN", "EdgeAttn")
AGGREGATIONS = ("sum", "mean")
SCHEMES = ("uniform-one", "mean-degree", "gcn-degree", "learned")
COMPRESS_MODES = ("mean", "last")
TOKEN_VARIANTS = ("TokenXAttn",)


class LayerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One message-passing layer.

    ``weights=None`` picks the variant default: uniform-one for TokenXAttn,
    gcn-degree for GCN, learned for EdgeAttn.  Pairing ``f_agg="mean"`` with
    mean-degree weights divides by the degree twice and needs
    ``allow_double_normalization``.
    """

    variant: str = "TokenXAttn"
    f_agg: str = "mean"
    weights: str | None = None
    allow_double_normalization: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise LayerConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.f_agg not in AGGREGATIONS:
            raise LayerConfigError(f"f_agg must be one of {AGGREGATIONS}, got {self.f_agg!r}")
        if self.weights is None:
            default = {"TokenXAttn": "uniform-one", "GCN": "gcn-degree", "EdgeAttn": "learned"}
            object.__setattr__(self, "weights", default[self.variant])
        if self.weights not in SCHEMES:
            raise LayerConfigError(f"weights must be one of {SCHEMES}, got {self.weights!r}")
        if self.variant == "GCN" and self.weights != "gcn-degree":
            raise LayerConfigError("GCN layers use gcn-degree weights")
        if self.variant == "EdgeAttn" and self.weights != "learned":
            raise LayerConfigError("EdgeAttn layers use learned weights")
        if (self.f_agg == "mean" and self.weights == "mean-degree"
                and not self.allow_double_normalization):
            raise LayerConfigError(
                "f_agg='mean' with mean-degree weights normalizes twice; "
                "set allow_double_normalization to force it")

    @property
    def is_token_layer(self) -> bool:
        return self.variant in TOKEN_VARIANTS

    def to_dict(self) -> dict:
        return {"variant": self.variant, "f_agg": self.f_agg, "weights": self.weights,
                "allow_double_normalization": self.allow_double_normalization}


# -- single-node building blocks ---------------------------------------------------


def edge_weight(scheme: str, i: int, j: int, graph: Graph, params=None) -> float:
    """Weight of the message ``j -> i``.

    For the learned scheme ``params`` is ``(a, Z)``: the attention vector of
    length ``2d`` and the ``(N, d)`` node vectors it scores.
    """
    nb = graph.neighbors(i)
    if not graph.has_edge(i, j):
        raise ContractError(f"node {j} is not a neighbor of {i}")
    if scheme == "uniform-one":
        return 1.0
    if scheme == "mean-degree":
        return 1.0 / len(nb)
    if scheme == "gcn-degree":
        return 1.0 / math.sqrt(graph.degree(i) * graph.degree(j))
    if scheme == "learned":
        a, z = params
        a, z = np.asarray(a, dtype=np.float64), np.asarray(z, dtype=np.float64)
        raw = np.array([np.concatenate([z[i], z[k]]) @ a for k in nb])
        raw = np.where(raw > 0, raw, 0.2 * raw)
        e = np.exp(raw - raw.max())
        return float(e[np.searchsorted(nb, j)] / e.sum())
    raise LayerConfigError(f"unknown edge-weight scheme {scheme!r}")


@dataclass
class XAttnParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor


def token_cross_attention_message(x_i: Tensor, x_j: Tensor, p: XAttnParams, mask_j=None) -> Tensor:
    """Message ``H_{i<-j}`` (``M_i x d_h``): every token of ``i`` attends over the tokens of ``j``."""
    if x_i.ndim != 2 or x_j.ndim != 2:
        raise DimensionError(f"token matrices must be 2-d, got {x_i.shape} and {x_j.shape}")
    if x_i.shape[1] != x_j.shape[1] or x_i.shape[1] != p.wq.shape[0]:
        raise DimensionError(f"width mismatch: X_i {x_i.shape}, X_j {x_j.shape}, W_Q {p.wq.shape}")
    if x_i.shape[0] < 1 or x_j.shape[0] < 1:
        raise ContractError("token matrices need at least one row")
    q = x_i @ p.wq
    k = x_j @ p.wk
    v = x_j @ p.wv
    logits = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(p.wq.shape[1]))
    mask = None if mask_j is None else np.asarray(mask_j, dtype=bool)[None, :]
    return T.softmax_rows(logits, mask=mask) @ v


def aggregate_messages(messages: Sequence[Tensor], weights: Sequence, f_agg: str,
                       shape: tuple[int, ...] | None = None) -> Tensor:
    """``sum_j w_ij H_{i<-j}``, divided by the neighbor count for ``mean``.

    An empty neighborhood gives a zero matrix of ``shape``.
    """
    if len(messages) != len(weights):
        raise ContractError(f"{len(messages)} messages but {len(weights)} weights")
    if f_agg not in AGGREGATIONS:
        raise LayerConfigError(f"f_agg must be one of {AGGREGATIONS}")
    if not messages:
        if shape is None:
            raise ContractError("shape is required for an empty neighborhood")
        return Tensor(np.zeros(shape))
    first = messages[0].shape
    for m in messages:
        if m.shape != first:
            raise DimensionError(f"message shapes differ: {first} vs {m.shape}")
    acc = None
    for m, w in zip(messages, weights):
        term = m * w
        acc = term if acc is None else acc + term
    if f_agg == "mean":
        acc = T.scale(acc, 1.0 / len(messages))
    return acc


def last_valid(valid: np.ndarray) -> np.ndarray:
    valid = np.asarray(valid, dtype=bool)
    m = valid.shape[-1]
    return m - 1 - np.argmax(valid[..., ::-1], axis=-1)


def compress(x: Tensor, mode: str = "mean", valid=None) -> Tensor:
    """Pool a token matrix ``(M, d)`` (or a batch ``(B, M, d)``) to vectors over its real rows."""
    if mode not in COMPRESS_MODES:
        raise LayerConfigError(f"compress mode must be one of {COMPRESS_MODES}")
    if valid is None:
        valid = np.ones(x.shape[:-1], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != x.shape[:-1]:
        raise DimensionError(f"mask {valid.shape} does not match token matrix {x.shape}")
    if not valid.any(axis=-1).all():
        raise ContractError("compress: every row is PAD")
    if mode == "mean":
        return T.masked_mean_rows(x, valid)
    pos = last_valid(valid)
    if x.ndim == 2:
        return T.gather(x, int(pos))
    return T.select_rows(x, pos)


# -- layers -------------------------------------------------------------------------


def _with_self_loops(graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    tgt, src = graph.directed()
    n = graph.num_nodes
    t = np.concatenate([tgt, np.arange(n)])
    s = np.concatenate([src, np.arange(n)])
    order = np.lexsort((s, t))
    return t[order], s[order]


def _edge_scores(z: Tensor, a: Tensor, tgt: np.ndarray, src: np.ndarray, n: int) -> Tensor:
    pair = T.concat([T.gather(z, tgt), T.gather(z, src)], axis=-1)
    raw = T.leaky_relu(T.tsum(pair * a, axis=-1), 0.2)
    return T.segment_softmax(raw, tgt, n)


class TokenXAttnLayer:
    """Cross-attention messages between the token matrices of neighbors."""

    def __init__(self, spec: LayerSpec, d: int, rng: np.random.Generator):
        self.spec = spec
        self.d = d
        self.params = {
            "wq": uniform_param(rng, (d, d), d, "wq"),
            "wk": uniform_param(rng, (d, d), d, "wk"),
            "wv": uniform_param(rng, (d, d), d, "wv"),
        }
        if spec.weights == "learned":
            self.params["a"] = uniform_param(rng, (2 * d,), d, "a")

    @property
    def xattn(self) -> XAttnParams:
        return XAttnParams(self.params["wq"], self.params["wk"], self.params["wv"])

    def edge_weights(self, x: Tensor, valid: np.ndarray, graph: Graph, compress_mode: str):
        tgt, src = graph.directed()
        scheme = self.spec.weights
        deg = graph.degrees.astype(np.float64)
        if scheme == "uniform-one":
            return np.ones(len(tgt))
        if scheme == "mean-degree":
            return 1.0 / deg[tgt]
        if scheme == "gcn-degree":
            return 1.0 / np.sqrt(deg[tgt] * deg[src])
        z = compress(x, compress_mode, valid)
        return _edge_scores(z, self.params["a"], tgt, src, graph.num_nodes)

    def forward(self, x: Tensor, valid: np.ndarray, graph: Graph, compress_mode: str = "mean") -> Tensor:
        """Aggregated messages ``H`` of shape ``(N, M, d)``; zero for isolated nodes."""
        n = graph.num_nodes
        tgt, src = graph.directed()
        if len(tgt) == 0:
            return Tensor(np.zeros(x.shape))
        p = self.params
        q = x @ p["wq"]
        k = x @ p["wk"]
        v = x @ p["wv"]
        logits = T.scale(T.gather(q, tgt) @ T.transpose(T.gather(k, src)), 1.0 / math.sqrt(self.d))
        att = T.softmax_rows(logits, mask=valid[src][:, None, :])
        msgs = att @ T.gather(v, src)
        w = self.edge_weights(x, valid, graph, compress_mode)
        w = T.reshape(w, (-1, 1, 1)) if isinstance(w, Tensor) else w[:, None, None]
        h = T.segment_sum(msgs * w, tgt, n)
        if self.spec.f_agg == "mean":
            deg = graph.degrees
            inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
            h = h * inv[:, None, None]
        return h


class GCNLayer:
    """``relu(D^-1/2 (A + I) D^-1/2 Z W)`` with D the degree matrix of ``A + I``."""

    def __init__(self, spec: LayerSpec, d: int, rng: np.random.Generator):
        self.spec = spec
        self.params = {"w": uniform_param(rng, (d, d), d, "w")}

    def forward(self, z: Tensor, graph: Graph) -> Tensor:
        tgt, src = _with_self_loops(graph)
        deg = graph.degrees.astype(np.float64) + 1.0
        coef = 1.0 / np.sqrt(deg[tgt] * deg[src])
        zw = z @ self.params["w"]
        return T.relu(T.segment_sum(T.gather(zw, src) * coef[:, None], tgt, graph.num_nodes))


class EdgeAttnLayer:
    """Attention-weighted average over the neighborhood (self included), then ``W`` and relu."""

    def __init__(self, spec: LayerSpec, d: int, rng: np.random.Generator):
        self.spec = spec
        self.params = {"w": uniform_param(rng, (d, d), d, "w"),
                       "a": uniform_param(rng, (2 * d,), d, "a")}

    def attention(self, z: Tensor, graph: Graph) -> tuple[Tensor, np.ndarray, np.ndarray]:
        tgt, src = _with_self_loops(graph)
        return _edge_scores(z, self.params["a"], tgt, src, graph.num_nodes), tgt, src

    def forward(self, z: Tensor, graph: Graph) -> Tensor:
        alpha, tgt, src = self.attention(z, graph)
        agg = T.segment_sum(T.gather(z, src) * T.reshape(alpha, (-1, 1)), tgt, graph.num_nodes)
        return T.relu(agg @ self.params["w"])


def make_layer(spec: LayerSpec, d: int, rng: np.random.Generator):
    cls = {"TokenXAttn": TokenXAttnLayer, "GCN": GCNLayer, "EdgeAttn": EdgeAttnLayer}[spec.variant]
    return cls(spec, d, rng)


def vector_layer_forward(z: Tensor, graph: Graph, layer) -> Tensor:
    """Apply a GCN or EdgeAttn layer to node vectors ``(N, d)``."""
    if layer.spec.is_token_layer:
        raise LayerConfigError(f"{layer.spec.variant} is not a vector layer")
    if z.ndim != 2 or z.shape[0] != graph.num_nodes:
        raise DimensionError(f"expected ({graph.num_nodes}, d) node vectors, got {z.shape}")
    return layer.forward(z, graph)
