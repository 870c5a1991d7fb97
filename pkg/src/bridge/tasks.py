"""Link prediction and node classification on top of :class:`BridgeModel`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .data import Dataset, Graph, UNLABELED
from .metrics import EvalReport, hits_at_k, max_f1, mrr, pr_auc, rank_of_positive
from .model import BridgeModel
from .rng import substream
from .tensor import DimensionError, NonFiniteError, Tape, Tensor, no_tape, reverse_gradients

log = logging.getLogger(__name__)

TASKS = ("link", "fraud")


class NegativeSamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    k_train: int = 5
    freeze_encoder: bool = False
    mask_target_edges: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.k_train < 1:
            raise ValueError("batch_size and k_train must be >= 1")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# -- scoring and losses ----------------------------------------------------------------


def score_link(h_u, h_v) -> Tensor:
    """Dot-product link score; batched over leading axes."""
    h_u = h_u if isinstance(h_u, Tensor) else Tensor(h_u)
    h_v = h_v if isinstance(h_v, Tensor) else Tensor(h_v)
    if h_u.shape != h_v.shape:
        raise DimensionError(f"score_link: widths differ, {h_u.shape} vs {h_v.shape}")
    return T.tsum(h_u * h_v, axis=-1)


def link_loss(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Mean BCE-with-logits over positives (label 1) and negatives (label 0)."""
    pos_scores = pos_scores if isinstance(pos_scores, Tensor) else Tensor(pos_scores)
    neg_scores = neg_scores if isinstance(neg_scores, Tensor) else Tensor(neg_scores)
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise ValueError("link_loss needs at least one positive and one negative")
    pos = T.reshape(pos_scores, (-1,))
    neg = T.reshape(neg_scores, (-1,))
    targets = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    return T.bce_with_logits(T.concat([pos, neg], axis=0), targets)


def classify_nodes(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-node probability ``sigmoid(h @ w + b)``, shape ``(N,)``."""
    return T.reshape(T.sigmoid(h @ w + b), (-1,))


def candidate_pool(graph: Graph, u: int, exclude=()) -> np.ndarray:
    blocked = np.zeros(graph.num_nodes, dtype=bool)
    blocked[u] = True
    blocked[graph.neighbors(u)] = True
    blocked[np.asarray(list(exclude), dtype=np.int64)] = True
    return np.flatnonzero(~blocked)


def sample_negatives(graph: Graph, u: int, k: int, rng: np.random.Generator, exclude=(),
                     pool: np.ndarray | None = None) -> np.ndarray:
    """``k`` distinct nodes, uniformly without replacement, that are neither ``u`` nor its neighbors."""
    if pool is None:
        pool = candidate_pool(graph, u, exclude)
    if len(pool) < k:
        raise NegativeSamplingError(
            f"node {u}: only {len(pool)} non-neighbor candidates, cannot draw {k}")
    return rng.choice(pool, size=k, replace=False)


# -- optimizer ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training ---------------------------------------------------------------------------


def trainable_parameters(model: BridgeModel, cfg: TrainConfig) -> dict[str, Tensor]:
    named = model.named_parameters()
    if cfg.freeze_encoder:
        named = {k: v for k, v in named.items() if not k.startswith("encoder.")}
    return named


def _link_batches(ds: Dataset, cfg: TrainConfig, rng: np.random.Generator):
    edges = ds.split["train"]
    order = rng.permutation(len(edges))
    for start in range(0, len(edges), cfg.batch_size):
        batch = edges[order[start:start + cfg.batch_size]].copy()
        flip = rng.random(len(batch)) < 0.5
        batch[flip] = batch[flip][:, ::-1]
        yield batch


def _link_step_loss(model, tokens, valid, train_graph, train_edges, batch, pools, cfg, rng):
    negs = np.stack([sample_negatives(train_graph, int(u), cfg.k_train, rng, pool=pools[u])
                     for u in batch[:, 0]])
    graph = train_graph
    if cfg.mask_target_edges:
        held = {tuple(sorted(e)) for e in batch.tolist()}
        keep = [e for e in train_edges.tolist() if tuple(e) not in held]
        graph = Graph(train_graph.num_nodes, keep)
    h = model.forward(tokens, valid, graph)
    pos = score_link(T.gather(h, batch[:, 0]), T.gather(h, batch[:, 1]))
    anchors = np.repeat(batch[:, 0], cfg.k_train)
    neg = score_link(T.gather(h, anchors), T.gather(h, negs.reshape(-1)))
    return link_loss(pos, neg), negs


def _node_batches(ds: Dataset, cfg: TrainConfig, rng: np.random.Generator):
    nodes = ds.split["train"]
    order = rng.permutation(len(nodes))
    for start in range(0, len(nodes), cfg.batch_size):
        yield nodes[order[start:start + cfg.batch_size]]


def train(ds: Dataset, model: BridgeModel, cfg: TrainConfig, task: str, seed: int,
          grad_log: dict[str, bool] | None = None) -> tuple[BridgeModel, list[float]]:
    """Full-graph Adam training; returns the model (updated in place) and per-epoch mean loss.

    ``grad_log``, if given, records per parameter whether it ever received a
    nonzero gradient.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if ds.split is None:
        raise ValueError("dataset has no split")
    named = trainable_parameters(model, cfg)
    names, params = list(named), list(named.values())
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    tokens, valid = model.inputs(ds)
    rng = substream(seed, f"train/{task}")
    history: list[float] = []

    if task == "link":
        train_graph = ds.train_graph()
        train_edges = train_graph.edges
        if len(train_edges) == 0:
            raise ValueError("no training edges")
        pools = [candidate_pool(train_graph, u) for u in range(ds.num_nodes)]
    else:
        if ds.labels is None or len(ds.split["train"]) == 0:
            raise ValueError("node task needs labeled training nodes")
        if model.head is None:
            raise ValueError("node task needs a model with a classification head")

    for epoch in range(cfg.epochs):
        losses = []
        batches = _link_batches(ds, cfg, rng) if task == "link" else _node_batches(ds, cfg, rng)
        for step, batch in enumerate(batches):
            try:
                with Tape() as tape:
                    if task == "link":
                        loss, negs = _link_step_loss(model, tokens, valid, train_graph, train_edges,
                                                     batch, pools, cfg, rng)
                        for u, row in zip(batch[:, 0], negs):
                            assert not np.isin(row, train_graph.neighbors(u)).any()
                    else:
                        h = model.forward(tokens, valid, ds.graph)
                        logits = T.reshape(model.logits(T.gather(h, batch)), (-1,))
                        loss = T.bce_with_logits(logits, ds.labels[batch].astype(np.float64))
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"epoch {epoch} step {step}: loss is {value}")
            grads = reverse_gradients(tape, loss, params)
            if grad_log is not None:
                for n, g in zip(names, grads):
                    grad_log[n] = grad_log.get(n, False) or bool(np.any(g != 0))
            opt.step(grads)
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return model, history


# -- evaluation ---------------------------------------------------------------------------


def node_representations(ds: Dataset, model: BridgeModel, graph: Graph) -> np.ndarray:
    with no_tape():
        tokens, valid = model.inputs(ds)
        return model.forward(tokens, valid, graph).data


def evaluate_link(ds: Dataset, model: BridgeModel, split: str, seed: int, negatives: int = 100,
                  ks=(1, 3, 5, 10), config_digest: str = "") -> EvalReport:
    """Rank held-out friendships against ``negatives`` sampled non-neighbors.

    Each held-out edge ``(u, v)`` yields one query per endpoint: ``v`` ranked
    for anchor ``u`` and ``u`` ranked for anchor ``v``.
    """
    train_graph = ds.train_graph()
    h = node_representations(ds, model, train_graph)
    rng = substream(seed, f"eval/{split}")
    ranks = []
    edges = ds.split[split]
    for u, v in np.concatenate([edges, edges[:, ::-1]]):
        negs = sample_negatives(train_graph, int(u), negatives, rng, exclude=(int(v),))
        # One matvec for positive and negatives so exact ties stay exact.
        scores = h[np.concatenate([[v], negs])] @ h[u]
        ranks.append(rank_of_positive(float(scores[0]), scores[1:]))
    if not ranks:
        raise ValueError(f"split {split!r} has no edges")
    return EvalReport(task="link", split=split, query_count=len(ranks), seed=seed,
                      config_digest=config_digest, mrr=mrr(ranks),
                      hits={k: hits_at_k(ranks, k) for k in ks})


def evaluate_fraud(ds: Dataset, model: BridgeModel, split: str, seed: int,
                   config_digest: str = "") -> EvalReport:
    nodes = ds.split[split]
    labels = ds.labels[nodes]
    if np.any(labels == UNLABELED):
        raise ValueError("evaluation split contains unlabeled nodes")
    with no_tape():
        h = node_representations(ds, model, ds.graph)
        probs = classify_nodes(Tensor(h[nodes]), model.head["w"], model.head["b"]).data
    return EvalReport(task="fraud", split=split, query_count=len(nodes), seed=seed,
                      config_digest=config_digest, max_f1=max_f1(probs, labels),
                      pr_auc=pr_auc(probs, labels))
