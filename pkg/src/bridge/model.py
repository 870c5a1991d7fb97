"""The full sequence-on-graph stack: encoder, message passing, pooling, head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, Graph, pad_batch
from .encoder import EncoderConfig, SeqEncoder, uniform_param
from .layers import COMPRESS_MODES, LayerConfigError, LayerSpec, compress, make_layer
from .rng import substream
from .tensor import Tensor

PARAM_GROUPS = ("encoder", "xattn", "vector", "head")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    heads: int = 2
    blocks: int = 2
    max_len: int = 64
    layers: tuple[LayerSpec, ...] = field(default_factory=lambda: (LayerSpec(),))
    compress: str = "mean"
    graph_only: bool = False

    def __post_init__(self):
        if self.compress not in COMPRESS_MODES:
            raise LayerConfigError(f"compress must be one of {COMPRESS_MODES}")
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_dict(self) -> dict:
        return {"d": self.d, "heads": self.heads, "blocks": self.blocks, "max_len": self.max_len,
                "layers": [s.to_dict() for s in self.layers], "compress": self.compress,
                "graph_only": self.graph_only}


class BridgeModel:
    """Sequence encoder followed by ``L`` message-passing layers.

    Token layers update the token stream ``X <- X + H``.  At the first vector
    layer the stream is pooled once into ``Z`` and later vector layers apply
    ``Z <- Z + layer(Z)``; token layers after that point are rejected.
    """

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int, head: bool = False):
        self.cfg = cfg
        self.vocab_size = vocab_size
        rng = substream(seed, "init")
        self.encoder = SeqEncoder(
            EncoderConfig(vocab_size=vocab_size, d=cfg.d, heads=cfg.heads, blocks=cfg.blocks,
                          max_len=cfg.max_len), rng)
        seen_vector = False
        for spec in cfg.layers:
            if spec.is_token_layer and seen_vector:
                raise LayerConfigError("token layers must precede vector layers")
            seen_vector |= not spec.is_token_layer
        self.layers = [make_layer(spec, cfg.d, rng) for spec in cfg.layers]
        self.head = None
        if head:
            self.head = {"w": uniform_param(rng, (cfg.d, 1), cfg.d, "w"),
                         "b": Tensor(np.zeros(1), requires_grad=True, name="b")}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.params.items()})
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}
        for name in self.named_parameters():
            if name.startswith("encoder."):
                groups["encoder"].append(name)
            elif name.startswith("head."):
                groups["head"].append(name)
            else:
                i = int(name.split(".")[1])
                groups["xattn" if self.layers[i].spec.is_token_layer else "vector"].append(name)
        return {g: names for g, names in groups.items() if names}

    def inputs(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Padded token ids and validity mask for every node of ``ds``."""
        if len(ds.vocab) > self.vocab_size:
            raise LayerConfigError(
                f"dataset vocabulary ({len(ds.vocab)}) exceeds the model's ({self.vocab_size})")
        seqs = ds.constant_sequences().sequences if self.cfg.graph_only else ds.sequences
        return pad_batch(seqs)

    def forward(self, tokens: np.ndarray, valid: np.ndarray, graph: Graph) -> Tensor:
        """Node representations ``(N, d)``."""
        if graph.num_nodes != tokens.shape[0]:
            raise LayerConfigError(f"graph has {graph.num_nodes} nodes, batch has {tokens.shape[0]}")
        x = self.encoder.forward(tokens, valid)
        z = None
        for layer in self.layers:
            if layer.spec.is_token_layer:
                x = x + layer.forward(x, valid, graph, self.cfg.compress)
            else:
                if z is None:
                    z = compress(x, self.cfg.compress, valid)
                z = z + layer.forward(z, graph)
        return compress(x, self.cfg.compress, valid) if z is None else z

    def logits(self, h: Tensor) -> Tensor:
        if self.head is None:
            raise LayerConfigError("model was built without a classification head")
        return h @ self.head["w"] + self.head["b"]


def bridge_forward(ds: Dataset, model: BridgeModel, graph: Graph | None = None) -> Tensor:
    """Representations of every node in ``ds``, passing messages over ``graph`` (default: ``ds.graph``)."""
    tokens, valid = model.inputs(ds)
    return model.forward(tokens, valid, ds.graph if graph is None else graph)
