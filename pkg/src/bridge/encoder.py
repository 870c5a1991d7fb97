"""Bidirectional transformer encoder: token ids -> per-token embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import pad_batch, valid_positions
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 32
    heads: int = 2
    blocks: int = 2
    max_len: int = 64

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.vocab_size, self.d, self.heads, self.max_len) < 1 or self.blocks < 0:
            raise ValueError("encoder sizes must be positive")


def uniform_param(rng: np.random.Generator, shape, d: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(d)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class SeqEncoder:
    """Pre-norm transformer blocks over learned token + position embeddings.

    Attention never looks at PAD keys, so real rows are unaffected by how
    much padding follows them.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dk = cfg.d, cfg.d // cfg.heads
        p: dict[str, Tensor] = {}
        p["tok_emb"] = uniform_param(rng, (cfg.vocab_size, d), d, "tok_emb")
        p["pos_emb"] = uniform_param(rng, (cfg.max_len, d), d, "pos_emb")
        for b in range(cfg.blocks):
            pre = f"block{b}."
            p[pre + "ln1_g"] = Tensor(np.ones(d), requires_grad=True)
            p[pre + "ln1_b"] = Tensor(np.zeros(d), requires_grad=True)
            for h in range(cfg.heads):
                for w in ("wq", "wk", "wv"):
                    p[f"{pre}{w}{h}"] = uniform_param(rng, (d, dk), d, w)
            p[pre + "wo"] = uniform_param(rng, (d, d), d, "wo")
            p[pre + "ln2_g"] = Tensor(np.ones(d), requires_grad=True)
            p[pre + "ln2_b"] = Tensor(np.zeros(d), requires_grad=True)
            p[pre + "w1"] = uniform_param(rng, (d, 4 * d), d, "w1")
            p[pre + "b1"] = Tensor(np.zeros(4 * d), requires_grad=True)
            p[pre + "w2"] = uniform_param(rng, (4 * d, d), d, "w2")
            p[pre + "b2"] = Tensor(np.zeros(d), requires_grad=True)
        for k, t in p.items():
            t.name = k
        self.params = p

    def forward(self, tokens: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        """Encode a padded batch ``tokens`` of shape ``(B, M)`` into ``(B, M, d)``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be (B, M), got {tokens.shape}")
        b, m = tokens.shape
        if m > self.cfg.max_len:
            raise ContractError(f"sequence length {m} exceeds max_len {self.cfg.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ContractError("token id outside the embedding table")
        if valid is None:
            valid = valid_positions(tokens)
        p = self.params
        x = T.gather(p["tok_emb"], tokens) + T.gather(p["pos_emb"], np.arange(m))
        key_mask = valid[:, None, :]
        dk = self.cfg.d // self.cfg.heads
        inv = 1.0 / math.sqrt(dk)
        for blk in range(self.cfg.blocks):
            pre = f"block{blk}."
            h = T.layer_norm(x) * p[pre + "ln1_g"] + p[pre + "ln1_b"]
            heads = []
            for k in range(self.cfg.heads):
                q = h @ p[f"{pre}wq{k}"]
                kk = h @ p[f"{pre}wk{k}"]
                v = h @ p[f"{pre}wv{k}"]
                att = T.softmax_rows(T.scale(q @ T.transpose(kk), inv), mask=key_mask)
                heads.append(att @ v)
            mixed = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
            x = x + mixed @ p[pre + "wo"]
            h = T.layer_norm(x) * p[pre + "ln2_g"] + p[pre + "ln2_b"]
            ff = T.relu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
            x = x + ff
        return x

    def encode_sequence(self, seq) -> Tensor:
        """Token matrix ``(M_i, d)`` for one sequence."""
        seq = np.asarray(seq, dtype=np.int64)
        if seq.ndim != 1 or len(seq) == 0:
            raise ContractError("a sequence must be a nonempty 1-d id array")
        if len(seq) > self.cfg.max_len:
            raise ContractError(f"sequence length {len(seq)} exceeds max_len {self.cfg.max_len}")
        tokens, valid = pad_batch([seq])
        return T.gather(self.forward(tokens, valid), 0)
