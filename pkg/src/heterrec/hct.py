"""Hierarchical causal transformer (user tower) and hierarchical MLP item tower.

Attention per head is

    softmax((Q K^T + P) / sqrt(d_head) + M) V

with ``P`` a learned scalar bias looked up from the bucketized time gap
between the query item and the key item, and ``M`` the item-causal mask.
Blocks are post-LN: ``LN(x + MHA(x))`` then ``LN(y + FFN(y))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from heterrec.errors import ConfigError, ContractError, DataError
from heterrec.htfl import Catalog, FeatureSchema, TokenEncoder
from heterrec.numerics import (
    Tensor,
    add,
    embedding_gather,
    layer_norm,
    masked_softmax,
    matmul,
    relu,
    reshape,
    scale,
    swap_last,
    transpose,
)
from heterrec.numerics.nn import MLP, Module, const_param, param

NEG_INF = -np.inf


@dataclass
class ModelConfig:
    d_f: int = 16
    d_k: int = 32
    token_heads: int = 2
    item_heads: int = 2
    ffn_mult: int = 2
    n_token_blocks: int = 2
    n_item_blocks: int = 2
    n_time_buckets: int = 32
    t_max: int = 256
    ln_eps: float = 1e-5
    bias_after_scale: bool = False
    item_time_bias: bool = True
    strict_token_causal: bool = False

    def validate(self) -> None:
        if self.d_f % self.token_heads:
            raise ConfigError(f"token_heads={self.token_heads} must divide d_f={self.d_f}")
        if self.d_k % self.item_heads:
            raise ConfigError(f"item_heads={self.item_heads} must divide d_k={self.d_k}")
        if self.n_token_blocks < 0 or self.n_item_blocks < 1:
            raise ConfigError("need n_token_blocks >= 0 and n_item_blocks >= 1")
        if self.n_time_buckets < 1 or self.t_max < 1:
            raise ConfigError("n_time_buckets and t_max must be positive")

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# masks and time-gap buckets
# ---------------------------------------------------------------------------


def build_token_mask(item_index, strict: bool = False) -> np.ndarray:
    """Additive ``[L, L]`` mask: query p may see key q iff item(q) <= item(p).

    With ``strict=True`` the ordinary token-causal rule q <= p is used
    instead, so tokens of one item no longer see each other's later tokens.
    """
    item_index = np.asarray(item_index)
    if np.any(np.diff(item_index) < 0):
        raise DataError("item_index must be non-decreasing")
    if strict:
        n = len(item_index)
        allowed = np.tril(np.ones((n, n), dtype=bool))
    else:
        allowed = item_index[None, :] <= item_index[:, None]
    return np.where(allowed, 0.0, NEG_INF).astype(np.float32)


def time_gap_bucket(delta, n_buckets: int = 32) -> np.ndarray:
    """``min(floor(log2(1 + delta)), n_buckets - 1)`` for non-negative second gaps."""
    delta = np.asarray(delta, dtype=np.int64)
    if np.any(delta < 0):
        raise ContractError("time gaps must be non-negative")
    # frexp exponent e gives floor(log2(x)) = e - 1 exactly for integers < 2**53
    _, e = np.frexp((delta + 1).astype(np.float64))
    return np.minimum(e - 1, n_buckets - 1).astype(np.int64)


def item_gap_buckets(ts: np.ndarray, n_buckets: int) -> np.ndarray:
    """Bucket ids ``[B, T, T]`` for query item t and key item s (gap ts_t - ts_s).

    Pairs with a future key are masked anyway; their gap is clipped to 0.
    """
    ts = np.asarray(ts, dtype=np.int64)
    delta = ts[:, :, None] - ts[:, None, :]
    return time_gap_bucket(np.maximum(delta, 0), n_buckets)


def token_gap_buckets(item_buckets: np.ndarray, K: int) -> np.ndarray:
    """Expand item-pair buckets to every token pair of those items."""
    return np.repeat(np.repeat(item_buckets, K, axis=1), K, axis=2)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d: int, heads: int, bias_after_scale: bool = False):
        if d % heads:
            raise ConfigError(f"heads={heads} must divide width {d}")
        std = 1.0 / math.sqrt(d)
        self.wq = param(rng, (d, d), std)
        self.wk = param(rng, (d, d), std)
        self.wv = param(rng, (d, d), std)
        self.wo = param(rng, (d, d), std)
        self.heads = heads
        self.bias_after_scale = bias_after_scale
        self.last_probs: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return transpose(reshape(x, (B, L, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray, bias: Tensor | None = None) -> Tensor:
        B, L, d = x.shape
        q, k, v = (self._split(matmul(x, w)) for w in (self.wq, self.wk, self.wv))
        s = matmul(q, swap_last(k))
        c = 1.0 / math.sqrt(d // self.heads)
        if bias is None:
            s = scale(s, c)
        elif self.bias_after_scale:
            s = add(scale(s, c), bias)
        else:
            s = scale(add(s, bias), c)
        p = masked_softmax(s, mask)
        self.last_probs = p.data
        o = transpose(matmul(p, v), (0, 2, 1, 3))
        return matmul(reshape(o, (B, L, d)), self.wo)


class CausalBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, heads: int, ffn_mult: int = 2,
                 eps: float = 1e-5, bias_after_scale: bool = False):
        self.attn = MultiHeadAttention(rng, d, heads, bias_after_scale)
        self.ln1_g, self.ln1_b = const_param((d,), 1.0), const_param((d,))
        self.ffn = MLP(rng, d, ffn_mult * d, d)
        self.ln2_g, self.ln2_b = const_param((d,), 1.0), const_param((d,))
        self.eps = eps

    def __call__(self, x: Tensor, mask: np.ndarray, bias: Tensor | None = None) -> Tensor:
        y = layer_norm(x + self.attn(x, mask, bias), self.ln1_g, self.ln1_b, self.eps)
        return layer_norm(y + self.ffn(y), self.ln2_g, self.ln2_b, self.eps)


def _gap_bias(table: Tensor, buckets: np.ndarray) -> Tensor:
    """Scalar bias per query/key pair, broadcast over heads: ``[B, 1, L, L]``."""
    B, L, _ = buckets.shape
    return reshape(embedding_gather(table, buckets), (B, 1, L, L))


# ---------------------------------------------------------------------------
# towers
# ---------------------------------------------------------------------------


@dataclass
class UserTowerOutput:
    tokens: Tensor | None  # H_{N1}: [B, T*K, d_f], None when no token stream is used
    users: Tensor  # U: [B, T, d_k]


class UserTower(Module):
    """Token-level blocks, per-item fusion MLP, item-level blocks.

    ``flatten=False`` replaces the token stream by the concatenation of an
    item's feature embeddings (the homogeneous-input baseline); ``n_token_blocks``
    is then ignored. With ``flatten=False`` and ``stack_all=True`` the item
    level runs ``n_token_blocks + n_item_blocks`` blocks in one flat stack.
    """

    def __init__(self, cfg: ModelConfig, schema: FeatureSchema, encoder: TokenEncoder,
                 rng: np.random.Generator, flatten: bool = True, stack_all: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.K = schema.K
        self.encoder = encoder  # shared with the item tower; not re-registered below
        self.flatten = flatten
        n_tok = cfg.n_token_blocks if flatten else 0
        n_item = cfg.n_item_blocks + (cfg.n_token_blocks if (stack_all and not flatten) else 0)
        self.token_blocks = [CausalBlock(rng, cfg.d_f, cfg.token_heads, cfg.ffn_mult, cfg.ln_eps,
                                         cfg.bias_after_scale) for _ in range(n_tok)]
        self.token_tg = const_param((cfg.n_time_buckets, 1))
        self.fusion = MLP(rng, self.K * cfg.d_f, 2 * cfg.d_k, cfg.d_k)
        self.item_blocks = [CausalBlock(rng, cfg.d_k, cfg.item_heads, cfg.ffn_mult, cfg.ln_eps,
                                        cfg.bias_after_scale) for _ in range(n_item)]
        self.item_tg = const_param((cfg.n_time_buckets, 1))

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if not name.startswith(prefix + "encoder."):
                yield name, p

    def __call__(self, catalog: Catalog, items: np.ndarray, ts: np.ndarray) -> UserTowerOutput:
        cfg, K = self.cfg, self.K
        items = np.asarray(items)
        B, T = items.shape
        item_buckets = item_gap_buckets(ts, cfg.n_time_buckets)
        tokens = None
        if self.flatten:
            h = self.encoder.flatten(catalog, items)
            if self.token_blocks:
                mask = build_token_mask(np.repeat(np.arange(T), K), strict=cfg.strict_token_causal)
                bias = _gap_bias(self.token_tg, token_gap_buckets(item_buckets, K))
                for blk in self.token_blocks:
                    h = blk(h, mask, bias)
            tokens = h
            fused_in = reshape(h, (B, T, K * cfg.d_f))
        else:
            fused_in = reshape(self.encoder.encode_items(catalog, items), (B, T, K * cfg.d_f))
        u = self.fusion(fused_in)
        mask = build_token_mask(np.arange(T))
        bias = _gap_bias(self.item_tg, item_buckets) if cfg.item_time_bias else None
        for blk in self.item_blocks:
            u = blk(u, mask, bias)
        return UserTowerOutput(tokens=tokens, users=u)


@dataclass
class ItemTowerOutput:
    tokens: Tensor  # [..., K, d_f]
    items: Tensor  # [..., d_k]


class ItemTower(Module):
    """Per-type token MLPs (residual) then a fusion MLP to ``d_k``."""

    def __init__(self, cfg: ModelConfig, schema: FeatureSchema, encoder: TokenEncoder,
                 rng: np.random.Generator):
        K, d_f = schema.K, cfg.d_f
        self.K, self.d_f = K, d_f
        self.encoder = encoder
        std = 1.0 / math.sqrt(d_f)
        self.type_w1 = param(rng, (K, d_f, d_f), std)
        self.type_b1 = const_param((K, 1, d_f))
        self.type_w2 = param(rng, (K, d_f, d_f), std)
        self.type_b2 = const_param((K, 1, d_f))
        self.fusion = MLP(rng, K * d_f, 2 * cfg.d_k, cfg.d_k)

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if not name.startswith(prefix + "encoder."):
                yield name, p

    def __call__(self, catalog: Catalog, items: np.ndarray) -> ItemTowerOutput:
        items = np.asarray(items)
        lead = items.shape
        n = int(np.prod(lead)) if lead else 1
        tok = reshape(self.encoder.encode_items(catalog, items.reshape(-1)), (n, self.K, self.d_f))
        per_type = transpose(tok, (1, 0, 2))  # [K, n, d_f]
        h = relu(add(matmul(per_type, self.type_w1), self.type_b1))
        refined = per_type + add(matmul(h, self.type_w2), self.type_b2)
        refined = transpose(refined, (1, 0, 2))  # [n, K, d_f]
        v = self.fusion(reshape(refined, (n, self.K * self.d_f)))
        return ItemTowerOutput(tokens=reshape(refined, (*lead, self.K, self.d_f)),
                               items=reshape(v, (*lead, v.shape[-1])))
