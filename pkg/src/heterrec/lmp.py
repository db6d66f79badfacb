"""Listwise multi-step prediction loss with in-batch negatives.

For step ``i`` the user state at position ``t`` is projected by a per-step
linear head and scored against the item at position ``t + i`` of every
sample in the batch. Sample ``j``'s own item is the positive; the other
samples' items at the same position are negatives, and a constant zero logit
stands for the ``1 +`` in the denominator:

    r = e^{pos} / (1 + e^{pos} + sum_{k != j} e^{neg_k})      (logits / tau)

Each term contributes ``-log r``. For ``i > 1`` a term only counts when the
previous step's positive is clearly ahead, ``e^{pos_{i-1}} > e^{pos_i} +
margin``; the indicator is evaluated on current values and carries no
gradient. Terms are averaged over the positions that have a target.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from heterrec.errors import ConfigError, ContractError
from heterrec.numerics import (
    Tensor,
    concat_last_dim,
    exp,
    masked_logsumexp,
    matmul,
    mul,
    reshape,
    scale,
    slice_,
    sum_,
    transpose,
)
from heterrec.numerics.nn import Module


@dataclass
class LmpConfig:
    n_step: int = 3
    tau: float = 1.0
    margin: float = 1.0
    gated: bool = True  # False: plain per-step InfoNCE, no indicator
    token_types: list[str] | None = None  # None: every schema feature; []: item level only
    token_margin: float | None = None  # None: same as margin
    printed_form: bool = False  # optimize the bare ratio instead of -log(ratio)

    def validate(self) -> None:
        if self.n_step < 1:
            raise ConfigError(f"n_step must be >= 1, got {self.n_step}")
        if not self.tau > 0:
            raise ConfigError(f"temperature tau must be > 0, got {self.tau}")
        if self.margin < 0 or (self.token_margin is not None and self.token_margin < 0):
            raise ConfigError("margins must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


class Identityish(Module):
    """Linear head initialised to the identity map."""

    def __init__(self, d: int):
        self.w = Tensor(np.eye(d, dtype=np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class LmpHeads(Module):
    def __init__(self, cfg: LmpConfig, d_k: int, d_f: int, token_types: list[str]):
        self.item = [Identityish(d_k) for _ in range(cfg.n_step)]
        self.token = {s: [Identityish(d_f) for _ in range(cfg.n_step)] for s in token_types}


@dataclass
class StepResult:
    step: int
    loss: Tensor
    pos: np.ndarray  # [B, Tq] positive logits / tau
    gate: np.ndarray  # [B, Tq] bool
    valid: np.ndarray  # [B, Tq] bool, a target exists


def target_validity(lengths: np.ndarray, T: int, i: int) -> np.ndarray:
    """``valid[b, t]`` is true when position ``t + i`` holds a real item of sample b."""
    t = np.arange(T - i)
    return (t[None, :] + i) < np.asarray(lengths)[:, None]


def step_logit(users: Tensor, targets: Tensor, head, i: int, j: int, k: int, t: int) -> float:
    """``head(U[j, t]) . V[k, t + i]``: the positive logit when j == k, else a negative."""
    T = users.shape[1]
    if not 0 <= t < T or t + i >= targets.shape[1] or i < 1:
        raise ContractError(f"no target at position t + i = {t} + {i} (sequence length {T})")
    pu = head(slice_(users, (slice(j, j + 1), slice(t, t + 1))))
    return float((pu.data.reshape(-1) * targets.data[k, t + i]).sum())


def step_logit_matrix(proj: Tensor, targets: Tensor) -> Tensor:
    """``[B, Tq, d]`` x ``[B, Tq, d]`` -> ``[Tq, B_user, B_item]`` dot products."""
    return matmul(transpose(proj, (1, 0, 2)), transpose(targets, (1, 2, 0)))


def gate_indicator(prev_pos: np.ndarray, pos: np.ndarray, margin: float) -> np.ndarray:
    """``e^{prev} > e^{cur} + margin`` on logits already divided by tau."""
    with np.errstate(over="ignore"):
        return np.exp(np.asarray(prev_pos, np.float64)) > np.exp(np.asarray(pos, np.float64)) + margin


def step_losses(users: Tensor, targets: Tensor, lengths: np.ndarray, heads: list, cfg: LmpConfig,
                margin: float, frozen_gates: dict[int, np.ndarray] | None = None) -> list[StepResult]:
    """Loss terms for steps ``1..n_step`` of one (user, target) stream pair."""
    B, T, _ = users.shape
    lengths = np.asarray(lengths)
    out: list[StepResult] = []
    prev_pos = None
    inv_tau = 1.0 / cfg.tau
    for i in range(1, cfg.n_step + 1):
        Tq = T - i
        if Tq <= 0:
            break
        proj = heads[i - 1](slice_(users, (slice(None), slice(0, Tq))))
        tgt = slice_(targets, (slice(None), slice(i, T)))
        z = scale(step_logit_matrix(proj, tgt), inv_tau)  # [Tq, B, B]
        valid = target_validity(lengths, T, i)  # [B, Tq]
        col = np.where(valid.T, 0.0, -np.inf)[:, None, :]  # item k usable at this position
        mask = np.concatenate([np.zeros((Tq, 1, 1)), col], axis=-1)
        mask = np.broadcast_to(mask, (Tq, B, B + 1))
        zeros = Tensor(np.zeros((Tq, B, 1)))
        lse = transpose(masked_logsumexp(concat_last_dim([zeros, z]), mask), (1, 0))  # [B, Tq]
        pos = scale(sum_(mul(proj, tgt), axis=-1), inv_tau)  # [B, Tq]
        if i == 1 or not cfg.gated:
            gate = np.ones_like(valid)
        elif frozen_gates is not None and i in frozen_gates:
            gate = np.asarray(frozen_gates[i], dtype=bool)
        else:
            gate = gate_indicator(prev_pos[:, :Tq], pos.data, margin)
        n_valid = max(int(valid.sum()), 1)
        w = Tensor((valid & gate).astype(np.float64) / n_valid)
        if cfg.printed_form:
            loss = sum_(mul(exp(pos - lse), w))
        else:
            loss = sum_(mul(lse - pos, w))
        out.append(StepResult(step=i, loss=loss, pos=pos.data.astype(np.float64), gate=gate, valid=valid))
        prev_pos = pos.data
    return out


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)
    gates: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    results: dict[str, list[StepResult]] = field(default_factory=dict)


def token_stream_by_type(tokens: Tensor, K: int, s: int) -> Tensor:
    """Rows of feature type ``s`` from a ``[B, T*K, d]`` token stream -> ``[B, T, d]``."""
    B, L, d = tokens.shape
    return slice_(reshape(tokens, (B, L // K, K, d)), (slice(None), slice(None), s))


def total_loss(users: Tensor, items: Tensor, lengths: np.ndarray, heads: LmpHeads, cfg: LmpConfig,
               user_tokens: Tensor | None = None, item_tokens: Tensor | None = None,
               type_index: dict[str, int] | None = None,
               frozen_gates: dict[str, dict[int, np.ndarray]] | None = None) -> LossBreakdown:
    """Unweighted sum of item-level and token-level step losses.

    ``user_tokens`` is the token-stream output ``[B, T*K, d_f]`` and
    ``item_tokens`` the item tower's ``[B, T, K, d_f]`` token embeddings;
    both are needed only when ``heads.token`` is non-empty.
    """
    cfg.validate()
    frozen_gates = frozen_gates or {}
    streams = {"item": (users, items, heads.item, cfg.margin)}
    if heads.token:
        if user_tokens is None or item_tokens is None or type_index is None:
            raise ContractError("token-level terms need user_tokens, item_tokens and type_index")
        K = item_tokens.shape[-2]
        tmargin = cfg.margin if cfg.token_margin is None else cfg.token_margin
        for s, hs in heads.token.items():
            k = type_index[s]
            streams[f"token/{s}"] = (token_stream_by_type(user_tokens, K, k),
                                     slice_(item_tokens, (slice(None), slice(None), k)), hs, tmargin)
    total = None
    out = LossBreakdown(total=None)
    for name, (u, v, hs, margin) in streams.items():
        res = step_losses(u, v, lengths, hs, cfg, margin, frozen_gates.get(name))
        out.results[name] = res
        out.gates[name] = {r.step: r.gate for r in res}
        for r in res:
            out.parts[f"{name}/step{r.step}"] = float(r.loss.data)
            total = r.loss if total is None else total + r.loss
    out.total = total if total is not None else Tensor(0.0)
    return out
