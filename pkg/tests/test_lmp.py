import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heterrec.errors import ConfigError, ContractError
from heterrec.lmp import (
    LmpConfig,
    LmpHeads,
    gate_indicator,
    step_logit,
    step_losses,
    total_loss,
)
from heterrec.numerics import Tape, Tensor, grad_check, shadow64

from conftest import World


def loop_oracle(U, V, lengths, Ws, bs, tau, margin, gated=True, printed=False):
    """Per-step losses by explicit loops over (j, t, k)."""
    B, T, _ = U.shape
    out, prev = [], {}
    for i in range(1, len(Ws) + 1):
        if T - i <= 0:
            break
        W, b = Ws[i - 1], bs[i - 1]
        acc, n_valid, cur = 0.0, 0, {}
        for j in range(B):
            for t in range(T - i):
                if t + i >= lengths[j]:
                    continue
                n_valid += 1
                pu = U[j, t] @ W + b
                pos = float(pu @ V[j, t + i]) / tau
                cur[(j, t)] = pos
                negs = [float(pu @ V[k, t + i]) / tau for k in range(B) if k != j and t + i < lengths[k]]
                r = math.exp(pos) / (1 + math.exp(pos) + sum(math.exp(n) for n in negs))
                g = 1.0
                if i > 1 and gated:
                    g = float(math.exp(prev[(j, t)]) > math.exp(pos) + margin)
                acc += g * (r if printed else -math.log(r))
        out.append(acc / max(n_valid, 1))
        prev = cur
    return out


def heads_f64(n_step, d, rng, noise=0.3):
    cfg = LmpConfig(n_step=n_step)
    heads = LmpHeads(cfg, d, d, [])
    for h in heads.item:
        h.w.data = (np.eye(d) + noise * rng.normal(size=(d, d)))
        h.b.data = noise * rng.normal(size=d)
    return heads


def stream(rng, B, T, d, scale=1.0):
    return Tensor(scale * rng.normal(size=(B, T, d)), dtype=np.float64)


# -- examples ------------------------------------------------------------------


def test_step_logit_unit_vectors():
    e = np.zeros((1, 2, 3))
    e[0, 0, 0] = e[0, 1, 0] = 1.0
    heads = LmpHeads(LmpConfig(n_step=1), 3, 3, [])
    assert step_logit(Tensor(e), Tensor(e), heads.item[0], 1, 0, 0, 0) == 1.0
    v = np.zeros((1, 2, 3))
    v[0, 1, 1] = 1.0
    assert step_logit(Tensor(e), Tensor(v), heads.item[0], 1, 0, 0, 0) == 0.0
    with pytest.raises(ContractError):
        step_logit(Tensor(e), Tensor(e), heads.item[0], 1, 0, 0, 1)


def test_step_logit_matches_loop_over_all_pairs():
    rng = np.random.default_rng(0)
    U, V = stream(rng, 3, 4, 5), stream(rng, 3, 4, 5)
    heads = heads_f64(1, 5, rng)
    with shadow64():
        res = step_losses(U, V, np.full(3, 4), heads.item, LmpConfig(n_step=1), 1.0)
    W, b = heads.item[0].w.data, heads.item[0].b.data
    for j in range(3):
        for t in range(3):
            assert math.isclose(res[0].pos[j, t], (U.data[j, t] @ W + b) @ V.data[j, t + 1], rel_tol=1e-12)
            for k in range(3):
                direct = step_logit(U, V, heads.item[0], 1, j, k, t)
                assert math.isclose(direct, (U.data[j, t] @ W + b) @ V.data[k, t + 1], rel_tol=1e-12)


def test_uniform_logits_give_log_b_plus_one():
    for B in (2, 3, 7):
        U = Tensor(np.zeros((B, 3, 4)), dtype=np.float64)
        V = Tensor(np.ones((B, 3, 4)), dtype=np.float64)
        heads = LmpHeads(LmpConfig(n_step=1), 4, 4, [])
        with shadow64():
            res = step_losses(U, V, np.full(B, 3), heads.item, LmpConfig(n_step=1), 1.0)
        assert abs(float(res[0].loss.data) - math.log(B + 1)) <= 1e-6
    assert abs(math.log(3) - 1.0986) < 1e-4


def test_gate_truth_table():
    assert gate_indicator(2.0, 0.0, 1.0)  # e^2 = 7.389 > 1 + 1
    assert not gate_indicator(0.0, 0.0, 1.0)  # 1 > 2 is false
    assert not gate_indicator(math.log(2.0), 0.0, 1.0)  # 2 > 2 is false


def test_config_validation():
    with pytest.raises(ConfigError):
        LmpConfig(tau=0).validate()
    with pytest.raises(ConfigError):
        LmpConfig(n_step=0).validate()


# -- oracle equality ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("gated", [True, False])
def test_batched_loss_matches_loop_oracle(seed, gated):
    rng = np.random.default_rng(seed)
    B, T, d = 3, 4, 5
    U, V = stream(rng, B, T, d, 0.8), stream(rng, B, T, d, 0.8)
    lengths = np.array([4, 3, 4]) if seed % 2 else np.full(B, T)
    heads = heads_f64(3, d, rng)
    cfg = LmpConfig(n_step=3, tau=0.7, margin=0.5, gated=gated)
    with shadow64():
        res = step_losses(U, V, lengths, heads.item, cfg, cfg.margin)
    oracle = loop_oracle(U.data, V.data, lengths, [h.w.data for h in heads.item],
                         [h.b.data for h in heads.item], 0.7, 0.5, gated)
    assert len(res) == 3
    for r, o in zip(res, oracle):
        assert abs(float(r.loss.data) - o) <= 1e-6


def test_printed_form_matches_oracle_ratio():
    rng = np.random.default_rng(9)
    U, V = stream(rng, 3, 4, 5), stream(rng, 3, 4, 5)
    heads = heads_f64(2, 5, rng)
    cfg = LmpConfig(n_step=2, printed_form=True)
    with shadow64():
        res = step_losses(U, V, np.full(3, 4), heads.item, cfg, 1.0)
    oracle = loop_oracle(U.data, V.data, np.full(3, 4), [h.w.data for h in heads.item],
                         [h.b.data for h in heads.item], 1.0, 1.0, printed=True)
    np.testing.assert_allclose([float(r.loss.data) for r in res], oracle, atol=1e-9)


def token_inputs(rng, B, T, K, d):
    user_tokens = stream(rng, B, T * K, d)
    item_tokens = Tensor(rng.normal(size=(B, T, K, d)), dtype=np.float64)
    return user_tokens, item_tokens


def test_token_level_matches_loop_oracle():
    rng = np.random.default_rng(3)
    B, T, K, d = 2, 3, 2, 4
    cfg = LmpConfig(n_step=2, token_types=["a", "b"])
    heads = LmpHeads(cfg, d, d, ["a", "b"])
    for hs in heads.token.values():
        for h in hs:
            h.w.data = np.eye(d) + 0.2 * rng.normal(size=(d, d))
            h.b.data = np.zeros(d)
    for h in heads.item:
        h.w.data, h.b.data = h.w.data.astype(np.float64), h.b.data.astype(np.float64)
    U, V = stream(rng, B, T, d), stream(rng, B, T, d)
    ut, it = token_inputs(rng, B, T, K, d)
    with shadow64():
        br = total_loss(U, V, np.full(B, T), heads, cfg, ut, it, {"a": 0, "b": 1})
    for s, k in (("a", 0), ("b", 1)):
        us = ut.data.reshape(B, T, K, d)[:, :, k]
        vs = it.data[:, :, k]
        oracle = loop_oracle(us, vs, np.full(B, T), [h.w.data for h in heads.token[s]],
                             [h.b.data for h in heads.token[s]], cfg.tau, cfg.margin)
        for i, o in enumerate(oracle, start=1):
            assert abs(br.parts[f"token/{s}/step{i}"] - o) <= 1e-6


def test_single_type_token_loss_reduces_to_item_formula():
    rng = np.random.default_rng(4)
    B, T, d = 3, 4, 1
    cfg = LmpConfig(n_step=2, token_types=["x"])
    heads = LmpHeads(cfg, d, d, ["x"])
    U, V = stream(rng, B, T, d), stream(rng, B, T, d)
    it = Tensor(V.data.reshape(B, T, 1, d), dtype=np.float64)
    with shadow64():
        br = total_loss(U, V, np.full(B, T), heads, cfg, U, it, {"x": 0})
    for i in (1, 2):
        assert br.parts[f"token/x/step{i}"] == pytest.approx(br.parts[f"item/step{i}"], abs=1e-12)


def test_total_is_sum_of_parts_and_token_off_is_item_only():
    rng = np.random.default_rng(5)
    B, T, K, d = 3, 4, 2, 4
    cfg = LmpConfig(n_step=3)
    heads = LmpHeads(cfg, d, d, ["a", "b"])
    U, V = stream(rng, B, T, d), stream(rng, B, T, d)
    ut, it = token_inputs(rng, B, T, K, d)
    with shadow64():
        br = total_loss(U, V, np.full(B, T), heads, cfg, ut, it, {"a": 0, "b": 1})
        heads.token = {}
        item_only = total_loss(U, V, np.full(B, T), heads, cfg)
    assert abs(float(br.total.data) - sum(br.parts.values())) <= 1e-6
    assert float(item_only.total.data) == pytest.approx(
        sum(v for k, v in br.parts.items() if k.startswith("item/")), abs=1e-12)


def test_single_step_without_tokens_is_step_one_loss():
    rng = np.random.default_rng(6)
    U, V = stream(rng, 2, 3, 4), stream(rng, 2, 3, 4)
    heads = LmpHeads(LmpConfig(n_step=1), 4, 4, [])
    with shadow64():
        br = total_loss(U, V, np.full(2, 3), heads, LmpConfig(n_step=1))
    assert list(br.parts) == ["item/step1"]
    assert float(br.total.data) == br.parts["item/step1"]
    assert LmpConfig().n_step == 3 and LmpConfig().margin == 1.0


# -- properties ---------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_invariant_to_batch_permutation(seed):
    rng = np.random.default_rng(seed)
    B, T, d = 4, 4, 3
    U, V = stream(rng, B, T, d), stream(rng, B, T, d)
    lengths = rng.integers(2, T + 1, size=B)
    heads = heads_f64(3, d, rng)
    perm = rng.permutation(B)
    cfg = LmpConfig(n_step=3)
    with shadow64():
        a = total_loss(U, V, lengths, heads, cfg)
        b = total_loss(Tensor(U.data[perm]), Tensor(V.data[perm]), lengths[perm], heads, cfg)
    assert abs(float(a.total.data) - float(b.total.data)) <= 1e-6
    assert float(a.total.data) >= 0


def test_gates_stable_under_tiny_perturbation():
    rng = np.random.default_rng(7)
    U, V = stream(rng, 4, 5, 3, 2.0), stream(rng, 4, 5, 3, 2.0)
    heads = heads_f64(3, 3, rng)
    cfg = LmpConfig(n_step=3)
    with shadow64():
        a = step_losses(U, V, np.full(4, 5), heads.item, cfg, 1.0)
        b = step_losses(Tensor(U.data + 1e-9), V, np.full(4, 5), heads.item, cfg, 1.0)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.gate, rb.gate)
    assert any(r.gate.any() and not r.gate.all() for r in a[1:])


def test_gradient_step_pulls_positives_and_pushes_negatives():
    rng = np.random.default_rng(8)
    U = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True, dtype=np.float64)
    V = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True, dtype=np.float64)
    heads = LmpHeads(LmpConfig(n_step=1), 4, 4, [])
    cfg = LmpConfig(n_step=1, tau=10.0)

    def dots():
        pos = sum(U.data[j, 0] @ V.data[j, 1] for j in range(2))
        neg = U.data[0, 0] @ V.data[1, 1] + U.data[1, 0] @ V.data[0, 1]
        return pos, neg

    p0, n0 = dots()
    with shadow64(), Tape() as tape:
        res = step_losses(U, V, np.full(2, 2), heads.item, cfg, 1.0)
    tape.backward(res[0].loss)
    U.data -= 0.5 * U.grad
    V.data -= 0.5 * V.grad
    p1, n1 = dots()
    assert p1 > p0 and n1 < n0


@pytest.mark.parametrize("seed", range(3))
def test_full_model_loss_gradients_with_frozen_gates(seed):
    w = World(K=2, n_items=8, d_f=4, d_k=4, seed=seed)
    w.model.loss_cfg.margin = 0.2
    items, ts, lengths = w.batch(3, 4, lengths=[4, 3, 4])
    gates = w.model.loss(w.catalog, items, ts, lengths).gates
    params = dict(w.model.named_parameters())
    rep = grad_check(lambda: w.model.loss(w.catalog, items, ts, lengths, frozen_gates=gates).total,
                     params, max_elements=6, seed=seed)
    assert rep.passed, [ln for ln in rep.lines() if ln.startswith("FAIL")]
