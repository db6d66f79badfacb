"""Finite-difference gradient checks over the primitives and the full model graph.

Primitives are looked up on the tensor module at call time, so a patched
backward rule is caught by the same harness the CLI runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from heterrec.numerics import GradCheckReport, Tensor, grad_check
from heterrec.numerics import tensor as T

_MASK4 = np.array([0.0, 0.0, -np.inf, 0.0])


def _primitive_graphs() -> dict:
    return {
        "add": lambda x, y, w: T.sum_(T.mul(T.add(x, y), w)),
        "bias_add": lambda x, y, w: T.sum_(T.mul(T.add(x, T.slice_(y, (0,))), w)),
        "neg_scale": lambda x, y, w: T.sum_(T.mul(T.scale(T.neg(x), 1.7), w)),
        "mul": lambda x, y, w: T.sum_(T.mul(x, y)),
        "relu": lambda x, y, w: T.sum_(T.mul(T.relu(x), w)),
        "exp_log": lambda x, y, w: T.sum_(T.mul(T.log(T.add(T.exp(x), T.exp(y))), w)),
        "sum_axis": lambda x, y, w: T.sum_(T.mul(T.sum_(x, axis=0, keepdims=True), T.slice_(w, (slice(0, 1),)))),
        "mean": lambda x, y, w: T.sum_(T.mean(T.mul(x, w), axis=1)),
        "reshape": lambda x, y, w: T.sum_(T.mul(T.reshape(x, (12,)), Tensor(w.data.reshape(12)))),
        "transpose": lambda x, y, w: T.sum_(T.mul(T.transpose(x), T.transpose(w))),
        "swap_last": lambda x, y, w: T.sum_(T.mul(T.swap_last(T.reshape(x, (1, 3, 4))),
                                                   Tensor(w.data.T[None]))),
        "concat": lambda x, y, w: T.sum_(T.mul(T.concat_last_dim([x, y]), T.concat_last_dim([w, w]))),
        "slice": lambda x, y, w: T.sum_(T.mul(T.slice_(x, (slice(None), slice(1, 3))),
                                              T.slice_(w, (slice(None), slice(1, 3))))),
        "matmul": lambda x, y, w: T.sum_(T.mul(T.matmul(x, T.transpose(y)), Tensor(np.ones((3, 3))))),
        "gather": lambda x, y, w: T.sum_(T.mul(T.embedding_gather(x, np.array([[0, 2], [2, 1]])),
                                               Tensor(np.ones((2, 2, 4))))),
        "layer_norm": lambda x, y, w: T.sum_(T.mul(T.layer_norm(x, T.slice_(y, (0,)), T.slice_(y, (1,))), w)),
        "softmax": lambda x, y, w: T.sum_(T.mul(T.masked_softmax(x, _MASK4), w)),
        "logsumexp": lambda x, y, w: T.sum_(T.mul(T.masked_logsumexp(x, _MASK4), T.slice_(w, (slice(None), 0)))),
    }


PRIMITIVES = tuple(sorted(_primitive_graphs()))


def check_primitive(name: str, seed: int, tol: float = 1e-3) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    if name == "relu":  # keep inputs away from the kink
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
    graph = _primitive_graphs()[name]
    return grad_check(lambda: graph(x, y, w), {"x": x, "y": y}, tol=tol, seed=seed)


def check_model(seed: int, tol: float = 1e-3, max_elements: int = 4) -> GradCheckReport:
    """One token block, one item block and the full multi-step loss with gates frozen.

    The indicator gates are piecewise constant, so they are evaluated once and
    held fixed while the finite differences perturb parameters.
    """
    from heterrec.hct import ModelConfig
    from heterrec.htfl import Catalog, FeatureSchema, ItemRecord, QuantileCodebook
    from heterrec.lmp import LmpConfig
    from heterrec.model import HeterRec

    rng = np.random.default_rng(seed)
    schema = FeatureSchema(d_f=4, features=[
        {"name": "id", "kind": "categorical", "vocab_size": 9},
        {"name": "price", "kind": "numerical", "boundaries": [0.5]},
        {"name": "vec", "kind": "multimodal", "dim": 4, "groups": 2, "quantiles": 2}])
    items = [ItemRecord(f"x{i}", {"id": i + 1}, {"price": float(rng.random())},
                        {"vec": rng.normal(size=4).tolist()}) for i in range(8)]
    catalog = Catalog(schema, QuantileCodebook.fit(schema, items), items)
    cfg = ModelConfig(d_f=4, d_k=4, n_token_blocks=1, n_item_blocks=1, token_heads=2, item_heads=2)
    model = HeterRec(schema, cfg, LmpConfig(n_step=3, margin=0.2), seed=seed)
    seqs = rng.integers(1, 9, size=(3, 4))
    ts = np.cumsum(rng.integers(0, 5000, size=(3, 4)), axis=1)
    lengths = np.array([4, 3, 4])
    gates = model.loss(catalog, seqs, ts, lengths).gates
    return grad_check(lambda: model.loss(catalog, seqs, ts, lengths, frozen_gates=gates).total,
                      dict(model.named_parameters()), tol=tol, max_elements=max_elements, seed=seed)


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport

    def line(self) -> str:
        status = "PASS" if self.report.passed else "FAIL"
        return f"{status} {self.name} seed={self.seed} worst={self.report.worst:.3e}"


def run_all(seeds, tol: float = 1e-3, include_model: bool = True) -> list[CheckResult]:
    out = []
    for seed in seeds:
        for name in PRIMITIVES:
            out.append(CheckResult(name, seed, check_primitive(name, seed, tol)))
        if include_model:
            out.append(CheckResult("hct+lmp", seed, check_model(seed, tol)))
    return out
