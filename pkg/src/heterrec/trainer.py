"""Training loop: batch assembly, Adam, checkpoints and the experiment report.

Batches are right-padded. Padded positions hold catalog row 0 and repeat the
last real timestamp; the causal masks keep them from influencing real
positions and the loss validity masks drop them as targets. Batch order for
epoch ``e`` comes from ``default_rng([seed, e])`` alone, so resuming from an
epoch-boundary checkpoint replays exactly the remaining batches.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from heterrec.errors import ConfigError, DataError, TrainingDivergedError
from heterrec.evalkit import DEFAULT_CUTOFFS, EvalReport, evaluate, evaluate_popularity
from heterrec.hct import ModelConfig
from heterrec.htfl import FeatureSchema
from heterrec.lmp import LmpConfig
from heterrec.model import AblationFlags, HeterRec
from heterrec.numerics import Tape, Tensor, load_arrays, save_arrays, scale, zero_grads


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    flags: AblationFlags = field(default_factory=AblationFlags)
    cutoffs: list[int] = field(default_factory=lambda: list(DEFAULT_CUTOFFS))
    eval_users: int | None = None  # evaluate on the first n held-out users; None: all
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over all epochs

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        if self.epochs < 0 or not self.lr > 0:
            raise ConfigError("need epochs >= 0 and lr > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs beta1, beta2 in [0, 1) and eps > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LmpConfig = field(default_factory=LmpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_json(self) -> dict:
        return {"model": asdict(self.model), "loss": asdict(self.loss), "train": asdict(self.train)}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - {"model", "loss", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            tr = dict(obj.get("train", {}))
            tr["flags"] = AblationFlags(**tr.get("flags", {}))
            cfg = cls(ModelConfig(**obj.get("model", {})), LmpConfig(**obj.get("loss", {})), TrainConfig(**tr))
        except TypeError as e:
            raise ConfigError(f"bad experiment config: {e}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()

    def with_blocks(self, n1: int, n2: int) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, n_token_blocks=n1, n_item_blocks=n2))

    def with_flags(self, **flags) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, flags=replace(self.train.flags, **flags)))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class TrainingBatch:
    users: np.ndarray  # indices into the train sequence list
    items: np.ndarray  # [B, T] catalog rows, 0 = padding
    ts: np.ndarray  # [B, T]
    lengths: np.ndarray  # [B]


def pad_sequences(seqs, ts_seqs, t_max: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to the longest kept length; longer sequences keep their last ``t_max`` items."""
    kept = [(np.asarray(s)[-t_max:], np.asarray(t)[-t_max:]) for s, t in zip(seqs, ts_seqs)]
    lengths = np.array([len(s) for s, _ in kept], dtype=np.int64)
    if len(kept) == 0 or lengths.min() < 1:
        raise DataError("cannot pad an empty sequence")
    T = int(lengths.max())
    items = np.zeros((len(kept), T), dtype=np.int64)
    ts = np.zeros((len(kept), T), dtype=np.int64)
    for b, (s, t) in enumerate(kept):
        items[b, :len(s)] = s
        ts[b, :len(t)] = t
        ts[b, len(t):] = t[-1]
    return items, ts, lengths


def eligible_users(train_items) -> np.ndarray:
    return np.array([u for u, s in enumerate(train_items) if len(s) >= 2], dtype=np.int64)


def assemble_batch(train_items, train_ts, B: int, seed: int, t_max: int = 256,
                   users: np.ndarray | None = None) -> TrainingBatch:
    """B distinct users with at least one target, chosen by ``seed`` unless ``users`` is given."""
    if users is None:
        pool = eligible_users(train_items)
        if len(pool) < B:
            raise DataError(f"need {B} users with >= 2 interactions, found {len(pool)}")
        users = np.sort(np.random.default_rng(seed).choice(pool, size=B, replace=False))
    users = np.asarray(users)
    if len(np.unique(users)) != len(users):
        raise DataError("a batch must not repeat a user")
    items, ts, lengths = pad_sequences([train_items[u] for u in users], [train_ts[u] for u in users], t_max)
    return TrainingBatch(users, items, ts, lengths)


def epoch_batches(n_pool: int, B: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Positions into the eligible pool; a trailing chunk smaller than 2 is dropped."""
    perm = np.random.default_rng([seed, epoch]).permutation(n_pool)
    return [perm[s:s + B] for s in range(0, n_pool, B) if len(perm[s:s + B]) >= 2]


# ---------------------------------------------------------------------------
# optimizer and steps
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a fixed name -> parameter mapping."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"adam.v.{k}"].astype(self.v[k].dtype)


def _diverged(breakdown) -> TrainingDivergedError:
    lines = []
    for name, res in breakdown.results.items():
        for r in res:
            lines.append(f"{name}/step{r.step}: positive logits in [{np.min(r.pos):.4g}, {np.max(r.pos):.4g}]")
    return TrainingDivergedError("non-finite training loss; logit extrema:\n  " + "\n  ".join(lines))


def accumulate_gradients(model: HeterRec, catalog, batches, weights) -> float:
    """Backward ``sum_m weight_m * loss_m`` into the parameter grads; returns the weighted loss."""
    params = model.parameters()
    zero_grads(params)
    total = 0.0
    for batch, w in zip(batches, weights):
        with Tape() as tape:
            br = model.loss(catalog, batch.items, batch.ts, batch.lengths)
            loss = scale(br.total, w)
        value = float(br.total.data)
        if not np.isfinite(value):
            raise _diverged(br)
        tape.backward(loss)
        total += w * value
    return total


def train_step(model: HeterRec, catalog, batch: TrainingBatch, opt: Adam) -> float:
    loss = accumulate_gradients(model, catalog, [batch], [1.0])
    opt.step()
    return loss


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(self, cfg: ExperimentConfig, prepared):
        cfg.validate()
        self.cfg = cfg
        self.data = prepared
        schema = prepared.schema
        if schema.d_f != cfg.model.d_f:  # token width is a model choice; the data only fixes the features
            schema = FeatureSchema(schema.features, cfg.model.d_f, schema.max_token_space)
        self.model = HeterRec(schema, cfg.model, cfg.loss, seed=cfg.train.seed, flags=cfg.train.flags)
        tc = cfg.train
        self.opt = Adam(dict(self.model.named_parameters()), tc.lr, tc.beta1, tc.beta2, tc.eps)
        self.pool = eligible_users(prepared.train_items)
        if len(self.pool) < 2:
            raise DataError("need at least two users with a train target")
        self.epoch = 0
        self.history: list[dict] = []

    def lr_at(self, step: int) -> float:
        """Learning rate for optimizer step ``step`` (0-based)."""
        tc = self.cfg.train
        if tc.lr_schedule == "constant":
            return tc.lr
        total = max(tc.epochs * len(epoch_batches(len(self.pool), tc.batch_size, tc.seed, 0)), 1)
        return tc.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))

    def run_epoch(self) -> float:
        tc = self.cfg.train
        losses = []
        for chunk in epoch_batches(len(self.pool), tc.batch_size, tc.seed, self.epoch):
            self.opt.lr = self.lr_at(self.opt.t)
            batch = assemble_batch(self.data.train_items, self.data.train_ts, len(chunk), 0,
                                   self.cfg.model.t_max, users=np.sort(self.pool[chunk]))
            losses.append(train_step(self.model, self.data.catalog, batch, self.opt))
        self.epoch += 1
        return float(np.mean(losses))

    def evaluate(self) -> EvalReport:
        d = self.data
        n = len(d.test_truth) if self.cfg.train.eval_users is None else min(self.cfg.train.eval_users,
                                                                             len(d.test_truth))
        users = []
        for s in range(0, n, 256):
            items, ts, lengths = pad_sequences(d.train_items[s:min(s + 256, n)], d.train_ts[s:min(s + 256, n)],
                                               self.cfg.model.t_max)
            users.append(self.model.user_embeddings(d.catalog, items, ts, lengths))
        return evaluate(np.concatenate(users), self.model.item_embeddings(d.catalog),
                        d.test_truth[:n], self.cfg.train.cutoffs)

    def popularity(self) -> EvalReport:
        d = self.data
        n = len(d.test_truth) if self.cfg.train.eval_users is None else min(self.cfg.train.eval_users,
                                                                             len(d.test_truth))
        return evaluate_popularity(d.train_items, d.test_truth[:n], d.catalog.n_items, self.cfg.train.cutoffs)

    # checkpoints hold parameters, Adam moments and the position in the schedule

    def save(self, path) -> tuple[Path, Path]:
        arrays = {f"param.{k}": v for k, v in self.model.state_dict().items()}
        arrays.update(self.opt.state())
        meta = {"epoch": self.epoch, "adam_t": self.opt.t, "config": self.cfg.to_json(), "history": self.history}
        return save_arrays(path, arrays, meta)

    def load(self, path) -> None:
        arrays, meta = load_arrays(path)
        self.model.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        self.opt.load_state(arrays, meta["adam_t"])
        self.epoch = meta["epoch"]
        self.history = meta["history"]

    def fit(self, epochs: int | None = None, evaluate_each: bool = True, log=None) -> list[dict]:
        epochs = self.cfg.train.epochs if epochs is None else epochs
        while self.epoch < epochs:
            loss = self.run_epoch()
            row = {"epoch": self.epoch, "loss": loss}
            if evaluate_each:
                rep = self.evaluate()
                row["recall"], row["ndcg"] = rep.recall, rep.ndcg
            self.history.append(row)
            if log:
                log(row)
        return self.history


def run_experiment(cfg: ExperimentConfig, prepared, out_dir=None, log=None) -> dict:
    """Train, evaluate after every epoch and write ``report.json``, ``timing.json`` and a checkpoint.

    ``report.json`` depends only on the config and data, so two runs with
    one seed are byte-identical; wall-clock goes to ``timing.json``.
    """
    start = time.perf_counter()
    tr = Trainer(cfg, prepared)
    history = tr.fit(log=log)
    final = tr.evaluate()
    report = {"config": cfg.to_json(), "flags": asdict(cfg.train.flags),
              "blocks": [cfg.model.n_token_blocks, cfg.model.n_item_blocks],
              "epochs": history, "final": final.to_json(), "popularity": tr.popularity().to_json(),
              "n_parameters": int(sum(p.data.size for p in tr.model.parameters()))}
    elapsed = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": elapsed}) + "\n")
        tr.save(out / "checkpoint")
    report["_trainer"] = tr
    report["_seconds"] = elapsed
    return report

