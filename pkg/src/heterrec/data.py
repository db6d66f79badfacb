"""Interaction ingestion, the leave-one-out split, and the planted-rule generator.

Everything on disk is JSONL, one record per line. Interactions are
``{user_id, item_id, ts, behavior}``; items use the record layout of
:class:`heterrec.htfl.ItemRecord`. Ingestion sorts users and items by id and
each user's events by ``(ts, item_id)``, so shuffled input yields the same
dataset and writing the normalized form then reading it back is a fixed
point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from heterrec.errors import ConfigError, DataError
from heterrec.htfl import Catalog, FeatureSchema, ItemRecord, QuantileCodebook, fit_schema

BEHAVIORS = ("click", "add_to_cart", "conversion")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    ts: int
    behavior: str = "click"

    def to_json(self) -> dict:
        return asdict(self)


def _read_jsonl(path, what: str):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed {what} line: {e.msg}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: {what} line is not a JSON object")
            yield lineno, obj


def _parse_interaction(obj: dict, where: str) -> Interaction:
    try:
        user, item, ts = obj["user_id"], obj["item_id"], obj["ts"]
    except KeyError as e:
        raise DataError(f"{where}: interaction missing field {e.args[0]!r}") from None
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise DataError(f"{where}: ts must be an integer number of seconds, got {ts!r}")
    behavior = obj.get("behavior", "click")
    if behavior not in BEHAVIORS:
        raise DataError(f"{where}: behavior must be one of {BEHAVIORS}, got {behavior!r}")
    return Interaction(str(user), str(item), ts, behavior)


@dataclass
class Dataset:
    """Validated items and per-user chronological interactions."""

    items: list[ItemRecord]
    users: list[str]
    sequences: list[list[Interaction]]
    index: dict[str, int] = field(init=False)  # item id -> catalog row 1..N

    def __post_init__(self):
        self.index = {rec.item_id: i + 1 for i, rec in enumerate(self.items)}

    def rows(self, u: int) -> np.ndarray:
        return np.array([self.index[x.item_id] for x in self.sequences[u]], dtype=np.int64)

    def timestamps(self, u: int) -> np.ndarray:
        return np.array([x.ts for x in self.sequences[u]], dtype=np.int64)

    def summary(self) -> dict:
        lens = np.array([len(s) for s in self.sequences]) if self.sequences else np.zeros(1)
        counts = {b: sum(x.behavior == b for s in self.sequences for x in s) for b in BEHAVIORS}
        return {"users": len(self.users), "items": len(self.items), "interactions": int(lens.sum()),
                "min_length": int(lens.min()), "mean_length": float(lens.mean()),
                "max_length": int(lens.max()), "behaviors": counts}


def _check_item(rec: ItemRecord, schema: FeatureSchema, where: str) -> None:
    for f in schema.features:
        if f.kind == "categorical":
            v = rec.categorical.get(f.name)
            if v is None or not 0 <= v < f.vocab_size:
                raise DataError(f"{where}: {f.name} must be an id in [0, {f.vocab_size}), got {v!r}")
        elif f.kind == "numerical":
            v = rec.numerical.get(f.name)
            if v is None or math.isnan(v):
                raise DataError(f"{where}: numerical feature {f.name!r} missing or NaN")
        else:
            v = rec.multimodal.get(f.name)
            if v is None or len(v) != f.dim:
                raise DataError(f"{where}: multimodal feature {f.name!r} must have {f.dim} values")


def build_dataset(items: list[ItemRecord], interactions: list[Interaction]) -> Dataset:
    """Sort, group and cross-check; unknown item references raise :class:`DataError`."""
    items = sorted(items, key=lambda r: r.item_id)
    known = {r.item_id for r in items}
    if len(known) != len(items):
        raise DataError("duplicate item_id in items")
    by_user: dict[str, list[Interaction]] = {}
    for x in interactions:
        if x.item_id not in known:
            raise DataError(f"interaction of user {x.user_id!r} references unknown item {x.item_id!r}")
        by_user.setdefault(x.user_id, []).append(x)
    users = sorted(by_user)
    seqs = [sorted(by_user[u], key=lambda x: (x.ts, x.item_id)) for u in users]
    return Dataset(items, users, seqs)


def ingest(interactions_path, items_path, schema_path=None) -> Dataset:
    items = []
    for lineno, obj in _read_jsonl(items_path, "item"):
        where = f"{items_path}:{lineno}"
        try:
            rec = ItemRecord.from_json(obj)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{where}: malformed item record: {e}") from None
        items.append(rec)
    if schema_path is not None:
        schema = FeatureSchema.load(schema_path)
        for rec in items:
            _check_item(rec, schema, f"{items_path}: item {rec.item_id}")
    inter = [_parse_interaction(obj, f"{interactions_path}:{lineno}")
             for lineno, obj in _read_jsonl(interactions_path, "interaction")]
    return build_dataset(items, inter)


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_normalized(ds: Dataset, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ip, tp = out / "items.jsonl", out / "interactions.jsonl"
    with open(ip, "w", encoding="utf-8") as fh:
        fh.writelines(_dump_line(r.to_json()) for r in ds.items)
    with open(tp, "w", encoding="utf-8") as fh:
        fh.writelines(_dump_line(x.to_json()) for s in ds.sequences for x in s)
    return tp, ip


# ---------------------------------------------------------------------------
# leave-one-out split
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    """Fitted schema and codebook plus the train sequences and held-out targets.

    Train sequences drop each user's last item; the evaluation input is the
    same prefix and the target is that last item. Users with fewer than three
    interactions have no train target after the hold-out and are skipped.
    """

    schema: FeatureSchema
    codebook: QuantileCodebook
    catalog: Catalog
    train_items: list[np.ndarray]
    train_ts: list[np.ndarray]
    test_truth: np.ndarray  # catalog rows


def prepare(ds: Dataset, schema: FeatureSchema, codebook: QuantileCodebook | None = None) -> Prepared:
    schema = fit_schema(schema, ds.items)
    codebook = codebook or QuantileCodebook.fit(schema, ds.items)
    catalog = Catalog(schema, codebook, ds.items)
    tr_i, tr_t, truth = [], [], []
    for u in range(len(ds.users)):
        rows, ts = ds.rows(u), ds.timestamps(u)
        if len(rows) < 3:
            continue
        tr_i.append(rows[:-1])
        tr_t.append(ts[:-1])
        truth.append(rows[-1])
    if not tr_i:
        raise DataError("no user has the three interactions needed for a train target and a held-out item")
    return Prepared(schema, codebook, catalog, tr_i, tr_t, np.array(truth, dtype=np.int64))


# ---------------------------------------------------------------------------
# planted-rule synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Generator parameters.

    The next item's category is ``rule[category(item_t), brand(item_{t-1})]``;
    within that category an item is drawn with Zipf weight. With probability
    ``noise`` the draw is replaced by a uniform item.
    """

    n_items: int = 1000
    n_users: int = 5000
    n_categories: int = 20
    n_brands: int = 8
    min_length: int = 8
    max_length: int = 20
    noise: float = 0.2
    zipf: float = 1.0
    mm_dim: int = 8
    mm_groups: int = 4
    mm_quantiles: int = 4
    mm_spread: float = 0.6  # within-cluster std relative to unit-norm centres
    price_bins: int = 8
    d_f: int = 16
    mean_gap: float = 3600.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise must lie in [0, 1], got {self.noise}")
        if self.n_items < self.n_categories:
            raise ConfigError("need at least one item per category")
        if not 2 <= self.min_length <= self.max_length:
            raise ConfigError("need 2 <= min_length <= max_length")
        if min(self.n_users, self.n_categories, self.n_brands) < 1:
            raise ConfigError("n_users, n_categories and n_brands must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        try:
            return cls(**obj)
        except TypeError as e:
            raise ConfigError(f"bad synthetic spec: {e}") from None


@dataclass
class Rules:
    """Ground truth of a synthetic corpus (0-based categories and brands, rows 1..N)."""

    table: np.ndarray  # [C, Bn] next category
    category: np.ndarray  # [N + 1], row 0 unused
    brand: np.ndarray  # [N + 1]
    weight: np.ndarray  # [N + 1] unnormalized Zipf weight within the item's category
    noise: float

    def to_json(self) -> dict:
        return {"table": self.table.tolist(), "category_of": self.category[1:].tolist(),
                "brand_of": self.brand[1:].tolist(), "weights": self.weight[1:].tolist(),
                "noise": self.noise}

    @classmethod
    def from_json(cls, obj: dict) -> "Rules":
        pad = lambda a, dt: np.concatenate([[0], np.asarray(a, dtype=dt)]).astype(dt)  # noqa: E731
        return cls(np.asarray(obj["table"], dtype=np.int64), pad(obj["category_of"], np.int64),
                   pad(obj["brand_of"], np.int64), pad(obj["weights"], np.float64), float(obj["noise"]))

    @property
    def n_items(self) -> int:
        return len(self.category) - 1

    def next_distribution(self, prev_row: int, cur_row: int) -> np.ndarray:
        """Probability of every row ``1..N`` being the item after ``cur_row``."""
        c = self.table[self.category[cur_row], self.brand[prev_row]]
        inside = np.where(self.category[1:] == c, self.weight[1:], 0.0)
        return (1.0 - self.noise) * inside / inside.sum() + self.noise / self.n_items


def synthetic_schema(spec: SyntheticSpec) -> FeatureSchema:
    return FeatureSchema(d_f=spec.d_f, features=[
        {"name": "item", "kind": "categorical", "vocab_size": spec.n_items + 1},
        {"name": "category", "kind": "categorical", "vocab_size": spec.n_categories + 1},
        {"name": "brand", "kind": "categorical", "vocab_size": spec.n_brands + 1},
        {"name": "price", "kind": "numerical", "n_bins": spec.price_bins},
        {"name": "image", "kind": "multimodal", "dim": spec.mm_dim, "groups": spec.mm_groups,
         "quantiles": spec.mm_quantiles},
    ])


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Interaction], list[ItemRecord], Rules]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    N, C, Bn = spec.n_items, spec.n_categories, spec.n_brands
    category = np.concatenate([[0], rng.permutation(np.arange(N) % C)])
    brand = np.concatenate([[0], rng.integers(0, Bn, size=N)])
    weight = np.zeros(N + 1)
    for c in range(C):
        rows = np.flatnonzero(category == c)
        rows = rows[rows > 0]
        weight[rows] = 1.0 / (1.0 + rng.permutation(len(rows))) ** spec.zipf
    table = rng.integers(0, C, size=(C, Bn))
    rules = Rules(table, category, brand, weight, spec.noise)

    centres = rng.normal(size=(C, spec.mm_dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    price_mu = rng.normal(3.0, 1.0, size=C)
    items = []
    for r in range(1, N + 1):
        c = category[r]
        vec = centres[c] + spec.mm_spread * rng.normal(size=spec.mm_dim) / math.sqrt(spec.mm_dim)
        items.append(ItemRecord(
            f"i{r:05d}",
            categorical={"item": r, "category": int(c) + 1, "brand": int(brand[r]) + 1},
            numerical={"price": round(float(np.exp(price_mu[c] + 0.3 * rng.normal())), 2)},
            multimodal={"image": [round(float(x), 5) for x in vec]}))

    cat_rows = [np.flatnonzero(category[1:] == c) + 1 for c in range(C)]
    cat_p = [weight[rows] / weight[rows].sum() for rows in cat_rows]
    behaviors = rng.choice(len(BEHAVIORS), p=[0.8, 0.15, 0.05], size=spec.n_users * spec.max_length)
    inter, b = [], 0
    for u in range(spec.n_users):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        seq = [int(rng.integers(1, N + 1))]
        while len(seq) < length:
            prev, cur = seq[-2] if len(seq) > 1 else seq[-1], seq[-1]
            if rng.random() < spec.noise:
                seq.append(int(rng.integers(1, N + 1)))
            else:
                c = table[category[cur], brand[prev]]
                seq.append(int(rng.choice(cat_rows[c], p=cat_p[c])))
        ts = int(rng.integers(1_600_000_000, 1_700_000_000))
        for r in seq:
            inter.append(Interaction(f"u{u:06d}", f"i{r:05d}", ts, BEHAVIORS[behaviors[b]]))
            ts += 1 + int(rng.exponential(spec.mean_gap))
            b += 1
    return inter, items, rules


def write_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, Path]:
    inter, items, rules = generate_synthetic(spec)
    out = Path(out_dir)
    ds = build_dataset(items, inter)
    tp, ip = write_normalized(ds, out)
    paths = {"interactions": tp, "items": ip, "rules": out / "rules.json", "schema": out / "schema.json",
             "spec": out / "synthetic_spec.json"}
    paths["rules"].write_text(json.dumps(rules.to_json()) + "\n")
    synthetic_schema(spec).save(paths["schema"])
    paths["spec"].write_text(json.dumps(spec.to_json(), indent=2) + "\n")
    return paths


def bayes_scores(rules: Rules, histories: list[np.ndarray]) -> np.ndarray:
    """Exact next-item probabilities ``[U, N]`` given each history's last two items."""
    out = np.empty((len(histories), rules.n_items))
    for u, h in enumerate(histories):
        prev = h[-2] if len(h) > 1 else h[-1]
        out[u] = rules.next_distribution(int(prev), int(h[-1]))
    return out


def bayes_expected_recall(rules: Rules, n: int) -> float:
    """Recall@n of the rule-aware ranker averaged uniformly over (category, brand) contexts.

    Scores are ordered by probability; inside the predicted category the top
    items by weight come first, then the noise floor.
    """
    C, Bn = rules.table.shape
    N = rules.n_items
    total = 0.0
    for c in range(C):
        for b in range(Bn):
            nxt = rules.table[c, b]
            w = np.sort(rules.weight[1:][rules.category[1:] == nxt])[::-1]
            k = min(n, len(w))
            inside = (1 - rules.noise) * w[:k].sum() / w.sum() + rules.noise * k / N
            total += inside + rules.noise * max(n - k, 0) / N
    return total / (C * Bn)
