"""Heterogeneous token flattening.

Every item feature becomes one ``d_f``-wide token:

* categorical ids index a per-feature table,
* numerical values are binned (left-closed bins) and the bin indexes a table,
* multimodal vectors are split into ``Z`` contiguous groups; each dimension is
  quantized against per-dimension quantile boundaries, the indices within a
  group are packed into one integer (mixed radix, first dimension least
  significant) and each group looks up its own ``d_f / Z`` table. The group
  slices are concatenated back to ``d_f``.

A user sequence of ``T`` items becomes ``K * T`` token rows ordered item-major.
Each row also receives a learned feature-type embedding, because the
within-item attention pattern is symmetric and would otherwise not tell the
tokens of one item apart.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from heterrec.errors import ConfigError, DataError, ShapeError
from heterrec.numerics import (
    Tensor,
    concat_last_dim,
    embedding_gather,
    load_arrays,
    matmul,
    reshape,
    save_arrays,
)
from heterrec.numerics.nn import Module, param

KINDS = ("categorical", "numerical", "multimodal")


@dataclass
class FeatureSpec:
    name: str
    kind: str
    vocab_size: int | None = None  # categorical; id 0 is the OOV row
    boundaries: list[float] | None = None  # numerical, explicit
    n_bins: int | None = None  # numerical, fitted as equal-frequency bins
    dim: int | None = None  # multimodal d_v
    groups: int | None = None  # multimodal Z
    quantiles: int | None = None  # multimodal q

    @property
    def n_rows(self) -> int:
        if self.kind == "categorical":
            return self.vocab_size
        if self.kind == "numerical":
            return len(self.boundaries) + 1 if self.boundaries is not None else self.n_bins
        return self.quantiles ** (self.dim // self.groups)

    @property
    def n_columns(self) -> int:
        return self.groups if self.kind == "multimodal" else 1


@dataclass
class FeatureSchema:
    features: list[FeatureSpec]
    d_f: int
    max_token_space: int = 1 << 16

    def __post_init__(self):
        self.features = [f if isinstance(f, FeatureSpec) else FeatureSpec(**f) for f in self.features]
        self.validate()

    @property
    def K(self) -> int:
        return len(self.features)

    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        for j, f in enumerate(self.features):
            if f.name == name:
                return j
        raise ConfigError(f"unknown feature {name!r}")

    def column_slices(self) -> list[slice]:
        out, start = [], 0
        for f in self.features:
            out.append(slice(start, start + f.n_columns))
            start += f.n_columns
        return out

    @property
    def n_columns(self) -> int:
        return sum(f.n_columns for f in self.features)

    def validate(self) -> None:
        if not self.features:
            raise ConfigError("schema needs at least one feature")
        if self.d_f < 1:
            raise ConfigError("d_f must be positive")
        seen = set()
        for f in self.features:
            if f.name in seen:
                raise ConfigError(f"duplicate feature name {f.name!r}")
            seen.add(f.name)
            if f.kind not in KINDS:
                raise ConfigError(f"{f.name}: kind must be one of {KINDS}, got {f.kind!r}")
            if f.kind == "categorical":
                if not f.vocab_size or f.vocab_size < 1:
                    raise ConfigError(f"{f.name}: categorical feature needs vocab_size >= 1")
            elif f.kind == "numerical":
                if f.boundaries is None and not f.n_bins:
                    raise ConfigError(f"{f.name}: numerical feature needs boundaries or n_bins")
                if f.boundaries is not None and any(np.diff(f.boundaries) < 0):
                    raise ConfigError(f"{f.name}: boundaries must be non-decreasing")
            else:
                if not (f.dim and f.groups and f.quantiles):
                    raise ConfigError(f"{f.name}: multimodal feature needs dim, groups, quantiles")
                if f.dim % f.groups:
                    raise ConfigError(f"{f.name}: groups Z={f.groups} must divide dim {f.dim}")
                if self.d_f % f.groups:
                    raise ConfigError(f"{f.name}: groups Z={f.groups} must divide d_f={self.d_f}")
                if f.quantiles < 2:
                    raise ConfigError(f"{f.name}: need at least 2 quantiles")
                if f.quantiles ** (f.dim // f.groups) > self.max_token_space:
                    raise ConfigError(
                        f"{f.name}: token space q^(d_v/Z) = {f.quantiles}^{f.dim // f.groups} "
                        f"exceeds max_token_space={self.max_token_space}")

    def to_json(self) -> dict:
        feats = [{k: v for k, v in asdict(f).items() if v is not None} for f in self.features]
        return {"d_f": self.d_f, "max_token_space": self.max_token_space, "features": feats}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSchema":
        try:
            return cls(features=obj["features"], d_f=obj["d_f"],
                       max_token_space=obj.get("max_token_space", 1 << 16))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed schema: {e}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None


@dataclass
class ItemRecord:
    item_id: str
    categorical: dict[str, int] = field(default_factory=dict)
    numerical: dict[str, float] = field(default_factory=dict)
    multimodal: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"item_id": self.item_id, "categorical": self.categorical,
                "numerical": self.numerical, "multimodal": self.multimodal}

    @classmethod
    def from_json(cls, obj: dict) -> "ItemRecord":
        return cls(item_id=str(obj["item_id"]),
                   categorical={k: int(v) for k, v in obj.get("categorical", {}).items()},
                   numerical={k: float(v) for k, v in obj.get("numerical", {}).items()},
                   multimodal={k: [float(x) for x in v] for k, v in obj.get("multimodal", {}).items()})


# ---------------------------------------------------------------------------
# binning and quantile codebooks
# ---------------------------------------------------------------------------


def bin_index(boundaries, values) -> np.ndarray:
    """Number of boundaries <= value, i.e. left-closed bins."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(np.isnan(values)):
        raise DataError("cannot bin NaN values")
    return np.searchsorted(np.asarray(boundaries, dtype=np.float64), values, side="right")


def fit_quantile_boundaries(values: np.ndarray, q: int, name: str = "") -> np.ndarray:
    """Per-column boundaries at the empirical k/q quantiles, k = 1..q-1.

    ``values`` is ``[N, d]``; the result is ``[d, q - 1]``. Uses the linear
    interpolation quantile definition.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"expected [N, d] values, got {values.shape}")
    if values.shape[0] < q:
        raise DataError(f"{name or 'corpus'}: need at least q={q} rows to fit quantiles, got {values.shape[0]}")
    if np.any(~np.isfinite(values)):
        raise DataError(f"{name or 'corpus'}: non-finite values in corpus")
    probs = np.arange(1, q) / q
    bounds = np.quantile(values, probs, axis=0, method="linear").T
    for d in range(values.shape[1]):
        if len(np.unique(values[:, d])) < q:
            warnings.warn(f"{name or 'corpus'} dimension {d}: fewer than {q} distinct values; "
                          "quantile boundaries coincide", stacklevel=2)
    return np.ascontiguousarray(bounds)


def fit_quantile_codebook(vectors: np.ndarray, groups: int, q: int, name: str = "") -> "GroupQuantizer":
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] % groups:
        raise ShapeError(f"groups Z={groups} must divide the vector width of {vectors.shape}")
    return GroupQuantizer(fit_quantile_boundaries(vectors, q, name), groups, q)


class GroupQuantizer:
    """Fitted boundaries for one multimodal feature."""

    def __init__(self, boundaries: np.ndarray, groups: int, q: int):
        # float32-representable so that a saved codebook reloads bit-exactly
        self.boundaries = np.asarray(boundaries, dtype=np.float32).astype(np.float64)
        self.groups = groups
        self.q = q
        self.dim = self.boundaries.shape[0]
        self.group_width = self.dim // groups
        self.radix = q ** np.arange(self.group_width)

    @property
    def token_space(self) -> int:
        return self.q ** self.group_width

    def cell_indices(self, vectors) -> np.ndarray:
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"vector width {x.shape[1]} does not match codebook width {self.dim}")
        if np.any(np.isnan(x)):
            raise DataError("cannot quantize NaN values")
        return np.stack([np.searchsorted(self.boundaries[d], x[:, d], side="right")
                         for d in range(self.dim)], axis=1)

    def quantize(self, vectors) -> np.ndarray:
        """Token ids ``[N, Z]`` (or ``[Z]`` for a single vector)."""
        single = np.asarray(vectors).ndim == 1
        idx = self.cell_indices(vectors).reshape(-1, self.groups, self.group_width)
        tokens = (idx * self.radix).sum(axis=-1)
        return tokens[0] if single else tokens

    def decode(self, token: int) -> list[int]:
        return [(int(token) // self.q ** m) % self.q for m in range(self.group_width)]


class QuantileCodebook:
    """All multimodal quantizers of a schema, keyed by feature name."""

    def __init__(self, quantizers: dict[str, GroupQuantizer]):
        self.quantizers = quantizers

    def __getitem__(self, name: str) -> GroupQuantizer:
        try:
            return self.quantizers[name]
        except KeyError:
            raise ConfigError(f"codebook has no multimodal feature {name!r}") from None

    @classmethod
    def fit(cls, schema: FeatureSchema, items: Sequence[ItemRecord]) -> "QuantileCodebook":
        out = {}
        for f in schema.features:
            if f.kind != "multimodal":
                continue
            vecs = _collect_vectors(items, f)
            out[f.name] = fit_quantile_codebook(vecs, f.groups, f.quantiles, name=f.name)
        return cls(out)

    def save(self, path) -> None:
        meta = {"features": {k: {"groups": g.groups, "quantiles": g.q, "dim": g.dim}
                             for k, g in self.quantizers.items()}}
        save_arrays(path, {k: g.boundaries for k, g in self.quantizers.items()}, meta)

    @classmethod
    def load(cls, path) -> "QuantileCodebook":
        arrays, meta = load_arrays(path)
        return cls({k: GroupQuantizer(arrays[k].astype(np.float64), v["groups"], v["quantiles"])
                    for k, v in meta["features"].items()})


def _collect_vectors(items: Sequence[ItemRecord], f: FeatureSpec) -> np.ndarray:
    rows = []
    for rec in items:
        v = rec.multimodal.get(f.name)
        if v is None:
            raise DataError(f"item {rec.item_id}: missing multimodal feature {f.name!r}")
        if len(v) != f.dim:
            raise ShapeError(f"item {rec.item_id}: {f.name} has width {len(v)}, schema says {f.dim}")
        rows.append(v)
    return np.asarray(rows, dtype=np.float64)


def fit_schema(schema: FeatureSchema, items: Sequence[ItemRecord]) -> FeatureSchema:
    """Copy of ``schema`` with equal-frequency boundaries for numerical features lacking them."""
    feats = []
    for f in schema.features:
        f = FeatureSpec(**asdict(f))
        if f.kind == "numerical" and f.boundaries is None:
            vals = np.array([[_numeric(rec, f.name)] for rec in items])
            f.boundaries = [float(b) for b in fit_quantile_boundaries(vals, f.n_bins, f.name)[0]]
        feats.append(f)
    return FeatureSchema(feats, schema.d_f, schema.max_token_space)


def _numeric(rec: ItemRecord, name: str) -> float:
    try:
        v = rec.numerical[name]
    except KeyError:
        raise DataError(f"item {rec.item_id}: missing numerical feature {name!r}") from None
    if math.isnan(v):
        raise DataError(f"item {rec.item_id}: {name} is NaN")
    return v


# ---------------------------------------------------------------------------
# item catalog: derived token ids per item
# ---------------------------------------------------------------------------


class Catalog:
    """Token ids for every item, row 0 reserved as the padding item.

    ``codes`` is ``[N + 1, n_columns]``: one column per categorical or
    numerical feature (row id / bin id) and ``Z`` columns per multimodal
    feature. ``raw`` keeps the multimodal vectors for the untokenized variant.
    """

    def __init__(self, schema: FeatureSchema, codebook: QuantileCodebook, items: Sequence[ItemRecord],
                 oov: bool = False):
        self.schema = schema
        self.codebook = codebook
        self.item_ids = [rec.item_id for rec in items]
        self.index = {iid: i + 1 for i, iid in enumerate(self.item_ids)}
        n = len(items)
        self.codes = np.zeros((n + 1, schema.n_columns), dtype=np.int64)
        self.raw = {f.name: np.zeros((n + 1, f.dim), dtype=np.float32)
                    for f in schema.features if f.kind == "multimodal"}
        if n:
            self.codes[1:] = item_codes(schema, codebook, items, oov=oov)
            for f in schema.features:
                if f.kind == "multimodal":
                    self.raw[f.name][1:] = _collect_vectors(items, f)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


def item_codes(schema: FeatureSchema, codebook: QuantileCodebook, items: Sequence[ItemRecord],
               oov: bool = False) -> np.ndarray:
    """Integer token ids ``[len(items), n_columns]`` for raw item records.

    With ``oov=True`` unknown categorical ids map to the reserved row 0
    instead of raising.
    """
    out = np.zeros((len(items), schema.n_columns), dtype=np.int64)
    for j, (f, cols) in enumerate(zip(schema.features, schema.column_slices())):
        if f.kind == "categorical":
            ids = []
            for rec in items:
                if f.name not in rec.categorical:
                    raise DataError(f"item {rec.item_id}: missing categorical feature {f.name!r}")
                v = rec.categorical[f.name]
                if not 0 <= v < f.vocab_size:
                    if not oov:
                        raise IndexError(f"item {rec.item_id}: {f.name} id {v} outside [0, {f.vocab_size})")
                    v = 0
                ids.append(v)
            out[:, cols.start] = ids
        elif f.kind == "numerical":
            out[:, cols.start] = bin_index(f.boundaries, [_numeric(rec, f.name) for rec in items])
        else:
            out[:, cols] = codebook[f.name].quantize(_collect_vectors(items, f))
    return out


# ---------------------------------------------------------------------------
# learnable encoder
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    embeddings: Tensor  # [K * T, d_f]
    item_index: np.ndarray
    feature_type: np.ndarray
    timestamps: np.ndarray  # per token


class TokenEncoder(Module):
    """Embedding tables for every feature plus the feature-type embedding.

    With ``tokenize_multimodal=False`` multimodal features bypass the
    quantizer and enter through a learned linear map of the raw vector.
    """

    def __init__(self, schema: FeatureSchema, rng: np.random.Generator, tokenize_multimodal: bool = True):
        self.schema = schema
        self.tokenize_multimodal = tokenize_multimodal
        d_f = schema.d_f
        std = 1.0 / math.sqrt(d_f)
        self.tables: dict = {}
        for f in schema.features:
            if f.kind == "multimodal":
                if tokenize_multimodal:
                    self.tables[f.name] = [param(rng, (f.n_rows, d_f // f.groups), std)
                                           for _ in range(f.groups)]
                else:
                    self.tables[f.name] = param(rng, (f.dim, d_f), 1.0 / math.sqrt(f.dim))
            else:
                self.tables[f.name] = param(rng, (f.n_rows, d_f), std)
        self.type_embedding = param(rng, (schema.K, d_f), std)

    # single-feature encoders ---------------------------------------------

    def encode_categorical(self, j: int, item_id: int) -> Tensor:
        f = self._feature(j, "categorical")
        return embedding_gather(self.tables[f.name], np.array([item_id]))[0]

    def encode_numerical(self, j: int, value: float) -> Tensor:
        f = self._feature(j, "numerical")
        b = bin_index(f.boundaries, [value])
        return embedding_gather(self.tables[f.name], b)[0]

    def embed_multimodal(self, j: int, tokens) -> Tensor:
        f = self._feature(j, "multimodal")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[-1] != f.groups:
            raise ShapeError(f"{f.name}: expected {f.groups} group tokens, got {tokens.shape[-1]}")
        return concat_last_dim([embedding_gather(self.tables[f.name][g], tokens[..., g])
                                for g in range(f.groups)])

    def _feature(self, j: int, kind: str) -> FeatureSpec:
        f = self.schema.features[j]
        if f.kind != kind:
            raise ConfigError(f"feature {j} ({f.name}) is {f.kind}, not {kind}")
        return f

    # batched ----------------------------------------------------------------

    def encode_items(self, catalog: Catalog, items: np.ndarray) -> Tensor:
        """Token embeddings ``[..., K, d_f]`` for catalog rows ``items``."""
        items = np.asarray(items, dtype=np.int64)
        codes = catalog.codes[items]
        parts = []
        for f, cols in zip(self.schema.features, self.schema.column_slices()):
            if f.kind == "multimodal":
                if self.tokenize_multimodal:
                    parts.append(self.embed_multimodal(self.schema.index(f.name), codes[..., cols]))
                else:
                    raw = Tensor(catalog.raw[f.name][items])
                    parts.append(matmul(raw.reshape(-1, f.dim), self.tables[f.name])
                                 .reshape(*items.shape, self.schema.d_f))
            else:
                parts.append(embedding_gather(self.tables[f.name], codes[..., cols.start]))
        flat = concat_last_dim(parts)
        return reshape(flat, (*items.shape, self.schema.K, self.schema.d_f))

    def flatten(self, catalog: Catalog, items: np.ndarray) -> Tensor:
        """``[B, T]`` item rows -> ``[B, T * K, d_f]`` token stream with type embeddings."""
        tok = self.encode_items(catalog, items) + self.type_embedding
        B, T = np.shape(items)
        return reshape(tok, (B, T * self.schema.K, self.schema.d_f))

    def flatten_sequence(self, codebook: QuantileCodebook, records: Sequence[ItemRecord],
                         timestamps: Sequence[int], t_max: int) -> TokenSequence:
        """Token stream of one user sequence; keeps the most recent ``t_max`` items."""
        if not records:
            raise DataError("cannot flatten an empty sequence")
        if len(records) != len(timestamps):
            raise DataError("records and timestamps differ in length")
        ts = np.asarray(timestamps, dtype=np.int64)
        if np.any(np.diff(ts) < 0):
            raise DataError("sequence timestamps must be non-decreasing")
        records, ts = list(records)[-t_max:], ts[-t_max:]
        cat = Catalog(self.schema, codebook, records)
        emb = self.flatten(cat, np.arange(1, len(records) + 1)[None, :])
        T, K = len(records), self.schema.K
        return TokenSequence(embeddings=reshape(emb, (T * K, self.schema.d_f)),
                             item_index=np.repeat(np.arange(T), K),
                             feature_type=np.tile(np.arange(K), T),
                             timestamps=np.repeat(ts, K))
