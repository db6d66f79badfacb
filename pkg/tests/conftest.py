import numpy as np
import pytest

from heterrec.hct import ModelConfig
from heterrec.htfl import Catalog, FeatureSchema, ItemRecord, QuantileCodebook
from heterrec.lmp import LmpConfig
from heterrec.model import AblationFlags, HeterRec


def schema_for_k(K: int, n_items: int = 12, d_f: int = 8) -> FeatureSchema:
    feats = [{"name": "item", "kind": "categorical", "vocab_size": n_items + 1},
             {"name": "price", "kind": "numerical", "boundaries": [0.3, 0.6]},
             {"name": "img", "kind": "multimodal", "dim": 4, "groups": 2, "quantiles": 2}]
    return FeatureSchema(d_f=d_f, features=feats[:K])


def random_items(n_items: int, seed: int = 0) -> list[ItemRecord]:
    rng = np.random.default_rng(seed)
    return [ItemRecord(f"it{i:03d}", categorical={"item": i + 1},
                       numerical={"price": float(rng.random())},
                       multimodal={"img": rng.normal(size=4).tolist()}) for i in range(n_items)]


class World:
    def __init__(self, K=3, n_items=12, d_f=8, d_k=8, n_token_blocks=1, n_item_blocks=1,
                 n_step=3, seed=0, flags=None, lmp=None, **cfg):
        self.schema = schema_for_k(K, n_items, d_f)
        items = random_items(n_items, seed)
        self.catalog = Catalog(self.schema, QuantileCodebook.fit(self.schema, items), items)
        self.cfg = ModelConfig(d_f=d_f, d_k=d_k, n_token_blocks=n_token_blocks,
                               n_item_blocks=n_item_blocks, **cfg)
        self.lmp = lmp or LmpConfig(n_step=n_step)
        self.model = HeterRec(self.schema, self.cfg, self.lmp, seed=seed, flags=flags or AblationFlags())
        self.rng = np.random.default_rng(seed + 100)

    def batch(self, B, T, lengths=None):
        items = self.rng.integers(1, self.catalog.n_items + 1, size=(B, T))
        ts = np.cumsum(self.rng.integers(0, 5000, size=(B, T)), axis=1)
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        return items, ts, lengths


@pytest.fixture
def world():
    return World
