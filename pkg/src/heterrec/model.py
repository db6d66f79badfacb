"""The full two-tower model: shared token encoder, user tower, item tower, step heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from heterrec.hct import ItemTower, ModelConfig, UserTower
from heterrec.htfl import Catalog, FeatureSchema, TokenEncoder
from heterrec.lmp import LmpConfig, LmpHeads, LossBreakdown, total_loss
from heterrec.numerics import Tensor
from heterrec.numerics.nn import Module


@dataclass
class AblationFlags:
    htfl_off: bool = False  # concat-of-features item vectors instead of the token stream
    mfk_off: bool = False  # raw multimodal vectors through a linear map, no quantization
    hct_off: bool = False  # one flat item-level stack of N1 + N2 blocks
    lmp_off: bool = False  # plain multi-step InfoNCE, no indicator gating
    tlmp_off: bool = False  # no token-level terms

    def to_json(self) -> dict:
        return asdict(self)


class HeterRec(Module):
    def __init__(self, schema: FeatureSchema, cfg: ModelConfig, loss_cfg: LmpConfig,
                 seed: int = 0, flags: AblationFlags | None = None):
        flags = flags or AblationFlags()
        cfg.validate()
        loss_cfg.validate()
        if cfg.d_f != schema.d_f:
            cfg = replace(cfg, d_f=schema.d_f)
        rng = np.random.default_rng(seed)
        self.schema = schema
        self.cfg = cfg
        self.flags = flags
        self.encoder = TokenEncoder(schema, rng, tokenize_multimodal=not flags.mfk_off)
        token_stream = not (flags.htfl_off or flags.hct_off)
        self.user = UserTower(cfg, schema, self.encoder, rng, flatten=token_stream, stack_all=flags.hct_off)
        self.item = ItemTower(cfg, schema, self.encoder, rng)
        if flags.tlmp_off or not token_stream:
            types = []
        else:
            types = schema.names() if loss_cfg.token_types is None else list(loss_cfg.token_types)
        self.loss_cfg = replace(loss_cfg, gated=loss_cfg.gated and not flags.lmp_off, token_types=types)
        self.heads = LmpHeads(self.loss_cfg, cfg.d_k, schema.d_f, types)
        self.type_index = {f.name: j for j, f in enumerate(schema.features)}

    def loss(self, catalog: Catalog, items: np.ndarray, ts: np.ndarray, lengths: np.ndarray,
             frozen_gates=None) -> LossBreakdown:
        u = self.user(catalog, items, ts)
        v = self.item(catalog, items)
        return total_loss(u.users, v.items, lengths, self.heads, self.loss_cfg,
                          user_tokens=u.tokens, item_tokens=v.tokens, type_index=self.type_index,
                          frozen_gates=frozen_gates)

    def user_embeddings(self, catalog: Catalog, items: np.ndarray, ts: np.ndarray,
                        lengths: np.ndarray) -> np.ndarray:
        """Step-1 projected state at each sequence's last real position: ``[B, d_k]``."""
        u = self.user(catalog, items, ts).users
        last = u.data[np.arange(len(lengths)), np.asarray(lengths) - 1]
        return self.heads.item[0](Tensor(last)).data

    def item_embeddings(self, catalog: Catalog, rows: np.ndarray | None = None,
                        chunk: int = 4096) -> np.ndarray:
        rows = np.arange(1, catalog.n_items + 1) if rows is None else np.asarray(rows)
        parts = [self.item(catalog, rows[s:s + chunk]).items.data for s in range(0, len(rows), chunk)]
        return np.concatenate(parts, axis=0)
