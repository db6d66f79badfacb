"""Desk-scale settings used by the acceptance run and the experiment scripts.

The batch size, learning rate and widths were picked by short sweeps on the
default synthetic corpus; none of them comes from a published setting.
"""

from __future__ import annotations

from heterrec.data import SyntheticSpec
from heterrec.hct import ModelConfig
from heterrec.lmp import LmpConfig
from heterrec.model import AblationFlags
from heterrec.trainer import ExperimentConfig, TrainConfig


def desk_spec(seed: int = 0) -> SyntheticSpec:
    """1000 items, 5000 users, 20 categories, 8 brands, noise 0.2."""
    return SyntheticSpec(seed=seed)


def desk_config(seed: int = 0, epochs: int = 10, n1: int = 1, n2: int = 1, **flags) -> ExperimentConfig:
    return ExperimentConfig(
        model=ModelConfig(d_f=16, d_k=32, token_heads=2, item_heads=2, n_token_blocks=n1,
                          n_item_blocks=n2, t_max=16),
        loss=LmpConfig(n_step=3, tau=1.0, margin=1.0),
        train=TrainConfig(batch_size=32, epochs=epochs, lr=5e-3, lr_schedule="cosine", seed=seed,
                          flags=AblationFlags(**flags), cutoffs=[5, 10, 50]),
    )
