"""Shared setup for the experiment scripts: the desk corpus, prepared once."""

import json
from pathlib import Path

from heterrec.data import build_dataset, generate_synthetic, prepare, synthetic_schema
from heterrec.presets import desk_spec


def desk_corpus(seed: int = 0):
    spec = desk_spec(seed)
    inter, items, rules = generate_synthetic(spec)
    return prepare(build_dataset(items, inter), synthetic_schema(spec)), rules


def dump(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def printer(tag: str):
    return lambda row: print(tag, json.dumps(row, sort_keys=True), flush=True)
