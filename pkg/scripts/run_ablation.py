"""Full model against its five single-component ablations over several seeds."""

import argparse

import numpy as np
from _common import desk_corpus, dump, printer

from heterrec.cli import ABLATIONS
from heterrec.presets import desk_config
from heterrec.trainer import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()

    prep, _ = desk_corpus()
    table = {}
    for name in args.variants:
        scores = []
        for seed in args.seeds:
            cfg = desk_config(seed=seed, epochs=args.epochs, **ABLATIONS[name])
            rep = run_experiment(cfg, prep, f"{args.out}/{name}/seed{seed}", log=printer(f"{name}/{seed}"))
            scores.append(rep["final"]["recall"]["10"])
        s = np.array(scores)
        table[name] = {"recall@10": scores, "mean": float(s.mean()),
                       "se": float(s.std(ddof=1) / np.sqrt(len(s))) if len(s) > 1 else None}
        print(name, table[name], flush=True)
    dump(f"{args.out}/summary.json", table)


if __name__ == "__main__":
    main()
