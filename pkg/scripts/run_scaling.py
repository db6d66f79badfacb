"""Sweep the seven (token blocks, item blocks) depth pairs on the desk corpus."""

import argparse

from _common import desk_corpus, dump, printer

from heterrec.cli import SCALING_PAIRS
from heterrec.presets import desk_config
from heterrec.trainer import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--out", default="results/scaling")
    args = ap.parse_args()

    prep, _ = desk_corpus()
    rows = {}
    for n1, n2 in SCALING_PAIRS:
        name = f"scaling_n1-{n1}_n2-{n2}"
        rep = run_experiment(desk_config(seed=args.seed, epochs=args.epochs, n1=n1, n2=n2), prep,
                             f"{args.out}/{name}", log=printer(name))
        rows[name] = {"recall": rep["final"]["recall"], "ndcg": rep["final"]["ndcg"],
                      "parameters": rep["n_parameters"], "seconds": round(rep["_seconds"], 1)}
        print(name, rows[name], flush=True)
    dump(f"{args.out}/summary.json", rows)


if __name__ == "__main__":
    main()
