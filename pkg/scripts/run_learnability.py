"""Train the full model on the desk corpus and compare with the Bayes and popularity baselines."""

import argparse

from _common import desk_corpus, dump, printer

from heterrec.data import bayes_scores
from heterrec.evalkit import evaluate_scores
from heterrec.presets import desk_config
from heterrec.trainer import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default="results/learnability")
    args = ap.parse_args()

    prep, rules = desk_corpus()
    bayes = evaluate_scores(bayes_scores(rules, prep.train_items), prep.test_truth, [5, 10, 50])
    rep = run_experiment(desk_config(seed=args.seed, epochs=args.epochs), prep, args.out, log=printer("epoch"))
    summary = {"model": rep["final"]["recall"], "bayes": bayes.recall, "popularity": rep["popularity"]["recall"],
               "seconds": round(rep["_seconds"], 1)}
    dump(f"{args.out}/summary.json", summary)
    print(summary)


if __name__ == "__main__":
    main()
