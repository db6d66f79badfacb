"""Full-catalog retrieval metrics for the single held-out item protocol.

Items are ranked by inner product with the user embedding; equal scores are
ordered by ascending item id so metric values never depend on sort
stability. With one relevant item per user, ideal DCG is 1 and nDCG@N is
``1 / log2(rank + 1)`` inside the cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from heterrec.errors import ContractError, DataError

DEFAULT_CUTOFFS = (5, 10, 50)


def score_catalog(user: np.ndarray, catalog: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Item ids sorted by descending score, ties by ascending id.

    ``ids`` defaults to ``1..N`` (catalog row ``r`` is item ``r + 1``).
    """
    catalog = np.asarray(catalog, dtype=np.float64)
    if catalog.ndim != 2 or catalog.shape[0] == 0:
        raise DataError("cannot rank an empty catalog")
    user = np.asarray(user, dtype=np.float64)
    if user.shape != (catalog.shape[1],):
        raise ContractError(f"user embedding has shape {user.shape}, catalog width is {catalog.shape[1]}")
    ids = np.arange(1, len(catalog) + 1) if ids is None else np.asarray(ids)
    scores = catalog @ user
    return ids[np.lexsort((ids, -scores))]


def rank_of(scores: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based rank of column ``truth[u]`` in each row of ``scores`` under the tie rule.

    Columns are the item ids in ascending order, so a tied item ranks ahead
    of the truth exactly when its column index is smaller.
    """
    scores = np.atleast_2d(scores)
    truth = np.asarray(truth)
    s_t = scores[np.arange(len(truth)), truth][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s_t) | ((scores == s_t) & (cols < truth[:, None]))
    return 1 + ahead.sum(axis=1)


def recall_at_n(ranked, truth, n: int) -> int:
    if n < 1:
        raise ContractError(f"cutoff must be >= 1, got {n}")
    return int(truth in list(ranked[:n]))


def ndcg_at_n(ranked, truth, n: int) -> float:
    if n < 1:
        raise ContractError(f"cutoff must be >= 1, got {n}")
    hits = np.flatnonzero(np.asarray(ranked[:n]) == truth)
    return 0.0 if len(hits) == 0 else float(1.0 / np.log2(hits[0] + 2))


def metrics_from_ranks(ranks: np.ndarray, cutoffs=DEFAULT_CUTOFFS) -> tuple[dict, dict]:
    ranks = np.asarray(ranks, dtype=np.float64)
    recall, ndcg = {}, {}
    for n in cutoffs:
        if n < 1:
            raise ContractError(f"cutoff must be >= 1, got {n}")
        hit = ranks <= n
        recall[str(n)] = float(hit.mean()) if len(ranks) else 0.0
        ndcg[str(n)] = float(np.where(hit, 1.0 / np.log2(ranks + 1), 0.0).mean()) if len(ranks) else 0.0
    return recall, ndcg


@dataclass
class EvalReport:
    cutoffs: list[int]
    recall: dict[str, float]
    ndcg: dict[str, float]
    users_evaluated: int
    catalog_size: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"cutoffs": list(self.cutoffs), "recall": self.recall, "ndcg": self.ndcg,
               "users_evaluated": self.users_evaluated, "catalog_size": self.catalog_size}
        out.update(self.extra)
        return out


def evaluate_scores(scores: np.ndarray, truth_rows: np.ndarray, cutoffs=DEFAULT_CUTOFFS) -> EvalReport:
    """Metrics from a ``[U, N]`` score matrix; ``truth_rows`` are 1-based catalog rows."""
    scores = np.atleast_2d(scores)
    truth = np.asarray(truth_rows) - 1
    if len(truth) and (truth.min() < 0 or truth.max() >= scores.shape[1]):
        raise DataError("ground-truth item missing from the catalog")
    recall, ndcg = metrics_from_ranks(rank_of(scores, truth), cutoffs)
    return EvalReport(list(cutoffs), recall, ndcg, len(truth), scores.shape[1])


def evaluate(users: np.ndarray, catalog: np.ndarray, truth_rows: np.ndarray,
             cutoffs=DEFAULT_CUTOFFS, chunk: int = 1024) -> EvalReport:
    """Inner-product retrieval metrics for ``users [U, d]`` against ``catalog [N, d]``."""
    users = np.asarray(users, dtype=np.float64)
    catalog = np.asarray(catalog, dtype=np.float64)
    if catalog.shape[0] == 0:
        raise DataError("cannot evaluate against an empty catalog")
    if users.shape[1] != catalog.shape[1]:
        raise ContractError(f"user width {users.shape[1]} != catalog width {catalog.shape[1]}")
    truth = np.asarray(truth_rows)
    if len(truth) and (truth.min() < 1 or truth.max() > len(catalog)):
        raise DataError("ground-truth item missing from the catalog")
    ranks = np.concatenate([rank_of(users[s:s + chunk] @ catalog.T, truth[s:s + chunk] - 1)
                            for s in range(0, len(users), chunk)] or [np.zeros(0, int)])
    recall, ndcg = metrics_from_ranks(ranks, cutoffs)
    return EvalReport(list(cutoffs), recall, ndcg, len(truth), len(catalog))


def popularity_scores(sequences, n_items: int) -> np.ndarray:
    """Training interaction counts per catalog row ``1..N`` as a ``[N]`` score vector."""
    counts = np.zeros(n_items + 1, dtype=np.float64)
    for seq in sequences:
        np.add.at(counts, np.asarray(seq, dtype=np.int64), 1.0)
    return counts[1:]


def evaluate_popularity(train_sequences, truth_rows, n_items: int, cutoffs=DEFAULT_CUTOFFS) -> EvalReport:
    pop = popularity_scores(train_sequences, n_items)
    scores = np.broadcast_to(pop, (len(truth_rows), n_items))
    return evaluate_scores(scores, truth_rows, cutoffs)
