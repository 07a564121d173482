"""Full-catalog top-K evaluation (Recall@K, NDCG@K), optionally on truncated vectors."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, PositiveIndex
from .embeddings import Tables
from .types import MRLRecError

DEFAULT_KS = (10, 20, 50)
_CHUNK = 1024


class EmptyTestSet(MRLRecError, ValueError):
    pass


@dataclass
class MetricReport:
    per_k: dict[int, tuple[float, float]]
    n_evaluated_users: int
    dim_cut: int
    partition: str = field(default="test", compare=False)

    def recall(self, k: int) -> float:
        return self.per_k[k][0]

    def ndcg(self, k: int) -> float:
        return self.per_k[k][1]

    def to_dict(self) -> dict:
        return {
            "dim_cut": self.dim_cut,
            "users": self.n_evaluated_users,
            "metrics": {str(k): {"recall": r, "ndcg": n} for k, (r, n) in sorted(self.per_k.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_header(self) -> str:
        cols = ["dim_cut", "users"]
        for k in sorted(self.per_k):
            cols += [f"recall@{k}", f"ndcg@{k}"]
        return ",".join(cols)

    def csv_row(self) -> str:
        vals = [str(self.dim_cut), str(self.n_evaluated_users)]
        for k in sorted(self.per_k):
            r, n = self.per_k[k]
            vals += [repr(r), repr(n)]
        return ",".join(vals)


def rank_items(user: int, tables: Tables, dim_cut: int, exclusion=()) -> list[int]:
    """All non-excluded items by descending prefix score, ties by ascending index."""
    if not 1 <= dim_cut <= tables.dim:
        raise ValueError(f"dim_cut {dim_cut} outside 1..{tables.dim}")
    scores = tables.items.data[:, :dim_cut] @ tables.users.data[user, :dim_cut]
    order = np.argsort(-scores, kind="stable")
    excluded = set(int(i) for i in exclusion)
    return [int(i) for i in order if int(i) not in excluded]


def recall_at_k(ranked, test_items, k: int) -> float:
    test_items = set(test_items)
    if not test_items:
        raise EmptyTestSet("recall needs at least one held-out item")
    if k < 1:
        raise ValueError("K must be >= 1")
    hits = sum(1 for item in list(ranked)[:k] if item in test_items)
    return hits / len(test_items)


def ndcg_at_k(ranked, test_items, k: int) -> float:
    test_items = set(test_items)
    if not test_items:
        raise EmptyTestSet("NDCG needs at least one held-out item")
    if k < 1:
        raise ValueError("K must be >= 1")
    dcg = sum(1.0 / math.log2(p + 2) for p, item in enumerate(list(ranked)[:k]) if item in test_items)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(test_items))))
    return dcg / idcg


def _discounts(n: int) -> np.ndarray:
    # math.log2 and left-to-right sums keep results identical to the scalar helpers
    return np.array([1.0 / math.log2(p + 2) for p in range(n)])


def _eval_chunk(users, U, V, dim_cut, exclusion, truth, ks, max_k):
    scores = U[users, :dim_cut] @ V[:, :dim_cut].T
    for row, u in enumerate(users):
        scores[row, exclusion.items_of(u)] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :max_k]
    valid = np.isfinite(np.take_along_axis(scores, order, axis=1))
    hits = truth.contains(np.repeat(users[:, None], order.shape[1], axis=1), order) & valid
    n_true = truth.counts[users]
    discounts = _discounts(max_k)
    dcg = np.cumsum(np.where(hits, discounts, 0.0), axis=1)
    n_hits = np.cumsum(hits, axis=1)
    ideal = np.cumsum(discounts)
    out = {}
    for k in ks:
        kk = min(k, max_k) - 1
        recall = n_hits[:, kk] / n_true
        idcg = ideal[np.minimum(n_true, k) - 1]
        out[k] = (recall.tolist(), (dcg[:, kk] / idcg).tolist())
    return out


def evaluate(
    tables: Tables,
    dataset: InteractionDataset,
    partition: str = "test",
    ks=DEFAULT_KS,
    dim_cut: int | None = None,
    exclude_validation: bool = True,
    threads: int = 1,
) -> MetricReport:
    """Macro-averaged Recall@K / NDCG@K over users with items in ``partition``.

    Ranked lists exclude the user's training positives; when evaluating
    ``test`` with ``exclude_validation`` the validation positives are
    excluded as well.
    """
    if partition not in ("validation", "test"):
        raise ValueError("partition must be 'validation' or 'test'")
    dim_cut = tables.dim if dim_cut is None else int(dim_cut)
    if not 1 <= dim_cut <= tables.dim:
        raise ValueError(f"dim_cut {dim_cut} outside 1..{tables.dim}")
    ks = tuple(sorted(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("Ks must be positive")
    pairs = dataset.partition(partition)
    if len(pairs) == 0:
        raise EmptyTestSet(f"partition {partition!r} is empty")
    exclusion = dataset.positives(include_validation=(partition == "test" and exclude_validation))
    truth = PositiveIndex(pairs, dataset.n_users, dataset.n_items)
    users = np.flatnonzero(truth.counts > 0)
    max_k = min(ks[-1], dataset.n_items)
    U, V = tables.users.data, tables.items.data
    chunks = [users[s : s + _CHUNK] for s in range(0, len(users), _CHUNK)]

    def run(chunk):
        return _eval_chunk(chunk, U, V, dim_cut, exclusion, truth, ks, max_k)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    n = len(users)
    per_k = {}
    for k in ks:
        # fsum is exact before rounding, so the mean ignores chunking and thread count
        r = math.fsum(x for p in parts for x in p[k][0]) / n
        g = math.fsum(x for p in parts for x in p[k][1]) / n
        per_k[k] = (float(r), float(g))
    return MetricReport(per_k, n, dim_cut, partition)


def truncated_sweep(
    tables: Tables, dataset: InteractionDataset, sizes, partition: str = "test", ks=DEFAULT_KS, threads: int = 1
) -> list[MetricReport]:
    """One report per prefix size, ranking with only the first ``n`` dimensions."""
    return [evaluate(tables, dataset, partition, ks, dim_cut=n, threads=threads) for n in sizes]
