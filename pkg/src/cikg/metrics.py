"""Top-K ranking, Recall@K / NDCG@K and the sparsity-group breakdown."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionSet, SplitInteractions
from .errors import EmptyDatasetError


@dataclass(frozen=True)
class RankedList:
    user: int
    items: tuple[int, ...]
    k: int


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest finite scores per row; ties by ascending index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def rank_items(Z_hat, user: int, train_items, k: int, item_node=None) -> RankedList:
    """Rank items for ``user`` by inner product; ``item_node`` maps item ids to rows."""
    rows = Z_hat if item_node is None else Z_hat[item_node]
    return rank_from_scores(rows @ Z_hat[user], train_items, k, user)


def rank_from_scores(scores, train_items, k: int, user: int = 0) -> RankedList:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64).copy()
    excl = sorted(set(int(i) for i in train_items))
    scores[excl] = -np.inf
    n_eligible = len(scores) - len(excl)
    return RankedList(user, tuple(int(i) for i in _top_k(scores, min(k, n_eligible))), k)


def recall_at_k(ranked: RankedList, test_items) -> float:
    test = set(test_items)
    return len(test.intersection(ranked.items[: ranked.k])) / len(test)


def idcg(n: int) -> float:
    # summed in position order, like DCG, so a perfect ranking gives exactly 1
    return sum(1.0 / math.log2(p + 2) for p in range(n))


def ndcg_at_k(ranked: RankedList, test_items) -> float:
    test = set(test_items)
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked.items[: ranked.k]) if i in test)
    return dcg / idcg(min(ranked.k, len(test)))


def sparsity_groups(train: InteractionSet, n_groups: int = 4, users=None) -> dict[int, int]:
    """Equal-count buckets of users sorted by train degree (0 = sparsest).

    Remainder users go to the sparser buckets; ties keep ascending user id.
    """
    deg = train.user_degrees()
    users = np.arange(train.n_users) if users is None else np.asarray(sorted(users), dtype=np.int64)
    order = users[np.argsort(deg[users], kind="stable")]
    base, extra = divmod(len(order), n_groups)
    out, start = {}, 0
    for g in range(n_groups):
        size = base + (1 if g < extra else 0)
        for u in order[start:start + size]:
            out[int(u)] = g
        start += size
    return out


@dataclass
class MetricReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    per_user: dict[int, dict[str, float]] = field(repr=False)
    groups: dict[int, dict[str, float]]
    group_bounds: list[tuple[int, int]]
    n_eval_users: int

    def to_json_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "groups": {f"g{g + 1}": {"ndcg50": d["ndcg50"], "n_users": d["n_users"],
                                     "min_train": self.group_bounds[g][0], "max_train": self.group_bounds[g][1]}
                       for g, d in sorted(self.groups.items())},
            "n_eval_users": self.n_eval_users,
        }

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _score_matrix(Z_hat, users, item_node):
    U = Z_hat[users]
    I = Z_hat[item_node] if item_node is not None else Z_hat
    return U @ I.T


def ranked_matrix(Z_hat, users, exclude: list[set[int]], k: int, item_node=None) -> np.ndarray:
    """Top-k item ids per user (rows padded with -1 when fewer are eligible)."""
    scores = _score_matrix(Z_hat, users, item_node)
    for row, u in enumerate(users):
        if exclude[u]:
            scores[row, list(exclude[u])] = -np.inf
    top = _top_k(scores, k)
    valid = np.take_along_axis(scores, top, axis=1) > -np.inf
    return np.where(valid, top, -1)


def _metrics_from_top(top_row, test: set[int], k: int) -> tuple[float, float]:
    hits = [p for p, i in enumerate(top_row[:k]) if i >= 0 and int(i) in test]
    rec = len(hits) / len(test)
    dcg = sum(1.0 / math.log2(p + 2) for p in hits)
    return rec, dcg / idcg(min(k, len(test)))


def evaluate(Z_hat, split: SplitInteractions, ks=(50, 100), item_node=None, target: str = "test",
             exclude_valid: bool = True) -> MetricReport:
    """Full-ranking evaluation over users with non-empty targets.

    Train positives are always excluded from ranking; for ``target="test"``
    validation positives are excluded too.
    """
    train_items = split.train.user_items()
    targets = (split.test if target == "test" else split.valid).user_items()
    exclude = train_items
    if target == "test" and exclude_valid:
        valid_items = split.valid.user_items()
        exclude = [a | b for a, b in zip(train_items, valid_items)]
    users = [u for u in range(split.train.n_users) if targets[u]]
    if not users:
        raise EmptyDatasetError("no users with a non-empty evaluation set")
    ks = sorted(set(int(k) for k in ks) | {50})
    top = ranked_matrix(Z_hat, np.asarray(users), exclude, max(ks), item_node)
    per_user = {}
    for row, u in enumerate(users):
        rec = {}
        for k in ks:
            r, n = _metrics_from_top(top[row], targets[u], k)
            rec[f"recall{k}"], rec[f"ndcg{k}"] = r, n
        per_user[u] = rec
    recall = {k: float(np.mean([per_user[u][f"recall{k}"] for u in users])) for k in ks}
    ndcg = {k: float(np.mean([per_user[u][f"ndcg{k}"] for u in users])) for k in ks}
    groups_of = sparsity_groups(split.train, 4, users)
    deg = split.train.user_degrees()
    groups, bounds = {}, []
    for g in range(4):
        members = [u for u in users if groups_of[u] == g]
        vals = [per_user[u]["ndcg50"] for u in members]
        groups[g] = {"ndcg50": float(np.mean(vals)) if vals else 0.0, "n_users": len(members)}
        bounds.append((int(deg[members].min()), int(deg[members].max())) if members else (0, 0))
    return MetricReport(recall, ndcg, per_user, groups, bounds, len(users))


class ValidationRanker:
    """Precomputed exclusion/target masks for repeated validation Recall@K."""

    def __init__(self, split: SplitInteractions, item_node=None, k: int = 50):
        self.k = k
        self.item_node = item_node
        train, valid = split.train, split.valid
        n_items = train.n_items
        has = np.zeros(train.n_users, dtype=bool)
        has[valid.edges[:, 0]] = True
        self.users = np.flatnonzero(has)
        row = np.full(train.n_users, -1, dtype=np.int64)
        row[self.users] = np.arange(len(self.users))
        self.exclude = np.zeros((len(self.users), n_items), dtype=bool)
        e = train.edges[has[train.edges[:, 0]]]
        self.exclude[row[e[:, 0]], e[:, 1]] = True
        self.target = np.zeros((len(self.users), n_items), dtype=bool)
        v = valid.edges
        self.target[row[v[:, 0]], v[:, 1]] = True
        self.n_target = self.target.sum(axis=1)

    def __call__(self, Z_hat) -> float:
        if len(self.users) == 0:
            return 0.0
        scores = _score_matrix(Z_hat, self.users, self.item_node)
        scores[self.exclude] = -np.inf
        top = _top_k(scores, self.k)
        ok = np.take_along_axis(scores, top, axis=1) > -np.inf
        hits = np.take_along_axis(self.target, top, axis=1) & ok
        return float(np.mean(hits.sum(axis=1) / self.n_target))


def validation_recall(Z_hat, split: SplitInteractions, item_node=None, k: int = 50) -> float:
    return ValidationRanker(split, item_node, k)(Z_hat)
