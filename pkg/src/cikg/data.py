"""Loading, filtering, reindexing and splitting of interaction and KG files.

Ratings files are tab separated ``user<TAB>item[<TAB>rating[<TAB>ts]]``; only
the first two columns are used (implicit feedback). KG triples are
``head<TAB>relation<TAB>tail`` and the item/entity projection is
``item<TAB>entity``. Lines starting with ``#`` and blank lines are skipped.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDatasetError, IngestionError, ParseError


@dataclass(frozen=True)
class IdMap:
    """Bidirectional raw-string <-> dense-integer table."""

    raw: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_sequence(cls, raw_ids):
        raw = tuple(raw_ids)
        return cls(raw, {r: i for i, r in enumerate(raw)})

    def __len__(self):
        return len(self.raw)

    def dense(self, raw_id: str) -> int:
        return self.index[raw_id]


@dataclass(frozen=True)
class InteractionSet:
    user_map: IdMap
    item_map: IdMap
    edges: np.ndarray  # (E, 2) int64 of (user, item)

    @property
    def n_users(self) -> int:
        return len(self.user_map)

    @property
    def n_items(self) -> int:
        return len(self.item_map)

    @property
    def users(self) -> range:
        return range(self.n_users)

    @property
    def items(self) -> range:
        return range(self.n_items)

    def __len__(self):
        return len(self.edges)

    def user_items(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.n_users)]
        for u, i in self.edges:
            out[u].add(int(i))
        return out

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_users) if len(self.edges) else np.zeros(self.n_users, dtype=np.int64)

    def with_edges(self, edges) -> "InteractionSet":
        return InteractionSet(self.user_map, self.item_map, np.asarray(edges, dtype=np.int64).reshape(-1, 2))


@dataclass(frozen=True)
class SplitInteractions:
    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet
    split_seed: int

    @property
    def user_map(self) -> IdMap:
        return self.train.user_map

    @property
    def item_map(self) -> IdMap:
        return self.train.item_map


@dataclass(frozen=True)
class TripleStore:
    entity_map: IdMap
    relation_map: IdMap
    triples: np.ndarray  # (T, 3) int64 of (head, relation, tail)
    projection: dict[int, int]  # dense item -> dense entity
    unlinked_items: tuple[int, ...]

    @property
    def n_entities(self) -> int:
        return len(self.entity_map)

    @property
    def n_relations(self) -> int:
        return len(self.relation_map)

    @property
    def n_triples(self) -> int:
        return len(self.triples)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_ratings: int
    density: float
    n_relations: int
    n_entities: int
    n_triples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _records(path, n_fields, exact=False):
    """Yield ``(lineno, fields)`` for every data line of a TSV file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.rstrip("\r\n")
            if not stripped.strip() or stripped.startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) < n_fields or (exact and len(parts) != n_fields):
                raise ParseError(path, lineno, stripped, f"expected {n_fields} tab-separated fields")
            fields = [p.strip() for p in parts[:n_fields]]
            if not all(fields):
                raise ParseError(path, lineno, stripped, "empty field")
            yield lineno, fields


def read_raw_interactions(path) -> list[tuple[str, str]]:
    return [(u, i) for _, (u, i) in _records(path, 2)]


def interactions_from_pairs(pairs, min_user_freq: int = 1) -> InteractionSet:
    """Dedupe, drop users below ``min_user_freq`` and densely reindex.

    Dense IDs follow first appearance order of the retained records.
    """
    unique = list(dict.fromkeys(pairs))
    counts = Counter(u for u, _ in unique)
    kept = [(u, i) for u, i in unique if counts[u] >= min_user_freq]
    if not kept:
        raise EmptyDatasetError("no interactions left after filtering (min_user_freq=%d)" % min_user_freq)
    user_map = IdMap.from_sequence(dict.fromkeys(u for u, _ in kept))
    item_map = IdMap.from_sequence(dict.fromkeys(i for _, i in kept))
    edges = np.array([(user_map.index[u], item_map.index[i]) for u, i in kept], dtype=np.int64)
    return InteractionSet(user_map, item_map, edges)


def load_interactions(path, min_user_freq: int = 5) -> InteractionSet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"ratings file does not exist: {path}")
    return interactions_from_pairs(read_raw_interactions(path), min_user_freq)


def filter_users(ix: InteractionSet, min_user_freq: int) -> InteractionSet:
    pairs = [(ix.user_map.raw[u], ix.item_map.raw[i]) for u, i in ix.edges]
    return interactions_from_pairs(pairs, min_user_freq)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """(train, valid, test) sizes for a user with ``n`` interactions."""
    n_test = _round_half_up(ratios[2] * n)
    n_valid = _round_half_up(ratios[1] * n)
    n_train = n - n_test - n_valid
    while n_train < 1 and n_test > 0:
        n_test -= 1
        n_train += 1
    while n_train < 1 and n_valid > 0:
        n_valid -= 1
        n_train += 1
    return n_train, n_valid, n_test


def split_interactions(ix: InteractionSet, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitInteractions:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_user: list[list[int]] = [[] for _ in range(ix.n_users)]
    for u, i in ix.edges:
        by_user[u].append(int(i))
    parts: tuple[list, list, list] = ([], [], [])
    for u, items in enumerate(by_user):
        if not items:
            continue
        order = rng.permutation(len(items))
        n_train, n_valid, _ = split_sizes(len(items), ratios)
        for rank, k in enumerate(order):
            bucket = 0 if rank < n_train else (1 if rank < n_train + n_valid else 2)
            parts[bucket].append((u, items[k]))
    train, valid, test = (ix.with_edges(sorted(p)) for p in parts)
    return SplitInteractions(train, valid, test, seed)


def load_kg(path_triples, path_projection, ix: InteractionSet, strict: bool = True) -> TripleStore:
    """Read KG triples and the item->entity projection.

    With ``strict`` an unknown item in the projection raises; otherwise such
    rows are dropped (useful when the projection predates user filtering).
    """
    raw_triples = [tuple(f) for _, f in _records(path_triples, 3)]
    raw_proj = [(ln, f[0], f[1]) for ln, f in _records(path_projection, 2)]

    unknown = sorted({item for _, item, _ in raw_proj if item not in ix.item_map.index})
    if unknown and strict:
        shown = ", ".join(unknown[:20]) + (" ..." if len(unknown) > 20 else "")
        raise IngestionError(f"projection references {len(unknown)} unknown item(s): {shown}")

    projection_raw: dict[str, str] = {}
    for ln, item, ent in raw_proj:
        if item not in ix.item_map.index:
            continue
        prev = projection_raw.setdefault(item, ent)
        if prev != ent:
            raise ParseError(path_projection, ln, f"{item}\t{ent}", f"item already projected to {prev!r}")

    entity_order = dict.fromkeys(e for h, _, t in raw_triples for e in (h, t))
    entity_order.update(dict.fromkeys(projection_raw.values()))
    entity_map = IdMap.from_sequence(entity_order)
    relation_map = IdMap.from_sequence(dict.fromkeys(r for _, r, _ in raw_triples))
    triples = np.array(
        sorted(dict.fromkeys((entity_map.index[h], relation_map.index[r], entity_map.index[t]) for h, r, t in raw_triples)),
        dtype=np.int64,
    ).reshape(-1, 3)
    projection = {ix.item_map.index[i]: entity_map.index[e] for i, e in projection_raw.items()}
    unlinked = tuple(i for i in ix.items if i not in projection)
    return TripleStore(entity_map, relation_map, triples, projection, unlinked)


def empty_kg(ix: InteractionSet) -> TripleStore:
    return TripleStore(IdMap.from_sequence(()), IdMap.from_sequence(()), np.zeros((0, 3), dtype=np.int64), {}, tuple(ix.items))


def dataset_stats(ix: InteractionSet, kg: TripleStore) -> DatasetStats:
    n_ratings = len(ix)
    return DatasetStats(
        n_users=ix.n_users,
        n_items=ix.n_items,
        n_ratings=n_ratings,
        density=n_ratings / (ix.n_users * ix.n_items),
        n_relations=kg.n_relations,
        n_entities=kg.n_entities,
        n_triples=kg.n_triples,
    )


def write_interactions(path, ix: InteractionSet):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in ix.edges:
            fh.write(f"{ix.user_map.raw[u]}\t{ix.item_map.raw[i]}\n")


def read_titles(path) -> dict[str, str]:
    """Optional ``item_raw<TAB>title`` file used for prompting."""
    return {item: title for _, (item, title) in _records(path, 2)}
