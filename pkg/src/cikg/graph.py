"""Typed graphs over a shared node universe and their normalised adjacency.

Global node layout: users first, then the entity namespace (KG entities
followed by items that have no projected entity), then interest clusters.
A projected item *is* its entity node. Relation ids: 0 = Interact,
1 = HasInterest, then the KG relations in vocabulary order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import InteractionSet, TripleStore
from .errors import MergeError

USER, ENTITY, INTEREST = 0, 1, 2
NAMESPACES = ("user", "entity", "interest")
INTERACT, HAS_INTEREST = 0, 1
KG_REL_OFFSET = 2


@dataclass(frozen=True, eq=False)
class NodeTable:
    namespace: np.ndarray  # (V,) int8
    local: np.ndarray  # (V,) id within namespace
    raw: tuple[str, ...]
    item_node: np.ndarray  # (n_items,) global id of every item
    n_users: int
    n_entities: int  # KG entities, excluding unlinked items
    n_unlinked: int
    n_interests: int
    relations: tuple[str, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.namespace)

    @property
    def user_nodes(self) -> np.ndarray:
        return np.arange(self.n_users)

    @property
    def entity_nodes(self) -> np.ndarray:
        """KG entities only (the corruption pool for TransE)."""
        return np.arange(self.n_users, self.n_users + self.n_entities)

    @property
    def interest_offset(self) -> int:
        return self.n_users + self.n_entities + self.n_unlinked

    @property
    def interest_nodes(self) -> np.ndarray:
        return np.arange(self.interest_offset, self.interest_offset + self.n_interests)

    def item_nodes(self) -> np.ndarray:
        """Distinct node ids carrying at least one item, ascending."""
        return np.unique(self.item_node)

    def interest_node(self, cluster_id: int) -> int:
        return self.interest_offset + cluster_id

    def same_universe(self, other: "NodeTable") -> bool:
        if self is other:
            return True
        return (
            self.raw == other.raw
            and self.relations == other.relations
            and np.array_equal(self.namespace, other.namespace)
            and np.array_equal(self.item_node, other.item_node)
        )


def node_table(ix: InteractionSet, kg: TripleStore | None = None, n_interests: int = 0) -> NodeTable:
    n_u = ix.n_users
    n_e = kg.n_entities if kg is not None else 0
    projection = kg.projection if kg is not None else {}
    unlinked = [i for i in ix.items if i not in projection]
    item_node = np.empty(ix.n_items, dtype=np.int64)
    for i, e in projection.items():
        item_node[i] = n_u + e
    for k, i in enumerate(unlinked):
        item_node[i] = n_u + n_e + k
    raw = (
        tuple(ix.user_map.raw)
        + (tuple(kg.entity_map.raw) if kg is not None else ())
        + tuple(ix.item_map.raw[i] for i in unlinked)
        + tuple(str(c) for c in range(n_interests))
    )
    namespace = np.concatenate([
        np.full(n_u, USER), np.full(n_e + len(unlinked), ENTITY), np.full(n_interests, INTEREST)
    ]).astype(np.int8)
    local = np.concatenate([
        np.arange(n_u), np.arange(n_e), np.asarray(unlinked, dtype=np.int64), np.arange(n_interests)
    ]).astype(np.int64)
    relations = ("Interact", "HasInterest") + (tuple(kg.relation_map.raw) if kg is not None else ())
    return NodeTable(namespace, local, raw, item_node, n_u, n_e, len(unlinked), n_interests, relations)


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    nodes: NodeTable
    edges: np.ndarray  # (M, 3) unique (head gid, relation id, tail gid), sorted

    @classmethod
    def from_edges(cls, nodes: NodeTable, edges) -> "HeteroGraph":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        if len(e):
            if e[:, [0, 2]].min() < 0 or e[:, [0, 2]].max() >= nodes.n_nodes:
                raise MergeError("edge endpoint outside the node table")
            e = np.unique(e, axis=0)
        return cls(nodes, e)

    @property
    def n_nodes(self) -> int:
        return self.nodes.n_nodes

    @property
    def relation_vocab(self) -> tuple[str, ...]:
        return self.nodes.relations

    def relations_used(self) -> set[str]:
        return {self.nodes.relations[r] for r in np.unique(self.edges[:, 1])} if len(self.edges) else set()

    def __len__(self):
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.edges.tolist()))

    def neighbors(self) -> list[list[int]]:
        """Undirected neighbour lists used for propagation."""
        adj = undirected_pairs(self)
        out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for h, t in adj:
            out[h].append(int(t))
        return out

    def dump(self, graph_path, nodes_path):
        with open(graph_path, "w", encoding="utf-8") as fh:
            for h, r, t in self.edges:
                fh.write(f"{h}\t{r}\t{t}\n")
        with open(nodes_path, "w", encoding="utf-8") as fh:
            for gid in range(self.n_nodes):
                fh.write(f"{gid}\t{NAMESPACES[self.nodes.namespace[gid]]}\t{self.nodes.raw[gid]}\n")


def empty_graph(nodes: NodeTable) -> HeteroGraph:
    return HeteroGraph(nodes, np.zeros((0, 3), dtype=np.int64))


def collaborative_graph(train: InteractionSet, nodes: NodeTable | None = None) -> HeteroGraph:
    nodes = node_table(train) if nodes is None else nodes
    if len(train) == 0:
        return empty_graph(nodes)
    e = np.column_stack([train.edges[:, 0], np.full(len(train), INTERACT), nodes.item_node[train.edges[:, 1]]])
    return HeteroGraph.from_edges(nodes, e)


def map_items_to_entities(kg: TripleStore, nodes: NodeTable) -> tuple[np.ndarray, HeteroGraph]:
    """Item -> node map and the KG re-expressed over global node ids."""
    off = nodes.n_users
    e = np.column_stack([kg.triples[:, 0] + off, kg.triples[:, 1] + KG_REL_OFFSET, kg.triples[:, 2] + off])
    return nodes.item_node.copy(), HeteroGraph.from_edges(nodes, e)


def interest_graph(membership, nodes: NodeTable, user_index: dict[str, int]) -> HeteroGraph:
    """Has-Interest edges from ``{raw user: cluster ids}``; unknown users are dropped."""
    rows = [
        (user_index[u], HAS_INTEREST, nodes.interest_node(c))
        for u, cids in membership.items() if u in user_index
        for c in sorted(cids)
    ]
    return HeteroGraph.from_edges(nodes, rows)


def merge_graphs(a: HeteroGraph, b: HeteroGraph) -> HeteroGraph:
    if not a.nodes.same_universe(b.nodes):
        raise MergeError("cannot merge graphs over different node tables")
    return HeteroGraph.from_edges(a.nodes, np.concatenate([a.edges, b.edges]))


def build_cikg(cg: HeteroGraph, ig: HeteroGraph, mapped_kg: HeteroGraph) -> HeteroGraph:
    return merge_graphs(merge_graphs(cg, ig), mapped_kg)


def undirected_pairs(g: HeteroGraph) -> np.ndarray:
    """Distinct (a, b) pairs, both directions, self-loops dropped."""
    if not len(g.edges):
        return np.zeros((0, 2), dtype=np.int64)
    ht = g.edges[:, [0, 2]]
    ht = ht[ht[:, 0] != ht[:, 1]]
    both = np.concatenate([ht, ht[:, ::-1]])
    return np.unique(both, axis=0)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: sp.csr_matrix  # symmetric, entries 1/sqrt(d_h d_t)
    degree: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    def coef(self, h: int, t: int) -> float:
        return float(self.matrix[h, t])


def normalize(g: HeteroGraph) -> NormalizedAdjacency:
    n = g.n_nodes
    pairs = undirected_pairs(g)
    deg = np.bincount(pairs[:, 0], minlength=n).astype(np.float64) if len(pairs) else np.zeros(n)
    if len(pairs):
        vals = 1.0 / np.sqrt(deg[pairs[:, 0]] * deg[pairs[:, 1]])
        mat = sp.csr_matrix((vals, (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    else:
        mat = sp.csr_matrix((n, n))
    mat.sort_indices()
    return NormalizedAdjacency(mat, deg)
