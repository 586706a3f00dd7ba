"""Visit hyperedges over medical-code nodes, stored as two CSR incidence lists."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .cohort import TRAIN_SPLITS, Cohort
from .errors import EmptyAfterMask, EmptyGraph, EmptyGroup, GraphError


@dataclass(frozen=True, eq=False)
class Hypergraph:
    """Immutable incidence structure.

    ``edge_ptr``/``edge_idx`` list the nodes of every edge (edge-major CSR);
    ``node_ptr``/``node_idx`` list the edges of every *active* node, where
    ``active_nodes`` are the nodes with at least one incident edge.  Nodes
    outside ``active_nodes`` are isolated and skip message passing.
    """

    num_nodes: int
    edge_ptr: np.ndarray
    edge_idx: np.ndarray
    active_nodes: np.ndarray
    node_ptr: np.ndarray
    node_idx: np.ndarray
    edge_visit_ids: tuple[int, ...]
    predict_only: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.edge_ptr) - 1

    @property
    def num_incidences(self) -> int:
        return len(self.edge_idx)

    @property
    def edge_nodes(self) -> list[list[int]]:
        return [self.edge_idx[self.edge_ptr[e]:self.edge_ptr[e + 1]].tolist() for e in range(self.num_edges)]

    @property
    def node_edges(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for k, v in enumerate(self.active_nodes):
            out[v] = self.node_idx[self.node_ptr[k]:self.node_ptr[k + 1]].tolist()
        return out

    @property
    def isolated(self) -> np.ndarray:
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[self.active_nodes] = False
        return mask

    def edge_of(self) -> dict[int, int]:
        """Map visit_id -> edge index."""
        return {vid: e for e, vid in enumerate(self.edge_visit_ids)}

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Sequence[Iterable[int]], visit_ids: Sequence[int],
                   predict_only: Sequence[bool] | None = None, sort: bool = True) -> "Hypergraph":
        edges = [list(dict.fromkeys(int(v) for v in e)) for e in edges]
        if sort:
            edges = [sorted(e) for e in edges]
        if len(edges) != len(visit_ids):
            raise GraphError("one visit id per edge required")
        for e, nodes in enumerate(edges):
            if not nodes:
                raise GraphError(f"edge {e} (visit {visit_ids[e]}) has no nodes")
            if min(nodes) < 0 or max(nodes) >= num_nodes:
                raise GraphError(f"edge {e} references a node outside [0, {num_nodes})")
        lengths = np.array([len(e) for e in edges], dtype=np.int64)
        edge_ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        edge_idx = np.array([v for e in edges for v in e], dtype=np.int64)
        owner = np.repeat(np.arange(len(edges), dtype=np.int64), lengths)
        # stable sort by node keeps each node's edges in ascending edge order
        order = np.argsort(edge_idx, kind="stable")
        node_of = edge_idx[order]
        active, counts = np.unique(node_of, return_counts=True)
        node_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        flags = np.zeros(len(edges), dtype=bool) if predict_only is None else np.asarray(predict_only, dtype=bool)
        return cls(
            num_nodes=int(num_nodes),
            edge_ptr=edge_ptr,
            edge_idx=edge_idx,
            active_nodes=active.astype(np.int64),
            node_ptr=node_ptr,
            node_idx=owner[order],
            edge_visit_ids=tuple(int(v) for v in visit_ids),
            predict_only=flags,
        )

    def shuffled(self, rng: np.random.Generator) -> "Hypergraph":
        """Same incidences with the stored order inside every edge and node list permuted."""
        edge_idx = self.edge_idx.copy()
        for e in range(self.num_edges):
            lo, hi = self.edge_ptr[e], self.edge_ptr[e + 1]
            edge_idx[lo:hi] = rng.permutation(edge_idx[lo:hi])
        node_idx = self.node_idx.copy()
        for k in range(len(self.active_nodes)):
            lo, hi = self.node_ptr[k], self.node_ptr[k + 1]
            node_idx[lo:hi] = rng.permutation(node_idx[lo:hi])
        return Hypergraph(self.num_nodes, self.edge_ptr, edge_idx, self.active_nodes, self.node_ptr,
                          node_idx, self.edge_visit_ids, self.predict_only)


def build_basic_graph(cohort: Cohort) -> Hypergraph:
    """Pretraining graph: one edge per training visit over its basic codes only.

    A visit whose basic view is empty (only extra codes) has no edge here.
    """
    n_basic = cohort.n_basic
    visits = [v for v in cohort.select(splits=TRAIN_SPLITS) if any(c < n_basic for c in v.codes)]
    if not visits:
        raise EmptyGraph("no pretrain_train/finetune_train visits with basic codes")
    edges = [[c for c in v.codes if c < n_basic] for v in visits]
    return Hypergraph.from_edges(n_basic, edges, [v.visit_id for v in visits])


def build_finetune_graph(cohort: Cohort, basic_subset: Iterable[int]) -> Hypergraph:
    """Finetuning graph: extra-group finetune visits (all codes) plus a basic-only subset."""
    basic_subset = set(basic_subset)
    eligible = {v.visit_id for v in cohort.select(splits=("finetune_train",), groups=("basic_only",))}
    stray = basic_subset - eligible
    if stray:
        raise GraphError(f"visits {sorted(stray)[:5]} are not basic_only finetune_train visits")
    extra = cohort.select(splits=("finetune_train",), groups=("extra",))
    if not extra:
        raise EmptyGroup("no extra-group finetune_train visits")
    if not basic_subset:
        raise EmptyGroup("basic subset is empty")
    visits = [v for v in cohort.visits
              if (v.split == "finetune_train" and v.group == "extra") or v.visit_id in basic_subset]
    return Hypergraph.from_edges(cohort.num_codes, [v.codes for v in visits], [v.visit_id for v in visits])


def build_inference_graph(base: Hypergraph, cohort: Cohort, split: str, scenario: str) -> Hypergraph:
    """Append one prediction-only edge per ``split`` visit to ``base``.

    In the ``basic`` scenario the appended edges keep only basic codes; the
    base edges are left as they are.
    """
    if split not in ("validation", "test"):
        raise ValueError(f"inference split must be validation or test, got {split!r}")
    if scenario not in ("basic", "full"):
        raise ValueError(f"unknown scenario {scenario!r}")
    n_basic = cohort.n_basic
    appended, ids = [], []
    for v in cohort.select(splits=(split,)):
        codes = [c for c in v.codes if c < n_basic] if scenario == "basic" else list(v.codes)
        if not codes:
            raise EmptyAfterMask(f"visit {v.visit_id} has no basic codes")
        appended.append(codes)
        ids.append(v.visit_id)
    edges = base.edge_nodes + appended
    flags = list(base.predict_only) + [True] * len(appended)
    return Hypergraph.from_edges(base.num_nodes, edges, list(base.edge_visit_ids) + ids, flags)
