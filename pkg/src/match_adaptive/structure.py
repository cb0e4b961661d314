"""Overlap graph, connected components and meta-components of a matched design.

Everything here works on the design's scores only. When the design was
built within strata, each stratum is analysed on its own: pairs from
different strata never overlap and boundaries are searched inside the
stratum.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import MatchedDesign, Sample, ValidationError


class StructureError(ValidationError):
    """The design is not optimal (mixed orientation inside a component)."""


@dataclass(frozen=True)
class OverlapGraph:
    n_nodes: int
    edges: frozenset[tuple[int, int]]

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj


@dataclass(frozen=True)
class ConnectedComponent:
    pair_indices: tuple[int, ...]
    interval: tuple[float, float]
    treated_above: bool  # orientation shared by every member pair
    stratum: str | None = None

    @property
    def low(self) -> float:
        return self.interval[0]

    @property
    def high(self) -> float:
        return self.interval[1]

    @property
    def lowest_arm(self) -> int:
        """Treatment of the lowest unit under the observed assignment."""
        return 0 if self.treated_above else 1

    @property
    def highest_arm(self) -> int:
        return 1 if self.treated_above else 0


@dataclass(frozen=True)
class MetaComponent:
    component_indices: tuple[int, ...]  # into the component list, increasing score
    lower_boundary: float = -math.inf
    upper_boundary: float = math.inf
    lower_arm: int | None = None  # treatment of the boundary unit, None when infinite
    upper_arm: int | None = None
    lower_id: str | None = None
    upper_id: str | None = None
    stratum: str | None = None


@dataclass
class DesignStructure:
    graph: OverlapGraph
    components: list[ConnectedComponent]
    metas: list[MetaComponent]
    pair_scores: np.ndarray = field(repr=False)  # (K, 2): treated, control

    def to_json(self) -> str:
        doc = {
            "n_pairs": int(self.graph.n_nodes),
            "n_edges": len(self.graph.edges),
            "components": [
                {
                    "index": r,
                    "size": len(c.pair_indices),
                    "pairs": list(c.pair_indices),
                    "interval": list(c.interval),
                    "orientation": "treated_above" if c.treated_above else "control_above",
                    "stratum": c.stratum,
                }
                for r, c in enumerate(self.components)
            ],
            "meta_components": [
                {
                    "index": i,
                    "components": list(m.component_indices),
                    "lower_boundary": _num(m.lower_boundary),
                    "upper_boundary": _num(m.upper_boundary),
                    "lower_boundary_treatment": m.lower_arm,
                    "upper_boundary_treatment": m.upper_arm,
                    "lower_boundary_id": m.lower_id,
                    "upper_boundary_id": m.upper_id,
                    "stratum": m.stratum,
                }
                for i, m in enumerate(self.metas)
            ],
        }
        return json.dumps(doc, indent=2)


def _num(x: float):
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return x


def _score_map(scores: Mapping[str, float] | Sample) -> Mapping[str, float]:
    if isinstance(scores, Sample):
        return {u.id: u.score for u in scores.units}
    return scores


def pair_score_array(design: MatchedDesign, scores) -> np.ndarray:
    sm = _score_map(scores)
    return np.array([(sm[t], sm[c]) for t, c in design.pairs], dtype=float).reshape(-1, 2)


def _pair_groups(design: MatchedDesign) -> dict[str | None, list[int]]:
    groups: dict[str | None, list[int]] = {}
    for k, (t, _) in enumerate(design.pairs):
        lab = None if design.stratum_of is None else design.stratum_of[t]
        groups.setdefault(lab, []).append(k)
    return groups


def overlap_edges_subroutine(treated: np.ndarray, control: np.ndarray) -> set[tuple[int, int]]:
    """Edges among pairs listed as (treated score, control score), local indices.

    Pairs are scanned by decreasing treated score; each scan stops at the
    first pair whose treated score leaves the current pair's interval.
    """
    K = treated.size
    order = np.argsort(-treated, kind="stable")
    T = treated[order]
    C = control[order]
    edges = set()
    for k in range(K):
        if T[k] > C[k]:
            j = k + 1
            while j < K and T[k] > T[j] > C[k]:
                edges.add(_edge(order[k], order[j]))
                j += 1
        else:
            j = k - 1
            while j >= 0 and T[k] < T[j] < C[k]:
                edges.add(_edge(order[k], order[j]))
                j -= 1
    return edges


def _edge(a, b) -> tuple[int, int]:
    a, b = int(a), int(b)
    return (a, b) if a < b else (b, a)


def overlaps(pair1: tuple[float, float], pair2: tuple[float, float]) -> bool:
    """Overlapping-pair predicate on two pairs given as unordered score tuples."""
    h1, l1 = max(pair1), min(pair1)
    h2, l2 = max(pair2), min(pair2)
    return h1 > h2 > l1 or h2 > h1 > l2


def build_overlap_graph(design: MatchedDesign, scores) -> OverlapGraph:
    ps = pair_score_array(design, scores)
    edges: set[tuple[int, int]] = set()
    for idx in _pair_groups(design).values():
        idx_arr = np.array(idx)
        local = overlap_edges_subroutine(ps[idx_arr, 0], ps[idx_arr, 1])
        edges.update(_edge(idx_arr[a], idx_arr[b]) for a, b in local)
    return OverlapGraph(design.K, frozenset(edges))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if ra < rb:
                ra, rb = rb, ra
            self.parent[ra] = rb


def connected_components(graph: OverlapGraph, design: MatchedDesign, scores) -> list[ConnectedComponent]:
    """Components sorted by increasing interval maximum."""
    ps = pair_score_array(design, scores)
    uf = _UnionFind(graph.n_nodes)
    for a, b in graph.edges:
        uf.union(a, b)
    members: dict[int, list[int]] = {}
    for k in range(graph.n_nodes):
        members.setdefault(uf.find(k), []).append(k)
    comps = []
    for idx in members.values():
        sub = ps[idx]
        above = sub[:, 0] > sub[:, 1]
        if not (above.all() or (~above).all()):
            raise StructureError(
                f"pairs {idx} overlap with mixed orientation; the design is not optimal"
            )
        stratum = None if design.stratum_of is None else design.stratum_of[design.pairs[idx[0]][0]]
        comps.append(
            ConnectedComponent(tuple(idx), (float(sub.min()), float(sub.max())), bool(above[0]), stratum)
        )
    comps.sort(key=lambda c: (c.stratum or "", c.high))
    for a, b in zip(comps, comps[1:]):
        if a.stratum == b.stratum and b.low <= a.high:
            raise StructureError("component intervals intersect; the design is not optimal")
    return comps


def build_meta_components(
    scores, components: list[ConnectedComponent], design: MatchedDesign
) -> list[MetaComponent]:
    """Group consecutive components not separated by an unmatched unit.

    Boundaries are the nearest unmatched units just outside the group (or
    infinite), with their treatments.
    """
    sm = _score_map(scores)
    by_stratum: dict[str | None, list[int]] = {}
    for r, comp in enumerate(components):
        by_stratum.setdefault(comp.stratum, []).append(r)

    unmatched_z = dict(design.unmatched)
    metas: list[MetaComponent] = []
    for lab, comp_idx in by_stratum.items():
        ids = [
            uid
            for uid in list(unmatched_z) + [u for p in design.pairs for u in p]
            if design.stratum_of is None or design.stratum_of[uid] == lab
        ]
        ids.sort(key=lambda u: sm[u])
        vals = np.array([sm[u] for u in ids])
        current: dict | None = None
        for r in sorted(comp_idx, key=lambda r: components[r].high):
            comp = components[r]
            lo_pos = int(np.searchsorted(vals, comp.low, side="left"))
            hi_pos = int(np.searchsorted(vals, comp.high, side="left"))
            below = ids[lo_pos - 1] if lo_pos > 0 else None
            above = ids[hi_pos + 1] if hi_pos + 1 < len(ids) else None
            if below is None or below in unmatched_z:
                if current is not None:
                    metas.append(MetaComponent(**current))
                current = dict(
                    component_indices=[],
                    lower_boundary=-math.inf if below is None else float(sm[below]),
                    lower_arm=None if below is None else int(unmatched_z[below]),
                    lower_id=below,
                    stratum=lab,
                )
            current["component_indices"].append(r)
            if above is None or above in unmatched_z:
                current["upper_boundary"] = math.inf if above is None else float(sm[above])
                current["upper_arm"] = None if above is None else int(unmatched_z[above])
                current["upper_id"] = above
        if current is not None:
            metas.append(MetaComponent(**current))
    return [
        MetaComponent(**{**m.__dict__, "component_indices": tuple(m.component_indices)}) for m in metas
    ]


def analyze(design: MatchedDesign, scores) -> DesignStructure:
    graph = build_overlap_graph(design, scores)
    comps = connected_components(graph, design, scores)
    metas = build_meta_components(scores, comps, design)
    return DesignStructure(graph, comps, metas, pair_score_array(design, scores))
