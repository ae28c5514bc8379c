"""Contextual sub-graph sampling and linearization.

A sub-graph is a center triple plus up to ``k`` neighbouring train triples.
It is linearized into a node sequence ``[GLOBAL, head, relation, tail,
context nodes...]`` with a symmetric 0/1 adjacency over local positions.
Relations are ordinary nodes: each triple contributes the edges
head-relation and relation-tail.  The global node is linked to every
position.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .kgcore import HEAD, RELATION, SLOTS, TAIL, KnowledgeGraph, Triple, neighborhood

RANDOM_ENTITY = "random-entity"

# role ids used by the model's role embedding
ROLE_GLOBAL, ROLE_HEAD, ROLE_RELATION, ROLE_TAIL, ROLE_CONTEXT = range(5)
N_ROLES = 5


def weighted_order(weights: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Weighted sampling without replacement (exponential-race keys).

    Returns indices into ``weights`` in draw order.  Equivalent to drawing one
    item at a time with probability proportional to its weight among the
    items not yet drawn.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if size is None or size > n:
        size = n
    if size == 0:
        return np.empty(0, dtype=np.int64)
    keys = rng.exponential(size=n) / weights
    if size == n:
        return np.argsort(keys, kind="stable")
    part = np.argpartition(keys, size - 1)[:size]
    return part[np.argsort(keys[part], kind="stable")]


def sample_center_order(kg: KnowledgeGraph, rng: np.random.Generator, uniform: bool = False) -> np.ndarray:
    """One epoch's order over all train triples, degree-weighted without replacement."""
    if uniform:
        return rng.permutation(len(kg.train))
    return weighted_order(kg.train_degree, rng)


@dataclass(frozen=True)
class ContextSubgraph:
    center: Triple
    context: tuple[Triple, ...]
    global_id: int

    @cached_property
    def _linear(self):
        return linearize(self)

    @property
    def nodes(self) -> np.ndarray:
        return self._linear[0]

    @property
    def adjacency(self) -> np.ndarray:
        return self._linear[1]


def sample_context(
    kg: KnowledgeGraph,
    center: Triple,
    k: int,
    rng: np.random.Generator,
    uniform_context: bool = False,
    exclude_node: int | None = None,
) -> ContextSubgraph:
    """Draw up to ``k`` context triples from the neighbourhood of ``center``.

    Draws are weighted by triple degree (uniform if ``uniform_context``) and
    fresh on every call.  ``exclude_node`` drops candidates containing that
    node before drawing, so a leakage-guarded sample still fills ``k`` slots.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    center = Triple(*center)
    cand = neighborhood(kg, center)
    if exclude_node is not None and cand.size:
        rows = kg.train_array[cand]
        cand = cand[~(rows == exclude_node).any(axis=1)]
    if k == 0 or cand.size == 0:
        return ContextSubgraph(center, (), kg.global_id)
    if uniform_context:
        pick = rng.permutation(cand.size)[:k]
    else:
        pick = weighted_order(kg.train_degree[cand], rng, size=k)
    chosen = kg.train_array[cand[pick]]
    return ContextSubgraph(center, tuple(Triple(*map(int, row)) for row in chosen), kg.global_id)


def linearize(sub: ContextSubgraph) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(nodes, adjacency)`` for a sub-graph.

    Center nodes sit at positions 1..3 even for a self-loop center; context
    nodes follow in first-encounter order, each appearing once.
    """
    h, r, t = sub.center
    nodes = [sub.global_id, h, r, t]
    pos = {h: 1, r: 2}
    pos.setdefault(t, 3)
    edges = [(1, 2), (2, 3)]
    for triple in sub.context:
        ix = []
        for node in triple:
            p = pos.get(node)
            if p is None:
                p = pos[node] = len(nodes)
                nodes.append(node)
            ix.append(p)
        edges.append((ix[0], ix[1]))
        edges.append((ix[1], ix[2]))
    n = len(nodes)
    adj = np.zeros((n, n), dtype=np.float64)
    adj[0, 1:] = 1.0
    adj[1:, 0] = 1.0
    for a, b in edges:
        if a != b:
            adj[a, b] = adj[b, a] = 1.0
    return np.asarray(nodes, dtype=np.int64), adj


def remove_target_context(sub: ContextSubgraph, target: int) -> ContextSubgraph:
    """Drop every context triple that contains ``target``; the center is kept."""
    kept = tuple(t for t in sub.context if target not in t)
    if len(kept) == len(sub.context):
        return sub
    return ContextSubgraph(sub.center, kept, sub.global_id)


@dataclass
class MaskedSample:
    sequence: np.ndarray
    adjacency: np.ndarray
    target: int
    mask_slot: str
    center_key: str
    roles: np.ndarray = field(repr=False)

    @property
    def mask_position(self) -> int:
        return SLOTS.index(self.mask_slot) + 1

    def __len__(self) -> int:
        return int(self.sequence.shape[0])

    def to_json(self) -> dict:
        return {
            "sequence": self.sequence.tolist(),
            "adjacency": self.adjacency.astype(int).tolist(),
            "target": int(self.target),
            "mask_slot": self.mask_slot,
            "center_key": self.center_key,
        }


def center_key(center: Triple, slot: str) -> str:
    h, r, t = center
    return f"{h}-{r}-{t}:{slot}"


def resolve_slot(slot: str, rng: np.random.Generator) -> str:
    if slot == RANDOM_ENTITY:
        return HEAD if rng.random() < 0.5 else TAIL
    if slot not in SLOTS:
        raise ValueError(f"unknown mask slot {slot!r}")
    return slot


def mask_center(sub: ContextSubgraph, slot: str, rng: np.random.Generator, mask_id: int) -> MaskedSample:
    """Mask one center slot, applying the leakage guard first."""
    slot = resolve_slot(slot, rng)
    pos = SLOTS.index(slot) + 1
    target = int(sub.center[pos - 1])
    sub = remove_target_context(sub, target)
    nodes, adj = sub.nodes, sub.adjacency
    seq = nodes.copy()
    seq[pos] = mask_id
    roles = np.full(seq.shape[0], ROLE_CONTEXT, dtype=np.int64)
    roles[:4] = (ROLE_GLOBAL, ROLE_HEAD, ROLE_RELATION, ROLE_TAIL)
    return MaskedSample(seq, adj, target, slot, center_key(sub.center, slot), roles)


def make_sample(
    kg: KnowledgeGraph,
    center: Triple,
    slot: str,
    k: int,
    rng: np.random.Generator,
    uniform_context: bool = False,
) -> MaskedSample:
    """Full Triple2Seq pipeline: pick slot, sample guarded context, linearize, mask."""
    slot = resolve_slot(slot, rng)
    target = center[SLOTS.index(slot)]
    sub = sample_context(kg, center, k, rng, uniform_context=uniform_context, exclude_node=target)
    return mask_center(sub, slot, rng, kg.mask_id)
