"""Seeded synthetic KG with planted relational structure.

Entities are split into ``n_classes`` hidden classes.  Relation ``k`` only
links an entity of class ``c`` to one of class ``(c + k + 1) % n_classes``,
so a neighbour reached through a given relation pins down the class of the
entity at the other end.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .kgcore import KnowledgeGraph, load_triples

SHIPPED_DIR = Path(__file__).parent / "datasets" / "synthetic50"


def generate(n_triples: int = 50, n_entities: int = 12, n_relations: int = 3, n_classes: int = 4,
             valid: int = 8, test: int = 8, seed: int = 0) -> KnowledgeGraph:
    if n_relations >= n_classes:
        raise ValueError("need n_relations < n_classes so every relation has a distinct class offset")
    rng = np.random.default_rng(seed)
    classes = np.arange(n_entities) % n_classes
    members = [np.flatnonzero(classes == c) for c in range(n_classes)]
    triples: list[tuple[str, str, str]] = []
    seen = set()
    while len(triples) < n_triples:
        h = int(rng.integers(n_entities))
        k = int(rng.integers(n_relations))
        t = int(rng.choice(members[(classes[h] + k + 1) % n_classes]))
        if (h, k, t) in seen:
            continue
        seen.add((h, k, t))
        triples.append((f"e{h}", f"r{k}", f"e{t}"))
    n_train = n_triples - valid - test
    train_rows, valid_rows, test_rows = triples[:n_train], triples[n_train:n_train + valid], triples[n_train + valid:]
    # keep the transductive setting: every evaluation entity must occur in train
    in_train = {e for h, _, t in train_rows for e in (h, t)}
    for rows in (valid_rows, test_rows):
        for i, (h, r, t) in enumerate(rows):
            if h not in in_train or t not in in_train:
                train_rows.append(rows[i])
                rows[i] = None
        rows[:] = [row for row in rows if row is not None]
    return KnowledgeGraph.from_labelled(train_rows, valid_rows, test_rows)


def entity_classes(kg: KnowledgeGraph, n_classes: int = 4) -> dict[int, int]:
    """Hidden class of each entity id (recovered from its ``e<i>`` label)."""
    return {kg.node_id(label): int(label[1:]) % n_classes for label in kg.entities}


def load_shipped() -> KnowledgeGraph:
    """The 50-triple KG written by ``generate()`` with default arguments."""
    return load_triples(SHIPPED_DIR / "train.tsv", SHIPPED_DIR / "valid.tsv", SHIPPED_DIR / "test.tsv")
