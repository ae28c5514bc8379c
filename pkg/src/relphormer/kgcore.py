"""Knowledge-graph data model.

Entities and relations share a single contiguous id space: entities occupy
``0 .. n_entities - 1`` and relations ``n_entities .. node_count - 1``.  Two
reserved tokens (MASK and GLOBAL) are appended after the relations so the
model vocabulary is ``node_count + 2``.
"""
from __future__ import annotations

import hashlib
from collections import defaultdict
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

HEAD, RELATION, TAIL = "head", "relation", "tail"
SLOTS = (HEAD, RELATION, TAIL)


class KGError(ValueError):
    pass


class TripleParseError(KGError):
    def __init__(self, path, lineno: int, line: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: expected 3 tab-separated fields, got {line!r}")


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def read_tsv(path) -> list[tuple[str, str, str]]:
    """Read labelled triples from a UTF-8 TSV file.

    Blank lines are skipped; any other line must have exactly three fields.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleParseError(path, lineno, line)
            rows.append((fields[0], fields[1], fields[2]))
    return rows


class KnowledgeGraph:
    """Immutable triple store with incidence and known-true indexes."""

    def __init__(
        self,
        entities: Sequence[str],
        relations: Sequence[str],
        train: Iterable[Triple],
        valid: Iterable[Triple] = (),
        test: Iterable[Triple] = (),
    ):
        self.entities = list(entities)
        self.relations = list(relations)
        self.n_entities = len(self.entities)
        self.n_relations = len(self.relations)
        self.node_count = self.n_entities + self.n_relations
        self.train = [Triple(*map(int, t)) for t in train]
        self.valid = [Triple(*map(int, t)) for t in valid]
        self.test = [Triple(*map(int, t)) for t in test]
        if not self.train:
            raise KGError("training split is empty")
        for split in (self.train, self.valid, self.test):
            for t in split:
                self._check(t)
        self._labels = self.entities + self.relations
        self._ids = {label: i for i, label in enumerate(self.entities)}
        self._ids.update({label: self.n_entities + i for i, label in enumerate(self.relations)})

        incidence: list[list[int]] = [[] for _ in range(self.n_entities)]
        for i, (h, _, t) in enumerate(self.train):
            incidence[h].append(i)
            if t != h:
                incidence[t].append(i)
        self.incidence = [np.asarray(ix, dtype=np.int64) for ix in incidence]
        self.entity_degree = np.array([len(ix) for ix in incidence], dtype=np.int64)
        train_arr = np.asarray(self.train, dtype=np.int64).reshape(-1, 3)
        self.train_array = train_arr
        self.train_degree = self.entity_degree[train_arr[:, 0]] + self.entity_degree[train_arr[:, 2]]

        self.tails_of: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.heads_of: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.relations_of: dict[tuple[int, int], set[int]] = defaultdict(set)
        for split in (self.train, self.valid, self.test):
            for h, r, t in split:
                self.tails_of[(h, r)].add(t)
                self.heads_of[(r, t)].add(h)
                self.relations_of[(h, t)].add(r)
        self.tails_of = dict(self.tails_of)
        self.heads_of = dict(self.heads_of)
        self.relations_of = dict(self.relations_of)

    # -- vocabulary ---------------------------------------------------------
    @property
    def mask_id(self) -> int:
        return self.node_count

    @property
    def global_id(self) -> int:
        return self.node_count + 1

    @property
    def vocab_size(self) -> int:
        return self.node_count + 2

    def is_entity(self, node: int) -> bool:
        return 0 <= node < self.n_entities

    def is_relation(self, node: int) -> bool:
        return self.n_entities <= node < self.node_count

    def label(self, node: int) -> str:
        if node == self.mask_id:
            return "[MASK]"
        if node == self.global_id:
            return "[GLOBAL]"
        return self._labels[node]

    def node_id(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise KeyError(f"unknown node label {label!r}") from None

    def encode(self, head: str, relation: str, tail: str) -> Triple:
        h, r, t = self.node_id(head), self.node_id(relation), self.node_id(tail)
        triple = Triple(h, r, t)
        self._check(triple)
        return triple

    def split(self, name: str) -> list[Triple]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise KGError(f"unknown split {name!r}") from None

    def fingerprint(self) -> str:
        """Hash of the vocabulary; used to detect checkpoint/KG mismatches."""
        h = hashlib.sha256()
        for label in self.entities:
            h.update(b"E" + label.encode() + b"\0")
        for label in self.relations:
            h.update(b"R" + label.encode() + b"\0")
        return h.hexdigest()[:16]

    def _check(self, t: Triple) -> None:
        h, r, o = t
        if not (self.is_entity(h) and self.is_entity(o) and self.is_relation(r)):
            raise KGError(f"triple {tuple(t)} out of range for |E|={self.n_entities}, |R|={self.n_relations}")

    def __repr__(self) -> str:
        return (f"KnowledgeGraph(|E|={self.n_entities}, |R|={self.n_relations}, "
                f"train={len(self.train)}, valid={len(self.valid)}, test={len(self.test)})")

    # -- construction / serialization -------------------------------------
    @classmethod
    def from_labelled(cls, train, valid=(), test=()) -> "KnowledgeGraph":
        """Build from labelled triples; ids follow first appearance across train, valid, test."""
        ents: dict[str, int] = {}
        rels: dict[str, int] = {}
        for split in (train, valid, test):
            for h, r, t in split:
                ents.setdefault(h, len(ents))
                rels.setdefault(r, len(rels))
                ents.setdefault(t, len(ents))
        n = len(ents)

        def enc(split):
            return [Triple(ents[h], n + rels[r], ents[t]) for h, r, t in split]

        return cls(list(ents), list(rels), enc(train), enc(valid), enc(test))

    def write_tsv(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in ("train", "valid", "test"):
            path = directory / f"{name}.tsv"
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for h, r, t in self.split(name):
                    fh.write(f"{self._labels[h]}\t{self._labels[r]}\t{self._labels[t]}\n")
            paths[name] = path
        return paths

    def to_dict(self) -> dict:
        return {
            "entities": self.entities,
            "relations": self.relations,
            "train": [list(t) for t in self.train],
            "valid": [list(t) for t in self.valid],
            "test": [list(t) for t in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeGraph":
        return cls(d["entities"], d["relations"], d["train"], d["valid"], d["test"])

    def stats(self, bins: int = 10) -> dict:
        counts, edges = np.histogram(self.entity_degree, bins=bins)
        return {
            "entities": self.n_entities,
            "relations": self.n_relations,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
            "degree_histogram": {
                "counts": counts.tolist(),
                "edges": [round(float(e), 6) for e in edges],
            },
        }


def load_triples(train_path, valid_path=None, test_path=None) -> KnowledgeGraph:
    """Load a KG from TSV files.  Vocabularies are the union over all splits."""
    train = read_tsv(train_path)
    if not train:
        raise KGError(f"{train_path}: training file is empty")
    valid = read_tsv(valid_path) if valid_path else []
    test = read_tsv(test_path) if test_path else []
    return KnowledgeGraph.from_labelled(train, valid, test)


def umls_paths() -> dict[str, Path]:
    """Paths of the bundled UMLS split files."""
    root = Path(__file__).parent / "datasets" / "umls"
    return {name: root / f"{name}.tsv" for name in ("train", "valid", "test")}


def load_umls() -> KnowledgeGraph:
    p = umls_paths()
    return load_triples(p["train"], p["valid"], p["test"])


def triple_degree(kg: KnowledgeGraph, t: Triple) -> int:
    """Sampling weight of a triple: deg(head) + deg(tail) over train triples."""
    h, _, o = t
    if not (kg.is_entity(h) and kg.is_entity(o)):
        raise KGError(f"triple {tuple(t)} out of range")
    return int(kg.entity_degree[h] + kg.entity_degree[o])


def neighborhood(kg: KnowledgeGraph, center: Triple) -> np.ndarray:
    """Indices of train triples sharing an entity with ``center`` (center excluded)."""
    h, _, o = center
    if not (kg.is_entity(h) and kg.is_entity(o)):
        raise KGError(f"triple {tuple(center)} out of range")
    if h == o:
        idx = kg.incidence[h]
    else:
        idx = np.union1d(kg.incidence[h], kg.incidence[o])
    if idx.size:
        rows = kg.train_array[idx]
        keep = ~((rows[:, 0] == center[0]) & (rows[:, 1] == center[1]) & (rows[:, 2] == center[2]))
        idx = idx[keep]
    return idx


def filtered_candidates(kg: KnowledgeGraph, center: Triple, slot: str) -> set[int]:
    """Known-true completions of ``center`` with ``slot`` hidden, minus the gold answer."""
    h, r, t = center
    if slot == TAIL:
        known, gold = kg.tails_of.get((h, r), set()), t
    elif slot == HEAD:
        known, gold = kg.heads_of.get((r, t), set()), h
    elif slot == RELATION:
        known, gold = kg.relations_of.get((h, t), set()), r
    else:
        raise KGError(f"unknown slot {slot!r}")
    return set(known) - {gold}
