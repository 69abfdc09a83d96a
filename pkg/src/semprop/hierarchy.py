"""Concept taxonomy, ancestor queries and per-dataset label bindings.

Hierarchy documents are JSON::

    {"concepts": [{"name": "entity", "parent": null}, ...],
     "datasets": [{"name": "city", "labels": [{"label_id": 0, "concept": "road"}]}]}

Concept ids are assigned in document order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class HierarchyError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class UnknownConceptError(KeyError):
    pass


@dataclass(frozen=True)
class Concept:
    id: int
    name: str
    parent: Optional[int]


class ConceptHierarchy:
    """Validated rooted tree of concepts.

    Neurons live at concepts with two or more children. A concept with a
    single child hosts no neuron; the chain is skipped when deriving neuron
    ancestry but kept for label routing.
    """

    def __init__(self, concepts: Sequence[Concept], dataset_specs: Sequence[dict] = ()):
        self.concepts: Tuple[Concept, ...] = tuple(concepts)
        self.by_name: Dict[str, int] = {c.name: c.id for c in self.concepts}
        kids: Dict[int, List[int]] = {c.id: [] for c in self.concepts}
        for c in self.concepts:
            if c.parent is not None:
                kids[c.parent].append(c.id)
        self.children: Dict[int, Tuple[int, ...]] = {k: tuple(v) for k, v in kids.items()}
        roots = [c.id for c in self.concepts if c.parent is None]
        self.root = roots[0]
        self.depth: Dict[int, int] = {}
        stack = [(self.root, 1)]
        while stack:
            cid, d = stack.pop()
            self.depth[cid] = d
            stack.extend((k, d + 1) for k in self.children[cid])
        self._ancestors: Dict[int, Tuple[int, ...]] = {}
        for c in self.concepts:
            path = []
            p = c.parent
            while p is not None:
                path.append(p)
                p = self.concepts[p].parent
            self._ancestors[c.id] = tuple(reversed(path))
        self.neurons: FrozenSet[int] = frozenset(
            cid for cid, ks in self.children.items() if len(ks) >= 2)
        self.single_child_chains: Tuple[str, ...] = tuple(
            self.concepts[cid].name for cid, ks in sorted(self.children.items()) if len(ks) == 1)
        self.dataset_specs: Dict[str, dict] = {d["name"]: d for d in dataset_specs}

    def __len__(self):
        return len(self.concepts)

    @property
    def max_depth(self) -> int:
        return max(self.depth.values())

    def id_of(self, name: str) -> int:
        try:
            return self.by_name[name]
        except KeyError:
            raise UnknownConceptError(name) from None

    def name_of(self, cid: int) -> str:
        self._check(cid)
        return self.concepts[cid].name

    def _check(self, cid: int):
        if not isinstance(cid, (int, np.integer)) or not 0 <= cid < len(self.concepts):
            raise UnknownConceptError(cid)

    def parent(self, cid: int) -> Optional[int]:
        self._check(cid)
        return self.concepts[cid].parent

    def ancestors(self, cid: int) -> Tuple[int, ...]:
        """Strict ancestors, root first."""
        self._check(cid)
        return self._ancestors[cid]

    def is_descendant(self, cid: int, of: int) -> bool:
        """True if ``cid`` equals ``of`` or lies below it."""
        return cid == of or of in self.ancestors(cid)

    def ancestor_closure(self, targets: Iterable[int]) -> FrozenSet[int]:
        out = set()
        for t in targets:
            out.update(self.ancestors(t))
        return frozenset(out)

    def leaves(self) -> List[int]:
        return [cid for cid, ks in self.children.items() if not ks]

    def path_child(self, node: int, target: int) -> Optional[int]:
        """Child of ``node`` on the path down to ``target``; None if not below."""
        path = self.ancestors(target) + (target,)
        try:
            i = path.index(node)
        except ValueError:
            return None
        return path[i + 1] if i + 1 < len(path) else None

    def neuron_ancestors(self, cid: int) -> Tuple[int, ...]:
        """Ancestors that host neurons, root first."""
        return tuple(a for a in self.ancestors(cid) if a in self.neurons)

    def neuron_depth(self, cid: int) -> int:
        """Depth counted over neuron-hosting concepts only (root neuron = 1)."""
        return len(self.neuron_ancestors(cid)) + 1

    def neuron_order(self) -> List[int]:
        """All neurons sorted by (neuron depth, id)."""
        return sorted(self.neurons, key=lambda n: (self.neuron_depth(n), n))

    def to_document(self) -> dict:
        return {
            "concepts": [{"name": c.name,
                          "parent": None if c.parent is None else self.concepts[c.parent].name}
                         for c in self.concepts],
            "datasets": list(self.dataset_specs.values()),
        }

    def binding(self, dataset: str) -> "DatasetBinding":
        try:
            spec = self.dataset_specs[dataset]
        except KeyError:
            raise HierarchyError("unknown dataset", dataset) from None
        return bind_dataset(self, spec)


def neuron_concepts(h: ConceptHierarchy) -> FrozenSet[int]:
    return h.neurons


def load_hierarchy(document: Mapping, max_depth: Optional[int] = None) -> ConceptHierarchy:
    """Validate a hierarchy document and build the tree."""
    entries = document.get("concepts")
    if not isinstance(entries, list) or not entries:
        raise HierarchyError("schema", "'concepts' must be a non-empty list")
    names: Dict[str, int] = {}
    for i, e in enumerate(entries):
        if not isinstance(e, Mapping) or not isinstance(e.get("name"), str):
            raise HierarchyError("schema", f"concept #{i} needs a string 'name'")
        if e["name"] in names:
            raise HierarchyError("duplicate name", e["name"])
        names[e["name"]] = i
    parents: List[Optional[int]] = []
    for e in entries:
        p = e.get("parent")
        if p is None:
            parents.append(None)
        elif not isinstance(p, str):
            raise HierarchyError("schema", f"{e['name']}: parent must be one concept name "
                                 f"(multiple ancestors are not supported)")
        elif p not in names:
            raise HierarchyError("dangling parent", f"{e['name']} -> {p}")
        else:
            parents.append(names[p])
    for start in range(len(entries)):
        seen = set()
        node = start
        while node is not None:
            if node in seen:
                raise HierarchyError("cycle", f"parent loop through {entries[node]['name']}")
            seen.add(node)
            node = parents[node]
    roots = [entries[i]["name"] for i, p in enumerate(parents) if p is None]
    if len(roots) != 1:
        raise HierarchyError("multiple roots" if roots else "no root", ", ".join(roots))
    h = ConceptHierarchy([Concept(i, e["name"], parents[i]) for i, e in enumerate(entries)],
                         document.get("datasets", []))
    if max_depth is not None and h.max_depth > max_depth:
        raise HierarchyError("too deep", f"depth {h.max_depth} exceeds {max_depth}")
    for spec in h.dataset_specs.values():
        bind_dataset(h, spec)
    return h


def load_hierarchy_file(path, max_depth: Optional[int] = None) -> ConceptHierarchy:
    with open(path) as fh:
        return load_hierarchy(json.load(fh), max_depth)


def save_hierarchy(h: ConceptHierarchy, path) -> None:
    with open(path, "w") as fh:
        json.dump(h.to_document(), fh, indent=1)


@dataclass(frozen=True)
class DatasetBinding:
    """Dataset label ids mapped onto concepts, plus per-neuron child masks."""

    name: str
    label_to_concept: Dict[int, int]
    defined: FrozenSet[int]
    child_mask: Dict[int, np.ndarray] = field(repr=False)

    @property
    def concept_to_label(self) -> Dict[int, int]:
        return {c: l for l, c in self.label_to_concept.items()}

    @property
    def label_ids(self) -> List[int]:
        return sorted(self.label_to_concept)

    def relevant_neurons(self) -> FrozenSet[int]:
        """Neurons with at least one enabled child."""
        return frozenset(n for n, m in self.child_mask.items() if m.any())


def bind_dataset(h: ConceptHierarchy, spec: Mapping) -> DatasetBinding:
    label_to_concept: Dict[int, int] = {}
    for entry in spec.get("labels", []):
        lid = int(entry["label_id"])
        if lid in label_to_concept:
            raise HierarchyError("duplicate label id", f"{spec.get('name')}: {lid}")
        cid = h.id_of(entry["concept"])
        if cid in label_to_concept.values():
            raise HierarchyError("duplicate concept binding", f"{spec.get('name')}: {entry['concept']}")
        label_to_concept[lid] = cid
    defined = frozenset(label_to_concept.values())
    on_path = set(defined)
    for d in defined:
        on_path.update(h.ancestors(d))
    masks = {n: np.array([k in on_path for k in h.children[n]], dtype=bool) for n in h.neurons}
    return DatasetBinding(spec.get("name", ""), label_to_concept, defined, masks)
