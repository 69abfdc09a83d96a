"""Random hierarchy documents for property tests."""

import numpy as np


def random_tree_doc(rng, n_nodes=12, max_depth=5, force_depth=False, bind="leaves"):
    """Random rooted tree with concept names c0..c{n-1}; c0 is the root.

    ``bind`` is "leaves" (one dataset binding every leaf) or None.
    """
    depth = [1]
    parent = [None]
    if force_depth:
        for d in range(2, max_depth + 1):
            parent.append(len(depth) - 1)
            depth.append(d)
    while len(depth) < n_nodes:
        ok = [i for i, d in enumerate(depth) if d < max_depth]
        p = int(rng.choice(ok))
        parent.append(p)
        depth.append(depth[p] + 1)
    kids = {i: [] for i in range(len(depth))}
    for i, p in enumerate(parent):
        if p is not None:
            kids[p].append(i)
    # give every internal node a second child so there are no single-child chains
    for i in list(kids):
        if len(kids[i]) == 1:
            parent.append(i)
            depth.append(depth[i] + 1)
            kids[i].append(len(depth) - 1)
            kids[len(depth) - 1] = []
    doc = {"concepts": [{"name": f"c{i}", "parent": None if p is None else f"c{p}"}
                        for i, p in enumerate(parent)]}
    if bind == "leaves":
        leaves = [i for i in kids if not kids[i]]
        doc["datasets"] = [{"name": "all", "labels": [
            {"label_id": k, "concept": f"c{c}"} for k, c in enumerate(leaves)]}]
    return doc


def brute_force_ancestors(doc, name):
    par = {c["name"]: c["parent"] for c in doc["concepts"]}
    out = []
    p = par[name]
    while p is not None:
        out.append(p)
        p = par[p]
    return out[::-1]


def strict_ancestor_neurons(doc, present_names):
    """Oracle for dynamic activation: strict ancestors with >= 2 children."""
    counts = {}
    for c in doc["concepts"]:
        if c["parent"] is not None:
            counts[c["parent"]] = counts.get(c["parent"], 0) + 1
    out = set()
    for name in present_names:
        out.update(a for a in brute_force_ancestors(doc, name) if counts.get(a, 0) >= 2)
    return out
