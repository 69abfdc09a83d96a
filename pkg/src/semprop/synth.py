"""Synthetic hierarchical scenes: Voronoi regions painted by concept colour.

Every concept's colour is its parent's colour plus an offset, so siblings are
separable and the taxonomy is visible in appearance. Regions are Voronoi
cells over a grid of ``block``-pixel tiles; with ``block`` equal to the
output stride each label cell is pure, which keeps stride-8 supervision exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .hierarchy import ConceptHierarchy, HierarchyError, load_hierarchy_file
from .tensorio import load_tensor, save_tensor


@dataclass
class SynthSpec:
    hierarchy: ConceptHierarchy
    dataset: str
    num_images: int = 64
    image_size: int = 32
    regions: int = 4
    block: int = 8
    channels: int = 3
    noise: float = 0.1
    offset_scale: float = 1.0
    offset_decay: float = 0.5
    seed: int = 0
    appearance_seed: int = 0
    coarse_depth: Optional[int] = None
    coarse_dataset: Optional[str] = None


@dataclass
class DatasetManifest:
    name: str
    binding: str
    images: List[np.ndarray]
    labels: List[np.ndarray]
    split: str = "train"
    coarse_labels: Optional[List[np.ndarray]] = None
    coarse_binding: Optional[str] = None

    def __len__(self):
        return len(self.images)

    def coarse(self) -> "DatasetManifest":
        if self.coarse_labels is None:
            raise ValueError("manifest has no coarse variant")
        return DatasetManifest(self.name + "-coarse", self.coarse_binding, self.images,
                               self.coarse_labels, self.split)


def _spread_directions(k: int, dim: int, rng) -> np.ndarray:
    """``k`` well separated unit vectors, randomly rotated."""
    if dim == 1:
        base = np.linspace(-1, 1, k)[:, None] if k > 1 else np.ones((1, 1))
    else:
        i = np.arange(k) + 0.5
        phi = np.arccos(1 - 2 * i / k)
        theta = np.pi * (1 + 5 ** 0.5) * i
        base = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
        if dim > 3:
            base = np.concatenate([base, np.zeros((k, dim - 3))], 1)
        elif dim == 2:
            ang = 2 * np.pi * np.arange(k) / k
            base = np.stack([np.cos(ang), np.sin(ang)], 1)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return base @ q.T


def concept_colours(h: ConceptHierarchy, channels: int = 3, scale: float = 1.0,
                    decay: float = 0.5, seed: int = 0) -> np.ndarray:
    """Mean colour per concept id; children offset from their parent."""
    rng = np.random.default_rng(seed)
    means = np.zeros((len(h), channels))
    order = sorted(range(len(h)), key=lambda c: h.depth[c])
    for c in order:
        kids = h.children[c]
        if not kids:
            continue
        step = scale * decay ** (h.depth[c] - 1)
        dirs = _spread_directions(len(kids), channels, rng)
        for k, d in zip(kids, dirs):
            means[k] = means[c] + step * d
    return means


def _voronoi(grid: int, seeds: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid]
    d = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    return np.argmin(d, axis=0)


def ancestor_at_depth(h: ConceptHierarchy, c: int, depth: int) -> int:
    path = h.ancestors(c) + (c,)
    return path[depth - 1] if len(path) >= depth else c


def gen_synthetic(spec: SynthSpec) -> DatasetManifest:
    h = spec.hierarchy
    binding = h.binding(spec.dataset)
    if spec.image_size % spec.block:
        raise ValueError(f"image_size {spec.image_size} not a multiple of block {spec.block}")
    coarse_binding = None
    if spec.coarse_depth is not None:
        if not 1 <= spec.coarse_depth < h.max_depth:
            raise HierarchyError("too shallow", f"coarse depth {spec.coarse_depth} needs a "
                                 f"hierarchy deeper than {h.max_depth}")
        coarse_binding = h.binding(spec.coarse_dataset)
    means = concept_colours(h, spec.channels, spec.offset_scale, spec.offset_decay,
                            spec.appearance_seed)
    rng = np.random.default_rng(spec.seed)
    grid = spec.image_size // spec.block
    labels_avail = binding.label_ids
    images, labels, coarse = [], [], []
    for _ in range(spec.num_images):
        k = min(spec.regions, grid * grid)
        cells = rng.choice(grid * grid, size=k, replace=False)
        seeds = np.stack([cells // grid, cells % grid], 1)
        region_label = rng.choice(labels_avail, size=k)
        owner = _voronoi(grid, seeds)
        cell_labels = region_label[owner]
        lab = np.kron(cell_labels, np.ones((spec.block, spec.block), dtype=np.int64)).astype(np.int32)
        concept = np.vectorize(binding.label_to_concept.get, otypes=[np.int64])(lab)
        img = means[concept].transpose(2, 0, 1)
        img = img + spec.noise * rng.standard_normal(img.shape)
        images.append(img.astype(np.float32))
        labels.append(lab)
        if coarse_binding is not None:
            to_coarse = coarse_binding.concept_to_label
            cl = np.empty_like(lab)
            for lid, cid in binding.label_to_concept.items():
                anc = ancestor_at_depth(h, cid, spec.coarse_depth)
                if anc not in to_coarse:
                    raise HierarchyError("coarse binding", f"{h.name_of(anc)} is not bound in "
                                         f"{coarse_binding.name}")
                cl[lab == lid] = to_coarse[anc]
            coarse.append(cl)
    return DatasetManifest(spec.dataset, spec.dataset, images, labels,
                           coarse_labels=coarse if coarse_binding is not None else None,
                           coarse_binding=coarse_binding.name if coarse_binding else None)


def write_manifest(manifest: DatasetManifest, directory: str, hierarchy_path: str) -> str:
    """Store images/labels as DSPN files next to a manifest JSON."""
    os.makedirs(directory, exist_ok=True)
    samples = []
    for i, (img, lab) in enumerate(zip(manifest.images, manifest.labels)):
        ip = f"{manifest.name}_{i:05d}_image.dspn"
        lp = f"{manifest.name}_{i:05d}_label.dspn"
        save_tensor(os.path.join(directory, ip), img)
        save_tensor(os.path.join(directory, lp), lab)
        samples.append({"image": ip, "label": lp})
    spec = load_hierarchy_file(hierarchy_path).dataset_specs[manifest.binding]
    labels_file = f"{manifest.name}_labels.json"
    with open(os.path.join(directory, labels_file), "w") as fh:
        json.dump(spec, fh, indent=1)
    doc = {"name": manifest.name, "hierarchy": os.path.abspath(hierarchy_path),
           "labels_file": labels_file, "split": manifest.split, "label_stride": 1,
           "samples": samples}
    path = os.path.join(directory, f"{manifest.name}.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def read_manifest(path: str) -> Tuple[dict, DatasetManifest]:
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    images, labels = [], []
    for s in doc["samples"]:
        img = load_tensor(os.path.join(base, s["image"]))
        lab = load_tensor(os.path.join(base, s["label"]))
        stride = doc.get("label_stride", 1)
        if img.shape[-2] != lab.shape[-2] * stride or img.shape[-1] != lab.shape[-1] * stride:
            raise ValueError(f"{s['image']}: image {img.shape} and label {lab.shape} "
                             f"disagree at stride {stride}")
        images.append(img)
        labels.append(lab)
    with open(os.path.join(base, doc["labels_file"])) as fh:
        binding_spec = json.load(fh)
    doc["binding_spec"] = binding_spec
    m = DatasetManifest(doc["name"], binding_spec["name"], images, labels, doc.get("split", "train"))
    return doc, m
