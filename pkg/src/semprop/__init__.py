"""Concept-hierarchy driven dynamic segmentation networks on numpy."""

import os

from .hierarchy import ConceptHierarchy, HierarchyError, load_hierarchy, load_hierarchy_file
from .kernels import BACKEND
from .model import ModelConfig, NeuronGraph, build_model
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def data_path(name: str) -> str:
    """Path of a bundled file, e.g. ``data_path("concept_tree.json")``."""
    return os.path.join(DATA_DIR, name)


__all__ = [
    "BACKEND", "ConceptHierarchy", "HierarchyError", "ModelConfig", "NeuronGraph", "Tape",
    "Tensor", "backward", "build_model", "data_path", "load_hierarchy", "load_hierarchy_file",
]
