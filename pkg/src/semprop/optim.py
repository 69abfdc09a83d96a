"""SGD with momentum, coupled weight decay and the poly learning-rate policy."""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """``base_lr * (1 - it / max_iter) ** power``."""
    return base_lr * (1.0 - it / max_iter) ** power


@dataclass
class OptimState:
    base_lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0001
    power: float = 0.9
    max_iter: int = 1000
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, it: int) -> float:
        return poly_lr(self.base_lr, it, self.max_iter, self.power)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[Tensor, np.ndarray],
             state: OptimState, it: int) -> float:
    """Update ``params`` in place; returns the learning rate used.

    Parameters without a gradient entry (not reached by the loss) are left
    untouched, momentum buffer included.
    """
    if not 0 <= it < state.max_iter:
        raise ValueError(f"iteration {it} outside [0, {state.max_iter})")
    lr = state.lr(it)
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            continue
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"momentum buffer for {name} has shape {v.shape}, "
                             f"parameter has {p.data.shape}")
        v = state.momentum * v + g + state.weight_decay * p.data
        state.buffers[name] = v.astype(p.data.dtype, copy=False)
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)
    return lr
