"""Shared feature storage for dense path concatenation.

One backing array is split into depth-indexed channel slots: slot 0 holds the
transition features, slot ``d`` the hidden features of the depth-``d`` neuron
on the path being traversed. A depth-``d`` neuron reads slots ``0..d-1`` as a
single contiguous channel prefix, so no concatenated copy is ever made and
siblings overwrite the same slot. Peak storage is ``depth + 1`` slots; the
naive scheme copies ``d`` feature maps for every neuron, which grows with the
square of the depth along a chain.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class WorkspaceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SlotHandle:
    depth: int
    view: np.ndarray = field(repr=False, compare=False)


class PathWorkspace:
    def __init__(self, m0: int, m: int, max_depth: int, max_batch: int = 1):
        self.m0 = m0
        self.m = m
        self.max_depth = max_depth
        self.max_batch = max_batch
        self.buffer: Optional[np.ndarray] = None
        self.allocations = 0
        self.high_water = 0
        self._allocated = set()
        self._live: List[int] = []

    def slot_range(self, depth: int):
        if depth == 0:
            return 0, self.m0
        lo = self.m0 + self.m * (depth - 1)
        return lo, lo + self.m

    def _ensure(self, n, h, w, dtype):
        shape = (self.max_batch, self.m0 + self.m * self.max_depth, h, w)
        if n > self.max_batch:
            raise WorkspaceError(f"batch {n} exceeds workspace capacity {self.max_batch}")
        if self.buffer is None or self.buffer.shape != shape or self.buffer.dtype != dtype:
            if self._live:
                raise WorkspaceError("cannot resize the workspace while slots are live")
            self.buffer = np.zeros(shape, dtype=dtype)

    @property
    def live(self) -> int:
        return len(self._live)

    def acquire(self, depth: int, shape, dtype=np.float32) -> SlotHandle:
        """Claim the depth slot for features of ``shape`` (n, c, h, w)."""
        if not 0 <= depth <= self.max_depth:
            raise WorkspaceError(f"depth {depth} outside [0, {self.max_depth}]")
        if depth in self._live:
            raise WorkspaceError(f"slot {depth} is already live")
        if depth != len(self._live):
            raise WorkspaceError(f"slot {depth} acquired out of path order "
                                 f"(live slots {self._live})")
        n, c, h, w = shape
        lo, hi = self.slot_range(depth)
        if c != hi - lo:
            raise WorkspaceError(f"slot {depth} holds {hi - lo} channels, got {c}")
        self._ensure(n, h, w, np.dtype(dtype))
        if depth not in self._allocated:
            self._allocated.add(depth)
            self.allocations += 1
        self._live.append(depth)
        self.high_water = max(self.high_water, len(self._live))
        return SlotHandle(depth, self.buffer[:n, lo:hi])

    def release(self, handle: SlotHandle) -> None:
        if handle.depth not in self._live:
            raise WorkspaceError(f"slot {handle.depth} released twice")
        if self._live[-1] != handle.depth:
            raise WorkspaceError(f"slot {handle.depth} released before deeper slot {self._live[-1]}")
        self._live.pop()

    def prefix(self, depth: int, n: int) -> np.ndarray:
        """Contiguous view of slots ``0..depth-1``: the input of a depth-``depth`` neuron."""
        if any(d not in self._live for d in range(depth)):
            raise WorkspaceError(f"prefix for depth {depth} needs slots 0..{depth - 1} live")
        return self.buffer[:n, :self.slot_range(depth - 1)[1]]


class NaiveWorkspace:
    """Instrumentation for the no-reuse scheme: every neuron copies its whole
    input path into a fresh buffer that the tape keeps alive."""

    def __init__(self):
        self.allocations = 0
        self.high_water = 0

    def note_concat(self, depth: int) -> None:
        self.allocations += depth
        self.high_water = self.allocations
