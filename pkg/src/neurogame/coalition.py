"""Tiling an activation map into coalitions, and in-block neighbour pairs."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, NamedTuple

import numpy as np

ACTIVATION_FLOOR = 1e-6

NeighborhoodKind = Literal["plus4", "full8"]
KINDS = ("plus4", "full8")


class GridCoord(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class ConfigurationState:
    """Activations of one coalition, listed in row-major order inside its block."""

    coalition_id: int
    coords: tuple[GridCoord, ...]
    activations: tuple[float, ...]
    block_shape: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.block_shape
        if not (len(self.coords) == len(self.activations) == rows * cols):
            raise ValueError("coords, activations and block shape disagree")
        if min(self.activations) < ACTIVATION_FLOOR:
            raise ValueError(f"activation below floor {ACTIVATION_FLOOR}")

    @property
    def size(self) -> int:
        return len(self.activations)

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.activations, dtype=np.float64)


@dataclass(frozen=True)
class NeighborhoodSystem:
    kind: str
    pairs: tuple[tuple[GridCoord, GridCoord], ...]
    index_pairs: tuple[tuple[int, int], ...]


def partition(
    activation_map: np.ndarray,
    block: tuple[int, int],
    floor: float = ACTIVATION_FLOOR,
) -> list[ConfigurationState]:
    """Split a 2-D map into non-overlapping ``block`` tiles in row-major order.

    Trailing rows/columns that do not fill a whole tile are left out.
    Activations are floored at ``floor`` so that energies stay finite.
    """
    m = np.asarray(activation_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"partition expects a 2-D map, got shape {m.shape}")
    rows, cols = block
    h, w = m.shape
    if rows < 1 or cols < 1:
        raise ValueError("block dimensions must be >= 1")
    if rows > h or cols > w:
        raise ValueError(f"block {block} larger than map {m.shape}")

    states = []
    cid = 0
    for bi in range(h // rows):
        for bj in range(w // cols):
            coords = tuple(
                GridCoord(bi * rows + r, bj * cols + c) for r in range(rows) for c in range(cols)
            )
            acts = tuple(max(float(m[rc]), floor) for rc in coords)
            states.append(ConfigurationState(cid, coords, acts, (rows, cols)))
            cid += 1
    return states


def coalition_count(shape: tuple[int, int], block: tuple[int, int]) -> int:
    return (shape[0] // block[0]) * (shape[1] // block[1])


@lru_cache(maxsize=None)
def block_pairs(block_shape: tuple[int, int], kind: str = "plus4") -> tuple[tuple[int, int], ...]:
    """Unordered in-block neighbour pairs as (member index, member index), p < q."""
    if kind not in KINDS:
        raise ValueError(f"unknown neighborhood kind {kind!r}")
    rows, cols = block_shape
    pairs = []
    for p in range(rows * cols):
        pr, pc = divmod(p, cols)
        for q in range(p + 1, rows * cols):
            qr, qc = divmod(q, cols)
            dr, dc = abs(pr - qr), abs(pc - qc)
            if kind == "plus4":
                adjacent = dr + dc == 1
            else:
                adjacent = max(dr, dc) == 1
            if adjacent:
                pairs.append((p, q))
    return tuple(pairs)


def neighbor_pairs(state: ConfigurationState, kind: str = "plus4") -> NeighborhoodSystem:
    idx = block_pairs(tuple(state.block_shape), kind)
    coords = tuple((state.coords[p], state.coords[q]) for p, q in idx)
    return NeighborhoodSystem(kind, coords, idx)
