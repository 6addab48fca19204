"""Logical 2D grid over ranks, ring neighborhoods and chunk partitioning.

Ranks are laid out row-major: ``rank = row * x + col``.  A row is a
horizontal ring of ``x`` ranks, a column is a vertical ring of ``y`` ranks.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

_GRID_RE = re.compile(r"^([1-9][0-9]*)x([1-9][0-9]*)$")


class TopologyError(ValueError):
    pass


class ChunkRange(NamedTuple):
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class GridTopology:
    n_ranks: int
    x: int
    y: int

    def __post_init__(self):
        for name in ("n_ranks", "x", "y"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise TopologyError(f"{name} must be a positive integer, got {value!r}")
        if self.x * self.y != self.n_ranks:
            raise TopologyError(
                f"dimension mismatch: {self.x}x{self.y} != {self.n_ranks} ranks"
            )

    def __str__(self) -> str:
        return f"{self.x}x{self.y}"

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.n_ranks:
            raise TopologyError(f"rank {rank} out of range [0, {self.n_ranks})")

    def coords(self, rank: int) -> Tuple[int, int]:
        self._check_rank(rank)
        return divmod(rank, self.x)

    def rank_at(self, row: int, col: int) -> int:
        if not (0 <= row < self.y and 0 <= col < self.x):
            raise TopologyError(f"coordinates ({row}, {col}) outside {self}")
        return row * self.x + col

    def row_ring(self, rank: int) -> List[int]:
        """Ranks sharing ``rank``'s row, ordered by column."""
        row, _ = self.coords(rank)
        return [row * self.x + c for c in range(self.x)]

    def column_ring(self, rank: int) -> List[int]:
        """Ranks sharing ``rank``'s column, ordered by row."""
        _, col = self.coords(rank)
        return [r * self.x + col for r in range(self.y)]

    def ring(self, rank: int, orientation: str) -> List[int]:
        if orientation == HORIZONTAL:
            return self.row_ring(rank)
        if orientation == VERTICAL:
            return self.column_ring(rank)
        raise TopologyError(f"unknown orientation {orientation!r}")


def grid_from_counts(n_ranks: int, x: int, y: int) -> GridTopology:
    return GridTopology(n_ranks, x, y)


def parse_grid(text: str, n_ranks: int | None = None) -> GridTopology:
    """Parse an ``"XxY"`` grid string such as ``"32x32"``.

    When ``n_ranks`` is given it must equal ``X * Y``.
    """
    m = _GRID_RE.match(text)
    if m is None:
        raise TopologyError(f"malformed grid {text!r}, expected e.g. '32x32'")
    x, y = int(m.group(1)), int(m.group(2))
    return GridTopology(x * y if n_ranks is None else n_ranks, x, y)


def near_square_grid(n_ranks: int) -> GridTopology:
    """Grid with ``x >= y`` as close to square as the factorization allows."""
    if n_ranks < 1:
        raise TopologyError(f"n_ranks must be positive, got {n_ranks}")
    y = max(d for d in range(1, math.isqrt(n_ranks) + 1) if n_ranks % d == 0)
    return GridTopology(n_ranks, n_ranks // y, y)


def factorizations(n_ranks: int) -> List[GridTopology]:
    """Every (x, y) grid for ``n_ranks``, ordered by increasing x."""
    return [GridTopology(n_ranks, x, n_ranks // x)
            for x in range(1, n_ranks + 1) if n_ranks % x == 0]


def coords_of(t: GridTopology, rank: int) -> Tuple[int, int]:
    return t.coords(rank)


def ring_neighbors(t: GridTopology, rank: int, orientation: str) -> Tuple[int, int]:
    """(prev, next) of ``rank`` in its horizontal or vertical ring."""
    ring = t.ring(rank, orientation)
    pos = ring.index(rank)
    return ring[(pos - 1) % len(ring)], ring[(pos + 1) % len(ring)]


def partition_chunks(total_length: int, parts: int) -> List[ChunkRange]:
    """Split ``[0, total_length)`` into ``parts`` contiguous balanced ranges.

    Sizes differ by at most one; the ``total_length % parts`` larger ranges
    come first.
    """
    if parts < 1:
        raise TopologyError(f"parts must be >= 1, got {parts}")
    if total_length < 0:
        raise TopologyError(f"total_length must be >= 0, got {total_length}")
    base, extra = divmod(total_length, parts)
    chunks = []
    offset = 0
    for i in range(parts):
        length = base + (1 if i < extra else 0)
        chunks.append(ChunkRange(offset, length))
        offset += length
    return chunks


def max_chunk(total_length: int, parts: int) -> int:
    return -(-total_length // parts)


# Published cluster grids as (n_ranks, horizontal, vertical).
PRESET_GRIDS: Tuple[GridTopology, ...] = (
    GridTopology(1024, 32, 32),
    GridTopology(2048, 64, 32),
    GridTopology(2176, 64, 34),
    GridTopology(3456, 72, 48),
    GridTopology(4096, 64, 64),
)
