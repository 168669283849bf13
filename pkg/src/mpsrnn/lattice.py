"""Lattice geometries with open boundaries and the snake site ordering.

Sites of an ``L x L`` lattice are visited row by row; even rows run
left to right, odd rows right to left. Every array in the package that is
indexed by site uses this snake index.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

KINDS = ("chain", "square", "triangular")


class Boundary(enum.Enum):
    """Out-of-lattice memory sources seen by the 2D recurrence."""

    ONES = "ones"  # the (-1, 0) boundary, an all-ones memory
    ZERO = "zero"


def snake_index(x: int, y: int, L: int) -> int:
    if not (0 <= x < L and 0 <= y < L):
        raise ValueError(f"coordinates ({x}, {y}) outside a {L}x{L} lattice")
    return y * L + (x if y % 2 == 0 else L - 1 - x)


def snake_coords(i: int, L: int) -> tuple[int, int]:
    """Inverse of :func:`snake_index`."""
    if not 0 <= i < L * L:
        raise ValueError(f"site {i} outside a {L}x{L} lattice")
    y, r = divmod(i, L)
    return (r if y % 2 == 0 else L - 1 - r), y


def predecessors(x: int, y: int, L: int):
    """Horizontal and vertical memory sources of site ``(x, y)``.

    Each entry is either an ``(x, y)`` tuple of an earlier site or a
    :class:`Boundary` tag. The horizontal neighbour is ``(x - 1, y)`` on
    even rows and ``(x + 1, y)`` on odd rows.
    """
    snake_index(x, y, L)
    hx = x - 1 if y % 2 == 0 else x + 1
    if 0 <= hx < L:
        horizontal = (hx, y)
    elif (hx, y) == (-1, 0):
        horizontal = Boundary.ONES
    else:
        horizontal = Boundary.ZERO
    vertical = (x, y - 1) if y > 0 else Boundary.ZERO
    return horizontal, vertical


@dataclass(frozen=True)
class Lattice:
    kind: str
    L: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown lattice kind {self.kind!r}; expected one of {KINDS}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"linear size must be a positive integer, got {self.L}")

    @property
    def V(self) -> int:
        return self.L if self.kind == "chain" else self.L * self.L

    @property
    def is_2d(self) -> bool:
        return self.kind != "chain"

    @cached_property
    def coords(self) -> tuple[tuple[int, int], ...]:
        if self.kind == "chain":
            return tuple((x, 0) for x in range(self.L))
        return tuple(snake_coords(i, self.L) for i in range(self.V))

    def index(self, x: int, y: int) -> int:
        if self.kind == "chain":
            if y != 0 or not 0 <= x < self.L:
                raise ValueError(f"coordinates ({x}, {y}) outside a chain of {self.L}")
            return x
        return snake_index(x, y, self.L)

    @cached_property
    def edges(self) -> tuple[tuple[int, int], ...]:
        L = self.L
        if self.kind == "chain":
            return tuple((i, i + 1) for i in range(L - 1))
        pairs = []
        for y in range(L):
            for x in range(L):
                if x + 1 < L:
                    pairs.append(((x, y), (x + 1, y)))
                if y + 1 < L:
                    pairs.append(((x, y), (x, y + 1)))
                # one fixed diagonal per plaquette
                if self.kind == "triangular" and x + 1 < L and y + 1 < L:
                    pairs.append(((x, y), (x + 1, y + 1)))
        edges = {tuple(sorted((self.index(*a), self.index(*b)))) for a, b in pairs}
        return tuple(sorted(edges))

    @cached_property
    def sublattice(self) -> tuple[int, ...]:
        """Checkerboard parity ``(x + y) % 2`` per site."""
        return tuple((x + y) % 2 for x, y in self.coords)

    @cached_property
    def sources(self) -> tuple[tuple, ...]:
        """Per-site ``(horizontal, vertical)`` sources as snake indices.

        Boundaries stay as :class:`Boundary` tags. Only defined for 2D
        lattices.
        """
        if not self.is_2d:
            raise ValueError("2D memory sources need a square or triangular lattice")
        out = []
        for x, y in self.coords:
            pair = []
            for src in predecessors(x, y, self.L):
                pair.append(src if isinstance(src, Boundary) else self.index(*src))
            out.append(tuple(pair))
        return tuple(out)


def build_lattice(kind: str, L: int) -> Lattice:
    return Lattice(kind, L)
