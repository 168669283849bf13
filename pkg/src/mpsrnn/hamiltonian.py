"""Spin Hamiltonians, the Marshall sign rule and local energies.

Spin operators are half the Pauli matrices. A Heisenberg bond then
contributes ``z_i z_j / 4`` on the diagonal (``z = +1`` for up) and
``1/2`` between configurations that differ by swapping an antiparallel
pair. With the Marshall rule the off-diagonal element becomes ``-1/2``
on bonds joining the two checkerboard sublattices, ``(x + y) % 2``.
The transverse-field Ising model is ``-sum ZZ - g sum X`` in Pauli units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mpsrnn.ansatz import RnnParams, log_amplitude
from mpsrnn.lattice import Lattice

TERM_KINDS = ("heisenberg_bond", "zz_bond", "x_field")

# |psi(s)| below this fraction of the batch maximum flags the sample
FLAG_RATIO = 1e-30


@dataclass(frozen=True)
class Term:
    kind: str
    sites: tuple[int, ...]
    coefficient: float = 1.0

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        want = 1 if self.kind == "x_field" else 2
        if len(self.sites) != want or len(set(self.sites)) != want:
            raise ValueError(f"{self.kind} needs {want} distinct site(s), got {self.sites}")


@dataclass(frozen=True)
class Hamiltonian:
    terms: tuple[Term, ...]
    V: int
    marshall: bool = False
    sublattice: tuple[int, ...] | None = None

    def __post_init__(self):
        for t in self.terms:
            if any(not 0 <= s < self.V for s in t.sites):
                raise ValueError(f"term {t} references a site outside 0..{self.V - 1}")
        if self.marshall and self.sublattice is None:
            raise ValueError("the Marshall rule needs a sublattice labelling")

    def offdiag_sign(self, term: Term) -> float:
        """Sign of a Heisenberg off-diagonal element after the Marshall rule."""
        if self.marshall and term.kind == "heisenberg_bond":
            i, j = term.sites
            if self.sublattice[i] != self.sublattice[j]:
                return -1.0
        return 1.0


def build_afhm(lattice: Lattice, marshall: bool = False) -> Hamiltonian:
    """Antiferromagnetic Heisenberg model, one unit bond per edge."""
    terms = tuple(Term("heisenberg_bond", e, 1.0) for e in lattice.edges)
    return Hamiltonian(terms, lattice.V, marshall, lattice.sublattice)


def build_tfim(lattice: Lattice, g: float) -> Hamiltonian:
    """``-sum_edges Z_i Z_j - g sum_sites X_i``."""
    terms = [Term("zz_bond", e, -1.0) for e in lattice.edges]
    terms += [Term("x_field", (i,), -float(g)) for i in range(lattice.V)]
    return Hamiltonian(tuple(terms), lattice.V, False, lattice.sublattice)


def diagonal(h: Hamiltonian, spins) -> np.ndarray:
    """Diagonal matrix elements for a batch ``(B, V)``."""
    z = 1.0 - 2.0 * np.atleast_2d(np.asarray(spins, dtype=float))
    out = np.zeros(len(z))
    for t in h.terms:
        if t.kind == "x_field":
            continue
        i, j = t.sites
        scale = 0.25 if t.kind == "heisenberg_bond" else 1.0
        out += scale * t.coefficient * z[:, i] * z[:, j]
    return out


def connected_elements(h: Hamiltonian, spins) -> list[tuple[np.ndarray, complex]]:
    """Nonzero ``<s|H|s'>`` for one configuration; the diagonal comes first."""
    s = np.asarray(spins, dtype=np.int8)
    if s.shape != (h.V,) or not np.all((s == 0) | (s == 1)):
        raise ValueError("configuration must hold V spins in {0, 1}")
    out = [(s.copy(), complex(diagonal(h, s)[0]))]
    for t in h.terms:
        if t.kind == "zz_bond":
            continue
        if t.kind == "heisenberg_bond":
            i, j = t.sites
            if s[i] == s[j]:
                continue
            amp = 0.5 * t.coefficient * h.offdiag_sign(t)
        else:
            amp = t.coefficient
        if amp == 0:
            continue
        flipped = s.copy()
        flipped[list(t.sites)] ^= 1
        out.append((flipped, complex(amp)))
    return out


@dataclass(frozen=True)
class FlipGroup:
    """Off-diagonal terms grouped by the first site they touch."""

    start: int
    masks: np.ndarray  # (n, V) int8, sites flipped by each term
    amps: np.ndarray  # (n,) matrix element when the term applies
    pair: np.ndarray  # (n,) bool, term needs an antiparallel pair
    sites: np.ndarray  # (n, 2) pair sites (repeated for single flips)


def flip_groups(h: Hamiltonian) -> tuple[FlipGroup, ...]:
    """Off-diagonal structure in the form used by the batched estimator."""
    by_start = {}
    for t in h.terms:
        if t.kind == "zz_bond":
            continue
        if t.kind == "heisenberg_bond":
            amp = 0.5 * t.coefficient * h.offdiag_sign(t)
        else:
            amp = t.coefficient
        if amp == 0:
            continue
        by_start.setdefault(min(t.sites), []).append((t, amp))
    groups = []
    for start in sorted(by_start):
        items = by_start[start]
        masks = np.zeros((len(items), h.V), dtype=np.int8)
        for k, (t, _) in enumerate(items):
            masks[k, list(t.sites)] = 1
        groups.append(
            FlipGroup(
                start,
                masks,
                np.array([a for _, a in items]),
                np.array([t.kind == "heisenberg_bond" for t, _ in items]),
                np.array([(t.sites * 2)[:2] for t, _ in items]),
            )
        )
    return tuple(groups)


def local_energies(params: RnnParams, lattice: Lattice, h: Hamiltonian, spins):
    """``E_loc`` for a batch and a mask of flagged (near-zero ``psi``) rows.

    Straightforward reference path: every connected configuration is
    evaluated from scratch.
    """
    spins = np.atleast_2d(np.asarray(spins, dtype=np.int8))
    B = len(spins)
    logpsi = log_amplitude(params, lattice, spins)
    rows, cols, amps, flipped = [], [], [], []
    for b, s in enumerate(spins):
        for s2, amp in connected_elements(h, s)[1:]:
            rows.append(b)
            amps.append(amp)
            flipped.append(s2)
    eloc = diagonal(h, spins).astype(complex)
    if flipped:
        lp2 = log_amplitude(params, lattice, np.array(flipped))
        rows = np.array(rows)
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.exp(lp2 - logpsi[rows])
        np.add.at(eloc, rows, np.array(amps) * ratio)
    top = np.max(logpsi.real)
    flagged = logpsi.real < top + np.log(FLAG_RATIO)
    return eloc, flagged


def local_energy(params: RnnParams, lattice: Lattice, h: Hamiltonian, spins) -> complex:
    """``E_loc`` of one configuration; rejects ``psi(s) = 0``."""
    eloc, _ = local_energies(params, lattice, h, np.asarray(spins)[None])
    if not np.isfinite(eloc[0]):
        raise ZeroDivisionError("local energy undefined where psi vanishes")
    return complex(eloc[0])
