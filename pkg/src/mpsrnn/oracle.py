"""Exact references at desk scale.

State vectors use the bit encoding shared with the sampler: site ``i``
sits on bit ``i`` of the index and bit value 1 means spin down.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mpsrnn.ansatz import RnnParams, log_amplitude
from mpsrnn.hamiltonian import Hamiltonian

MAX_ENUMERATION_V = 20
DENSE_V = 12
MAX_ED_V = 24


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def all_configs(V: int) -> np.ndarray:
    """``(2**V, V)`` spin array in index order."""
    idx = np.arange(2**V, dtype=np.int64)
    return ((idx[:, None] >> np.arange(V)) & 1).astype(np.int8)


def config_index(spins) -> np.ndarray:
    spins = np.atleast_2d(np.asarray(spins, dtype=np.int64))
    return spins @ (1 << np.arange(spins.shape[1], dtype=np.int64))


def enumerate_wavefunction(params: RnnParams, lattice) -> np.ndarray:
    """Every amplitude of the model, normalised by construction."""
    if lattice.V > MAX_ENUMERATION_V:
        raise ValueError(f"enumeration limited to V <= {MAX_ENUMERATION_V}")
    logpsi = log_amplitude(params, lattice, all_configs(lattice.V))
    return np.exp(logpsi)


def hamiltonian_matrix(h: Hamiltonian) -> sp.csr_matrix:
    """Sparse ``2**V x 2**V`` matrix in the bit encoding."""
    V = h.V
    if V > MAX_ED_V:
        raise ValueError(f"matrix construction limited to V <= {MAX_ED_V}")
    n = 2**V
    idx = np.arange(n, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(V)) & 1
    z = 1.0 - 2.0 * bits
    diag = np.zeros(n)
    rows, cols, vals = [idx], [idx], []
    for t in h.terms:
        if t.kind == "x_field":
            (i,) = t.sites
            rows.append(idx)
            cols.append(idx ^ (1 << i))
            vals.append(np.full(n, t.coefficient))
            continue
        i, j = t.sites
        if t.kind == "zz_bond":
            diag += t.coefficient * z[:, i] * z[:, j]
            continue
        diag += 0.25 * t.coefficient * z[:, i] * z[:, j]
        anti = bits[:, i] != bits[:, j]
        rows.append(idx[anti])
        cols.append(idx[anti] ^ ((1 << i) | (1 << j)))
        vals.append(np.full(int(anti.sum()), 0.5 * t.coefficient * h.offdiag_sign(t)))
    data = np.concatenate([diag] + vals)
    return sp.csr_matrix((data, (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def energy_expectation(psi, h: Hamiltonian) -> float:
    psi = np.asarray(psi)
    H = hamiltonian_matrix(h)
    return float(np.real(np.vdot(psi, H @ psi)) / np.real(np.vdot(psi, psi)))


def exact_ground_state(h: Hamiltonian, tol: float = 1e-8):
    """Lowest eigenpair ``(E0, psi0)`` with a residual check."""
    H = hamiltonian_matrix(h)
    if h.V <= DENSE_V:
        w, U = np.linalg.eigh(H.toarray())
        e0, psi = float(w[0]), U[:, 0].astype(complex)
    else:
        w, U = spla.eigsh(H, k=1, which="SA", tol=1e-12, maxiter=100000)
        e0, psi = float(w[0]), U[:, 0].astype(complex)
    psi /= np.linalg.norm(psi)
    # fix the global phase on the largest entry
    k = int(np.argmax(np.abs(psi)))
    psi *= np.exp(-1j * np.angle(psi[k]))
    residual = float(np.linalg.norm(H @ psi - e0 * psi))
    if residual > tol:
        raise ConvergenceError(f"ground state residual {residual:.3e} above {tol:.0e}", residual)
    return e0, psi


def cut_entropy(psi, region) -> float:
    """Von Neumann entropy (natural log) of the reduced state on ``region``."""
    psi = np.asarray(psi, dtype=complex)
    V = int(round(np.log2(psi.size)))
    if 2**V != psi.size:
        raise ValueError("state vector length must be a power of two")
    region = sorted({int(r) for r in region})
    if not region or len(region) >= V or region[0] < 0 or region[-1] >= V:
        raise ValueError("region must be a nonempty proper subset of the sites")
    rest = [i for i in range(V) if i not in region]
    # numpy C order puts site V-1 on axis 0
    t = psi.reshape((2,) * V)
    axes = [V - 1 - i for i in region] + [V - 1 - i for i in rest]
    mat = t.transpose(axes).reshape(2 ** len(region), -1)
    s = np.linalg.svd(mat, compute_uv=False)
    p = s**2 / np.sum(s**2)
    p = p[p > 1e-300]
    return float(-np.sum(p * np.log(p)))


def sampler_total_variation(batch, psi) -> float:
    """``0.5 * sum |freq - |psi|^2|`` against the normalised target."""
    psi = np.asarray(psi)
    V = int(round(np.log2(psi.size)))
    if batch.configs.shape[1] != V:
        raise ValueError("batch and state vector disagree on V")
    prob = np.abs(psi) ** 2
    prob /= prob.sum()
    freq = np.bincount(config_index(batch.configs), minlength=psi.size) / len(batch.configs)
    return float(0.5 * np.sum(np.abs(freq - prob)))
