"""Spin correlations, per-term memory contributions and error reporting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mpsrnn.ansatz import RnnParams, evaluate_batch
from mpsrnn.lattice import Boundary, Lattice

TERM_NAMES = ("tensor", "matrix_x", "matrix_y", "vector")


def _configs(batch):
    return np.asarray(getattr(batch, "configs", batch))


def connected_correlations(batch, ref_site: int):
    """``C(i) = <z_ref z_i> - <z_ref><z_i>`` with ``z = +-1`` and standard errors.

    The error of each entry is the standard error of the sample mean of
    ``(z_ref - <z_ref>)(z_i - <z_i>)``.
    """
    configs = _configs(batch)
    n, V = configs.shape
    if n == 0:
        raise ValueError("empty batch")
    if not 0 <= ref_site < V:
        raise ValueError(f"reference site {ref_site} outside 0..{V - 1}")
    z = 1.0 - 2.0 * configs
    dz = z - z.mean(axis=0)
    prod = dz[:, [ref_site]] * dz
    corr = prod.mean(axis=0)
    err = prod.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(V, np.inf)
    return corr, err


@dataclass
class TermContribution:
    """Per-site shares of the four update terms (rows sum to one)."""

    shares: np.ndarray  # (V, 4) in TERM_NAMES order
    flagged: np.ndarray  # (V,) bool, every term vanished at that site

    def __getitem__(self, name):
        return self.shares[:, TERM_NAMES.index(name)]


def _term_vectors(params: RnnParams, site: dict, hx, hy, spins):
    """The four unnormalised update terms for the realised spins, ``(B, chi)`` each."""
    B = len(spins)
    chi = params.chi
    zero = np.zeros((B, chi), dtype=complex)

    def pick(stack):  # (2, ...) -> per-sample realised spin
        return stack[spins]

    tensor = zero
    if hx is not None and hy is not None:
        if "T" in site:
            tensor = np.einsum("bstu,bt,bu->bs", pick(site["T"]), hx, hy)
        elif "K" in site:
            a = np.einsum("btk,bt->bk", pick(site["Ux"]), hx)
            b = np.einsum("buk,bu->bk", pick(site["Uy"]), hy)
            core = np.einsum("bkmn,bm,bn->bk", pick(site["K"]), a, b)
            tensor = np.einsum("bsk,bk->bs", pick(site["Uo"]), core)
    mx = zero if hx is None else np.einsum("bst,bt->bs", pick(site["Mx"]), hx)
    my = zero if hy is None else np.einsum("bst,bt->bs", pick(site["My"]), hy)
    vec = pick(site["v"])
    return tensor, mx, my, vec


def term_contributions(params: RnnParams, lattice: Lattice, batch) -> TermContribution:
    """Batch-averaged eta-weighted norms of the tensor, Mx, My and v terms.

    Each norm is ``sqrt(sum_s eta_s |a_s|^2)`` of the term evaluated with
    the normalised predecessor memories along the sample; averages are
    normalised per site.
    """
    if params.variant not in ("twod", "tensor", "compressed"):
        raise ValueError("term contributions need a 2D variant")
    configs = _configs(batch)
    out = evaluate_batch(params, lattice, configs)
    mems = [np.asarray(m) for m in out.memories]
    spins = np.asarray(configs, dtype=int)
    B = len(spins)
    t = params.to_numpy().tensors
    eta = np.exp(t["log_eta"])
    mags = np.zeros((lattice.V, 4))
    for i, (sx, sy) in enumerate(lattice.sources):

        def memory(src):
            if src is Boundary.ZERO:
                return None
            if src is Boundary.ONES:
                return np.ones((B, params.chi), dtype=complex)
            return mems[src]

        site = {k: a[i] for k, a in t.items()}
        terms = _term_vectors(params, site, memory(sx), memory(sy), spins[:, i])
        for k, a in enumerate(terms):
            mags[i, k] = np.mean(np.sqrt(np.abs(a) ** 2 @ eta[i]))
    total = mags.sum(axis=1, keepdims=True)
    flagged = total[:, 0] == 0
    shares = np.where(total > 0, mags / np.where(total > 0, total, 1.0), 0.0)
    return TermContribution(shares, flagged)


def relative_error(energy: float, reference: float) -> float:
    if reference == 0:
        raise ZeroDivisionError("relative error against a zero reference")
    return abs(energy - reference) / abs(reference)


def write_site_csv(path, columns: dict) -> None:
    """Site-indexed CSV with one column per entry of ``columns``."""
    names = list(columns)
    data = [np.asarray(columns[n]) for n in names]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["site"] + names) + "\n")
        for i in range(len(data[0])):
            fh.write(",".join([str(i)] + [repr(float(d[i])) for d in data]) + "\n")
