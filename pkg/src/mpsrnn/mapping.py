"""Exact maps between MPS and the recurrent ansatz family.

Covers the MPS container, the MPS to vanilla map, gauge and bias
absorption, the hierarchy lifts (1D to 2D to tensor to compressed), the
block construction that runs a linear 2D recurrence as a 1D one, Tucker
compression of the trilinear tensors, the area-law parameter set and a
plain SVD factorisation of state vectors into an MPS.

Everything here works on numpy arrays; the resulting :class:`RnnParams`
are consumed by the jitted forward pass unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mpsrnn.ansatz import RnnParams, compressed_rank
from mpsrnn.lattice import Lattice

# eigenvalue floor before taking logs for eta
ETA_FLOOR = 1e-30
LOG_ETA_FLOOR = math.log(ETA_FLOOR)


# ---------------------------------------------------------------------------
# MPS container


@dataclass
class Mps:
    """Per-site matrices ``sites[i][s]`` of shape ``(chi_{i+1}, chi_i)``.

    The state is ``psi(s) = 1^T M_{V-1}[s_{V-1}] ... M_0[s_0] 1`` with
    all-ones boundary vectors at both ends.
    """

    sites: list
    discarded: list = field(default_factory=list)

    def __post_init__(self):
        self.sites = [np.asarray(m, dtype=complex) for m in self.sites]
        if not self.sites:
            raise ValueError("an MPS needs at least one site")
        for i, m in enumerate(self.sites):
            if m.ndim != 3 or m.shape[0] != 2:
                raise ValueError(f"site {i}: expected shape (2, chi_out, chi_in), got {m.shape}")
            if i and m.shape[2] != self.sites[i - 1].shape[1]:
                raise ValueError(
                    f"bond {i}: site {i - 1} emits {self.sites[i - 1].shape[1]}, "
                    f"site {i} expects {m.shape[2]}"
                )

    @property
    def V(self) -> int:
        return len(self.sites)

    @property
    def bond_dims(self) -> list[int]:
        return [self.sites[0].shape[2]] + [m.shape[1] for m in self.sites]

    def statevector(self) -> np.ndarray:
        """All ``2**V`` amplitudes, site ``i`` on bit ``i`` of the index."""
        if self.V > 24:
            raise ValueError("statevector limited to V <= 24")
        # rows: configurations of the sites seen so far (site j on bit j)
        h = np.ones((1, self.sites[0].shape[2]), dtype=complex)
        for m in self.sites:
            up = h @ m[0].T
            down = h @ m[1].T
            h = np.concatenate([up, down], axis=0)
        return h.sum(axis=1)


def contract_mps(mps: Mps, spins) -> complex:
    """Amplitude of one configuration."""
    spins = np.asarray(spins)
    if spins.shape != (mps.V,):
        raise ValueError(f"configuration has {spins.shape} entries, MPS has {mps.V} sites")
    h = np.ones(mps.sites[0].shape[2], dtype=complex)
    for m, s in zip(mps.sites, spins):
        h = m[int(s)] @ h
    return complex(h.sum())


def random_mps(V: int, chi: int, seed=0, boundary_chi: int | None = None) -> Mps:
    """Gaussian MPS with uniform bond dimension (boundary bonds optional)."""
    rng = np.random.default_rng(seed)
    dims = [chi] * (V + 1)
    if boundary_chi is not None:
        dims[0] = dims[-1] = boundary_chi
    sites = [
        (rng.standard_normal((2, dims[i + 1], dims[i])) + 1j * rng.standard_normal((2, dims[i + 1], dims[i])))
        / math.sqrt(2 * dims[i])
        for i in range(V)
    ]
    return Mps(sites)


def gamma_from_mps(mps: Mps) -> list[np.ndarray]:
    """Environment matrices ``gamma[i]`` of shape ``(chi_{i+1}, chi_{i+1})``.

    ``gamma[V-1]`` is the all-ones matrix and
    ``gamma[i-1] = sum_s M_i[s]^dagger gamma[i] M_i[s]``.
    """
    V = mps.V
    gam = [None] * V
    g = np.ones((mps.sites[-1].shape[1],) * 2, dtype=complex)
    gam[V - 1] = g
    for i in range(V - 1, 0, -1):
        m = mps.sites[i]
        g = sum(m[s].conj().T @ g @ m[s] for s in (0, 1))
        g = 0.5 * (g + g.conj().T)
        gam[i - 1] = g
    return gam


def pad_mps(mps: Mps, chi: int | None = None) -> Mps:
    """Zero-pad every matrix to a uniform ``chi x chi``."""
    target = chi or max(mps.bond_dims)
    if target < max(mps.bond_dims):
        raise ValueError(f"cannot pad to {target} below the largest bond {max(mps.bond_dims)}")
    sites = []
    for m in mps.sites:
        p = np.zeros((2, target, target), dtype=complex)
        p[:, : m.shape[1], : m.shape[2]] = m
        sites.append(p)
    return Mps(sites)


def mps_to_vanilla(mps: Mps, pad: bool = False) -> RnnParams:
    """Vanilla parameters whose state is ``psi_MPS / ||psi_MPS||``.

    With a zero-padded first site the all-ones start vector only sees the
    original columns, so padding never changes the state.
    """
    dims = mps.bond_dims
    if len(set(dims)) != 1:
        if not pad:
            raise ValueError(f"non-uniform bond dimensions {dims}; pass pad=True")
        mps = pad_mps(mps)
    M = np.stack(mps.sites)
    gamma = np.stack(gamma_from_mps(mps))
    return RnnParams("vanilla", {"M": M, "gamma": gamma})


# ---------------------------------------------------------------------------
# absorptions


def gauge_absorb(vanilla: RnnParams, atol: float = 1e-8) -> RnnParams:
    """Diagonalise every ``gamma`` and move the unitaries into ``M``.

    With ``gamma_i = U_i^dagger diag(eta_i) U_i`` the new matrices are
    ``U_i M_i U_{i-1}^dagger``. The vanilla phase ``arg(sum h)`` becomes a
    readout at the last site with ``w = conj(U_{V-1}) 1`` and ``c = 0``;
    every other site gets ``w = 0, c = 1``.
    """
    if vanilla.variant != "vanilla":
        raise ValueError("gauge_absorb expects vanilla parameters")
    M = np.asarray(vanilla.tensors["M"])
    gam = np.asarray(vanilla.tensors["gamma"])
    V, _, chi, _ = M.shape
    newM = np.empty_like(M)
    log_eta = np.empty((V, chi))
    prev = np.eye(chi, dtype=complex)  # U_{i-1}^dagger
    U = None
    for i in range(V):
        g = gam[i]
        scale = max(1.0, float(np.max(np.abs(g))))
        if np.max(np.abs(g - g.conj().T)) > atol * scale:
            raise ValueError(f"gamma at site {i} is not Hermitian")
        lam, Q = np.linalg.eigh(0.5 * (g + g.conj().T))
        lam, Q = lam[::-1], Q[:, ::-1]  # descending
        U = Q.conj().T
        newM[i] = U @ M[i] @ prev
        log_eta[i] = np.log(np.maximum(lam, ETA_FLOOR))
        prev = Q
    w = np.zeros((V, 2, chi), dtype=complex)
    c = np.ones((V, 2), dtype=complex)
    if vanilla.phase_enabled:
        w[V - 1] = U.conj().sum(axis=1)
        c[V - 1] = 0.0
    return RnnParams(
        "oned",
        {"M": newM, "v": np.zeros((V, 2, chi), dtype=complex), "log_eta": log_eta, "w": w, "c": c},
        vanilla.phase_enabled,
    )


def absorb_bias(oned: RnnParams) -> RnnParams:
    """Fold ``v`` into ``M`` through an auxiliary memory component.

    The augmented matrix ``[[M, v], [0, 1]]`` acting on ``(h, 1)`` gives
    ``(M h + v, 1)``, and the auxiliary entry gets the floor weight for
    eta and zero weight in ``w``. This is exact for the unnormalised
    recurrence (``normalize=False``). With per-step normalisation the
    auxiliary entry is divided by a prefix-dependent norm, so the bias
    is no longer reproduced in general.
    """
    if oned.variant != "oned":
        raise ValueError("absorb_bias expects oned parameters")
    t = {k: np.asarray(a) for k, a in oned.tensors.items()}
    V, _, chi, _ = t["M"].shape
    M = np.zeros((V, 2, chi + 1, chi + 1), dtype=complex)
    M[:, :, :chi, :chi] = t["M"]
    M[:, :, :chi, chi] = t["v"]
    M[:, :, chi, chi] = 1.0
    log_eta = np.concatenate([t["log_eta"], np.full((V, 1), LOG_ETA_FLOOR)], axis=1)
    w = np.concatenate([t["w"], np.zeros((V, 2, 1), dtype=complex)], axis=2)
    return RnnParams(
        "oned",
        {"M": M, "v": np.zeros((V, 2, chi + 1), dtype=complex), "log_eta": log_eta, "w": w, "c": t["c"]},
        oned.phase_enabled,
    )


# ---------------------------------------------------------------------------
# hierarchy lifts


def _noise(rng, shape, std):
    if std == 0:
        return np.zeros(shape, dtype=complex)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def lift_1d_to_2d(oned: RnnParams, lattice: Lattice, noise_std: float = 1e-7, seed=0) -> RnnParams:
    """Embed a 1D model in the 2D recurrence on the snake ordering.

    Along a row the 1D predecessor is the horizontal neighbour, so
    ``Mx = M``. At the first site of every row after the first the 1D
    predecessor is the vertical neighbour instead, so ``My = M`` there.
    All remaining entries of ``Mx``/``My`` are Gaussian noise.
    """
    if oned.variant != "oned":
        raise ValueError("lift_1d_to_2d expects oned parameters")
    if not lattice.is_2d:
        raise ValueError("lift_1d_to_2d needs a square or triangular lattice")
    if oned.V != lattice.V:
        raise ValueError(f"params have {oned.V} sites, lattice has {lattice.V}")
    t = {k: np.asarray(a) for k, a in oned.tensors.items()}
    M = t["M"]
    rng = np.random.default_rng(seed)
    Mx = M + _noise(rng, M.shape, noise_std)
    My = _noise(rng, M.shape, noise_std)
    L = lattice.L
    for y in range(1, L):
        i = y * L  # first snake site of row y
        Mx[i] = _noise(rng, M[i].shape, noise_std)
        My[i] = M[i] + My[i]
    return RnnParams(
        "twod",
        {"Mx": Mx, "My": My, "v": t["v"], "log_eta": t["log_eta"], "w": t["w"], "c": t["c"]},
        oned.phase_enabled,
    )


def lift_2d_to_tensor(twod: RnnParams, noise_std: float = 1e-7, seed=0) -> RnnParams:
    """Add a trilinear tensor ``T`` initialised to noise."""
    if twod.variant != "twod":
        raise ValueError("lift_2d_to_tensor expects twod parameters")
    t = {k: np.asarray(a) for k, a in twod.tensors.items()}
    V, _, chi, _ = t["Mx"].shape
    rng = np.random.default_rng(seed)
    t["T"] = _noise(rng, (V, 2, chi, chi, chi), noise_std)
    return RnnParams("tensor", t, twod.phase_enabled)


def lift_to_compressed(
    params: RnnParams, noise_std: float = 1e-7, seed=0, chi_compressed: int | None = None
) -> RnnParams:
    """Lift TwoD or Tensor parameters to the Tucker-factored variant.

    From TwoD the factors start as truncated identities and the core as
    noise. From Tensor the trilinear tensors are compressed by HOSVD.
    """
    if params.variant == "tensor":
        return tucker_compress(params, chi_compressed)
    if params.variant != "twod":
        raise ValueError("lift_to_compressed expects twod or tensor parameters")
    t = {k: np.asarray(a) for k, a in params.tensors.items()}
    V, _, chi, _ = t["Mx"].shape
    k = chi_compressed or compressed_rank(chi)
    rng = np.random.default_rng(seed)
    eye = np.broadcast_to(np.eye(chi, k, dtype=complex), (V, 2, chi, k))
    t.update(K=_noise(rng, (V, 2, k, k, k), noise_std), Uo=eye.copy(), Ux=eye.copy(), Uy=eye.copy())
    return RnnParams("compressed", t, params.phase_enabled)


# ---------------------------------------------------------------------------
# 2D recurrence as a 1D one


def simulate_2d_as_1d(twod: RnnParams, L: int) -> RnnParams:
    """1D parameters with bond ``L * chi`` reproducing a linear 2D model.

    The 1D memory stacks one ``chi`` block per column. Block ``x`` holds
    the latest memory of column ``x``: after site ``(x, y)`` it is
    ``h^(x,y)``, before it is ``h^(x,y-1)``. Each site rewrites only its
    own block; eta is nonzero only there, so conditionals read exactly
    the 2D memory. Exact for the unnormalised 2D recurrence with ``v = 0``.
    """
    if twod.variant != "twod":
        raise ValueError("simulate_2d_as_1d expects twod parameters")
    t = {k: np.asarray(a) for k, a in twod.tensors.items()}
    if np.any(t["v"] != 0):
        raise ValueError("simulate_2d_as_1d needs v = 0 (fold the bias in first)")
    V, _, chi, _ = t["Mx"].shape
    if V != L * L:
        raise ValueError(f"params have {V} sites, an {L}x{L} lattice has {L * L}")
    D = L * chi
    M = np.zeros((V, 2, D, D), dtype=complex)
    log_eta = np.full((V, D), LOG_ETA_FLOOR)
    w = np.zeros((V, 2, D), dtype=complex)

    def blk(x):
        return slice(x * chi, (x + 1) * chi)

    for i in range(V):
        y, r = divmod(i, L)
        x = r if y % 2 == 0 else L - 1 - r
        hx = x - 1 if y % 2 == 0 else x + 1
        for s in (0, 1):
            m = M[i, s]
            if i == 0:
                # the start vector is all ones; block 0 plays h^(-1,0)
                m[blk(0), blk(0)] = t["Mx"][i, s]
            else:
                for j in range(L):
                    if j != x:
                        m[blk(j), blk(j)] = np.eye(chi)
                m[blk(x), blk(x)] = t["My"][i, s]
                if 0 <= hx < L:
                    m[blk(x), blk(hx)] = t["Mx"][i, s]
            w[i, s, blk(x)] = t["w"][i, s]
        log_eta[i, blk(x)] = t["log_eta"][i]
    return RnnParams(
        "oned",
        {"M": M, "v": np.zeros((V, 2, D), dtype=complex), "log_eta": log_eta, "w": w, "c": t["c"]},
        twod.phase_enabled,
    )


# ---------------------------------------------------------------------------
# Tucker factorisation


def _leading_vectors(unfolding, k):
    u, _, _ = np.linalg.svd(unfolding, full_matrices=False)
    if u.shape[1] < k:
        u = np.concatenate([u, np.zeros((u.shape[0], k - u.shape[1]), dtype=u.dtype)], axis=1)
    return u[:, :k]


def hosvd(T: np.ndarray, k: int):
    """Truncated higher-order SVD of a 3-tensor: ``(core, (U0, U1, U2))``."""
    n0, n1, n2 = T.shape
    U0 = _leading_vectors(T.reshape(n0, -1), k)
    U1 = _leading_vectors(T.transpose(1, 0, 2).reshape(n1, -1), k)
    U2 = _leading_vectors(T.transpose(2, 0, 1).reshape(n2, -1), k)
    core = np.einsum("stu,sa,tb,uc->abc", T, U0.conj(), U1.conj(), U2.conj())
    return core, (U0, U1, U2)


def tucker_compress(tensor: RnnParams, chi_compressed: int | None = None) -> RnnParams:
    """HOSVD of every ``T[i][s]`` to a ``k x k x k`` core, ``k = ceil(chi**(2/3))``."""
    if tensor.variant != "tensor":
        raise ValueError("tucker_compress expects tensor parameters")
    t = {k: np.asarray(a) for k, a in tensor.tensors.items()}
    T = t.pop("T")
    V, _, chi = T.shape[:3]
    k = chi_compressed or compressed_rank(chi)
    K = np.zeros((V, 2, k, k, k), dtype=complex)
    Us = {name: np.zeros((V, 2, chi, k), dtype=complex) for name in ("Uo", "Ux", "Uy")}
    for i in range(V):
        for s in (0, 1):
            core, (a, b, c) = hosvd(T[i, s], k)
            K[i, s] = core
            Us["Uo"][i, s], Us["Ux"][i, s], Us["Uy"][i, s] = a, b, c
    t.update(K=K, **Us)
    return RnnParams("compressed", t, tensor.phase_enabled)


def tucker_expand(compressed: RnnParams) -> RnnParams:
    """Rebuild dense ``T = K x1 Uo x2 Ux x3 Uy``."""
    if compressed.variant != "compressed":
        raise ValueError("tucker_expand expects compressed parameters")
    t = {k: np.asarray(a) for k, a in compressed.tensors.items()}
    K, Uo, Ux, Uy = (t.pop(n) for n in ("K", "Uo", "Ux", "Uy"))
    t["T"] = np.einsum("vpabc,vpsa,vptb,vpuc->vpstu", K, Uo, Ux, Uy)
    return RnnParams("tensor", t, compressed.phase_enabled)


# ---------------------------------------------------------------------------
# area-law construction


def build_area_law_params(L: int) -> RnnParams:
    """Tensor parameters (``chi = 2``) for a state with ``S = L ln 2``.

    The first row writes each spin into its column memory, the vertical
    identity carries it down, and the last row only admits the spin that
    equals the one stored in its column. The normalised state is uniform
    over configurations with ``row 0 == row L-1``.
    """
    if int(L) != L or L < 2 or L % 2:
        raise ValueError(f"the area-law construction needs an even L >= 2, got {L}")
    V, chi = L * L, 2
    T = np.zeros((V, 2, chi, chi, chi), dtype=complex)
    Mx = np.zeros((V, 2, chi, chi), dtype=complex)
    My = np.zeros((V, 2, chi, chi), dtype=complex)
    v = np.zeros((V, 2, chi), dtype=complex)
    log_eta = np.zeros((V, chi))
    w = np.zeros((V, 2, chi), dtype=complex)
    c = np.ones((V, 2), dtype=complex)
    lat = Lattice("square", L)
    for i, (x, y) in enumerate(lat.coords):
        for s in (0, 1):
            if y < L - 1:
                if y == 0:
                    v[i, s, s] = 1.0
                else:
                    My[i, s] = np.eye(chi)
            elif x < L - 1:
                T[i, s, 0, 0, s] = 1.0
            else:
                My[i, s, 0, s] = 1.0
        if y == L - 1:
            log_eta[i] = [0.0, LOG_ETA_FLOOR]
    i_end = lat.index(0, L - 1)
    w[i_end, :, 0] = 1.0
    c[i_end] = 0.0
    return RnnParams(
        "tensor", {"T": T, "Mx": Mx, "My": My, "v": v, "log_eta": log_eta, "w": w, "c": c}
    )


# ---------------------------------------------------------------------------
# state vector factorisation


def statevector_to_mps(psi, chi_max: int) -> Mps:
    """Left-to-right SVD sweep with truncation to ``chi_max``.

    ``psi`` is indexed with site ``i`` on bit ``i``. The returned MPS
    carries the norm in its last site; ``mps.discarded`` lists the
    relative weight dropped at each internal bond.
    """
    psi = np.asarray(psi, dtype=complex).ravel()
    V = int(round(math.log2(psi.size))) if psi.size else 0
    if psi.size < 2 or 2**V != psi.size:
        raise ValueError("state vector length must be a power of two >= 2")
    if V > 20:
        raise ValueError("statevector_to_mps is limited to V <= 20")
    if int(chi_max) != chi_max or chi_max < 1:
        raise ValueError("chi_max must be a positive integer")
    if not np.any(psi):
        raise ValueError("cannot factorise the zero vector")
    # C-order axes (s_{V-1}, ..., s_0); reverse so site 0 comes first
    rest = psi.reshape((2,) * V).transpose(range(V - 1, -1, -1)).reshape(1, -1)
    sites, discarded = [], []
    for i in range(V - 1):
        chi_l = rest.shape[0]
        mat = rest.reshape(chi_l * 2, -1)
        u, s, vh = np.linalg.svd(mat, full_matrices=False)
        k = min(int(chi_max), int(np.count_nonzero(s > s[0] * 1e-15)) or 1)
        total = float(np.sum(s**2))
        discarded.append(float(np.sum(s[k:] ** 2)) / total if total else 0.0)
        A = u[:, :k].reshape(chi_l, 2, k)
        sites.append(A.transpose(1, 2, 0))  # (2, k, chi_l)
        rest = s[:k, None] * vh[:k]
    chi_l = rest.shape[0]
    last = rest.reshape(chi_l, 2, 1)
    sites.append(last.transpose(1, 2, 0))
    return Mps(sites, discarded)
