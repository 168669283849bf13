import itertools
import math

import numpy as np
import pytest

from mpsrnn.ansatz import RnnParams, conditionals, log_amplitude, random_params
from mpsrnn.lattice import Lattice
from mpsrnn.mapping import (
    LOG_ETA_FLOOR,
    Mps,
    absorb_bias,
    build_area_law_params,
    contract_mps,
    gamma_from_mps,
    gauge_absorb,
    lift_1d_to_2d,
    lift_2d_to_tensor,
    lift_to_compressed,
    mps_to_vanilla,
    pad_mps,
    random_mps,
    simulate_2d_as_1d,
    statevector_to_mps,
    tucker_compress,
    tucker_expand,
)
from mpsrnn.oracle import all_configs, cut_entropy, enumerate_wavefunction


def brute_force_amplitude(mps, spins):
    """Explicit sum over every bond index."""
    dims = mps.bond_dims
    total = 0j
    for idx in itertools.product(*[range(d) for d in dims]):
        term = 1 + 0j
        for i, s in enumerate(spins):
            term *= mps.sites[i][s][idx[i + 1], idx[i]]
        total += term
    return total


def normalised(psi):
    return psi / np.linalg.norm(psi)


def test_contract_examples():
    m = Mps([np.array([[[2.0]], [[3.0]]])])
    assert contract_mps(m, [0]) == 2 and contract_mps(m, [1]) == 3
    ident = Mps([np.ones((2, 1, 1))] * 2)
    for s in itertools.product((0, 1), repeat=2):
        assert contract_mps(ident, s) == 1


def test_contract_matches_index_loop(rng):
    m = random_mps(6, 4, seed=3)
    for s in rng.integers(0, 2, (3, 6)):
        assert abs(contract_mps(m, s) - brute_force_amplitude(m, s)) < 1e-12
    psi = m.statevector()
    for k, s in enumerate(all_configs(6)[:20]):
        assert abs(psi[k] - contract_mps(m, s)) < 1e-12


def test_mps_shape_errors():
    with pytest.raises(ValueError):
        Mps([np.ones((2, 2, 1)), np.ones((2, 1, 3))])
    with pytest.raises(ValueError):
        contract_mps(random_mps(3, 2), [0, 1])


def test_gamma_examples():
    a, b = 0.3 + 0.4j, -1.2
    m = Mps([np.ones((2, 1, 1)), np.array([[[a]], [[b]]])])
    gam = gamma_from_mps(m)
    np.testing.assert_allclose(gam[1], [[1]])
    np.testing.assert_allclose(gam[0], [[abs(a) ** 2 + abs(b) ** 2]])


def test_gamma_matches_exhaustive_sum():
    m = random_mps(5, 3, seed=2)
    gam = gamma_from_mps(m)
    for i in range(5):
        ref = np.zeros((3, 3), complex)
        for rest in itertools.product((0, 1), repeat=4 - i):
            r = np.ones(3, complex)
            for j, s in zip(range(4, i, -1), rest):
                r = r @ m.sites[j][s]
            ref += np.outer(r.conj(), r)
        np.testing.assert_allclose(gam[i], ref, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(gam[i])) > -1e-12


def test_product_state_vanilla():
    a = np.array([0.6, 0.8j])
    m = Mps([a.reshape(2, 1, 1)] * 4)
    p = mps_to_vanilla(m)
    lat = Lattice("chain", 4)
    probs = conditionals(p, lat, all_configs(4))
    np.testing.assert_allclose(probs[..., 0], 0.36, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_vanilla_exact(seed):
    m = random_mps(8, 4, seed=seed, boundary_chi=1)
    p = mps_to_vanilla(m, pad=True)
    psi = np.exp(log_amplitude(p, Lattice("chain", 8), all_configs(8)))
    assert np.max(np.abs(psi - normalised(m.statevector()))) <= 1e-10
    for g in np.asarray(p.tensors["gamma"]):
        assert np.min(np.linalg.eigvalsh(g)) > -1e-12


def test_vanilla_requires_uniform_bonds():
    m = random_mps(4, 3, boundary_chi=1)
    with pytest.raises(ValueError):
        mps_to_vanilla(m)
    assert pad_mps(m).bond_dims == [3] * 5


def test_gauge_examples():
    m = random_mps(3, 3, seed=1)
    van = mps_to_vanilla(m)
    t = van.to_numpy().tensors
    eta = np.exp(gauge_absorb(van).tensors["log_eta"])
    # the seed gamma is the all-ones matrix with spectrum (chi, 0, 0)
    np.testing.assert_allclose(eta[-1], [3, 1e-30, 1e-30], atol=1e-12)
    diag = t["gamma"].copy()
    diag[:] = np.diag([3.0, 2.0, 1.0])
    one = gauge_absorb(van.replace(gamma=diag))
    np.testing.assert_allclose(np.abs(one.tensors["M"]), np.abs(t["M"]), atol=1e-14)


def test_gauge_preserves_state():
    m = random_mps(6, 3, seed=5)
    van = mps_to_vanilla(m)
    one = gauge_absorb(van)
    lat = Lattice("chain", 6)
    cf = all_configs(6)
    np.testing.assert_allclose(conditionals(one, lat, cf), conditionals(van, lat, cf), atol=1e-10)
    np.testing.assert_allclose(np.exp(log_amplitude(one, lat, cf)), np.exp(log_amplitude(van, lat, cf)), atol=1e-10)


def test_gauge_rejects_non_hermitian():
    van = mps_to_vanilla(random_mps(3, 2))
    g = np.asarray(van.tensors["gamma"]).copy()
    g[0, 0, 1] += 1.0
    with pytest.raises(ValueError):
        gauge_absorb(van.replace(gamma=g))


def test_absorb_bias_zero_bias():
    lat = Lattice("chain", 6)
    p = random_params("oned", 6, 2, seed=1)
    p = p.replace(v=np.zeros((6, 2, 2), complex))
    q = absorb_bias(p)
    assert q.chi == 3
    cf = all_configs(6)
    # normalised model: the auxiliary entry only rescales memories, so
    # conditionals agree; local phases with c != 0 are scale dependent
    np.testing.assert_allclose(conditionals(q, lat, cf), conditionals(p, lat, cf), atol=1e-13)
    a = log_amplitude(p, lat, cf, normalize=False)
    b = log_amplitude(q, lat, cf, normalize=False)
    assert np.array_equal(a, b)


def test_absorb_bias_product_state():
    lat = Lattice("chain", 4)
    a = np.array([0.6, -0.8j])
    t = {
        "M": np.zeros((4, 2, 1, 1), complex),
        "v": np.broadcast_to(a.reshape(1, 2, 1), (4, 2, 1)).copy(),
        "log_eta": np.zeros((4, 1)),
        "w": np.ones((4, 2, 1), complex),
        "c": np.zeros((4, 2), complex),
    }
    p = RnnParams("oned", t)
    q = absorb_bias(p)
    cf = all_configs(4)
    np.testing.assert_allclose(log_amplitude(q, lat, cf), log_amplitude(p, lat, cf), atol=1e-13)


def test_absorb_bias_exact_for_linear_recurrence():
    lat = Lattice("chain", 6)
    p = random_params("oned", 6, 2, seed=4)
    q = absorb_bias(p)
    cf = all_configs(6)
    a = np.exp(log_amplitude(p, lat, cf, normalize=False))
    b = np.exp(log_amplitude(q, lat, cf, normalize=False))
    assert np.max(np.abs(a - b)) <= 1e-12


@pytest.mark.xfail(strict=True, reason="per-step normalisation rescales the auxiliary entry by a prefix-dependent factor")
def test_absorb_bias_with_normalisation():
    lat = Lattice("chain", 6)
    p = random_params("oned", 6, 2, seed=4)
    q = absorb_bias(p)
    cf = all_configs(6)
    a = np.exp(log_amplitude(p, lat, cf))
    b = np.exp(log_amplitude(q, lat, cf))
    assert np.max(np.abs(a - b)) <= 1e-12


def _oned_from_mps(V, chi, seed):
    return gauge_absorb(mps_to_vanilla(random_mps(V, chi, seed=seed)))


def test_lift_1d_to_2d_exact():
    lat = Lattice("square", 4)
    one = _oned_from_mps(16, 3, 0)
    two = lift_1d_to_2d(one, lat, 0.0)
    cf = all_configs(16)
    a = log_amplitude(one, Lattice("chain", 16), cf)
    b = log_amplitude(two, lat, cf)
    assert np.max(np.abs(np.exp(a) - np.exp(b))) <= 1e-13


def test_lift_1d_to_2d_noise_and_seed():
    lat = Lattice("square", 4)
    one = random_params("oned", 16, 3, seed=1)
    two = lift_1d_to_2d(one, lat, 1e-7, seed=5)
    again = lift_1d_to_2d(one, lat, 1e-7, seed=5)
    for k in two.tensors:
        assert np.array_equal(np.asarray(two.tensors[k]), np.asarray(again.tensors[k]))
    cf = all_configs(16)
    a = np.exp(log_amplitude(one, Lattice("chain", 16), cf))
    b = np.exp(log_amplitude(two, lat, cf))
    big = np.abs(a) > 1e-3 * np.abs(a).max()
    assert np.max(np.abs(b[big] - a[big]) / np.abs(a[big])) <= 1e-5


def test_lift_2d_to_tensor():
    lat = Lattice("square", 4)
    two = random_params("twod", 16, 3, seed=2)
    cf = all_configs(16)
    ref = log_amplitude(two, lat, cf)
    exact = lift_2d_to_tensor(two, 0.0)
    assert np.array_equal(log_amplitude(exact, lat, cf), ref)
    noisy = lift_2d_to_tensor(two, 1e-7, seed=1)
    drift = np.abs(np.exp(log_amplitude(noisy, lat, cf)) - np.exp(ref))
    assert drift.max() <= 1e-4


def test_lift_to_compressed():
    two = random_params("twod", 4, 8, seed=2)
    comp = lift_to_compressed(two, 0.0)
    assert comp.chi_compressed == 4
    lat = Lattice("square", 2)
    cf = all_configs(4)
    np.testing.assert_allclose(log_amplitude(comp, lat, cf), log_amplitude(two, lat, cf), atol=1e-13)


def test_simulate_identity_blocks():
    L, V = 3, 9
    lat = Lattice("square", L)
    eye = np.ones((V, 2, 1, 1), complex)
    rng = np.random.default_rng(0)
    t = {
        "Mx": eye * np.array([1.0, 0.5]).reshape(1, 2, 1, 1),
        "My": eye,
        "v": np.zeros((V, 2, 1), complex),
        "log_eta": rng.standard_normal((V, 1)),
        "w": np.zeros((V, 2, 1), complex),
        "c": np.ones((V, 2), complex),
    }
    two = RnnParams("twod", t)
    one = simulate_2d_as_1d(two, L)
    M = np.asarray(one.tensors["M"])
    assert set(np.unique(np.abs(M))) <= {0.0, 0.5, 1.0}
    cf = all_configs(V)
    c1 = conditionals(one, Lattice("chain", V), cf)
    c2 = conditionals(two, lat, cf, normalize=False)
    np.testing.assert_allclose(c1, c2, atol=1e-12)


@pytest.mark.parametrize("L,chi", [(2, 3), (3, 2)])
def test_simulate_random(L, chi):
    V = L * L
    lat = Lattice("square", L)
    two = random_params("twod", V, chi, seed=L)
    two = two.replace(v=np.zeros((V, 2, chi), complex))
    one = simulate_2d_as_1d(two, L)
    assert one.chi == L * chi
    cf = all_configs(V)
    c1 = conditionals(one, Lattice("chain", V), cf)
    c2 = conditionals(two, lat, cf, normalize=False)
    assert np.max(np.abs(c1 - c2)) <= 1e-10


@pytest.mark.xfail(strict=True, reason="per-step normalisation divides h_x and h_y by different prefix norms")
def test_simulate_against_normalised_2d():
    L, chi = 3, 2
    lat = Lattice("square", L)
    two = random_params("twod", 9, chi, seed=3).replace(v=np.zeros((9, 2, chi), complex))
    one = simulate_2d_as_1d(two, L)
    cf = all_configs(9)
    c1 = conditionals(one, Lattice("chain", 9), cf)
    c2 = conditionals(two, lat, cf)
    assert np.max(np.abs(c1 - c2)) <= 1e-10


def test_simulate_rejects_bias():
    with pytest.raises(ValueError):
        simulate_2d_as_1d(random_params("twod", 4, 2), 2)


def test_tucker():
    p = random_params("tensor", 4, 4, seed=1)
    T = np.asarray(p.tensors["T"])
    back = np.asarray(tucker_expand(tucker_compress(p, 4)).tensors["T"])
    assert np.linalg.norm(back - T) / np.linalg.norm(T) <= 1e-10
    zero = p.replace(T=np.zeros_like(T))
    comp = tucker_compress(zero)
    assert comp.chi_compressed == 3
    assert np.all(np.asarray(comp.tensors["K"]) == 0)
    assert tucker_compress(random_params("tensor", 1, 8)).chi_compressed == 4


def test_area_law_small():
    psi = enumerate_wavefunction(build_area_law_params(2), Lattice("square", 2))
    prob = np.abs(psi) ** 2
    lat = Lattice("square", 2)
    cf = all_configs(4)
    ok = (cf[:, lat.index(0, 0)] == cf[:, lat.index(0, 1)]) & (cf[:, lat.index(1, 0)] == cf[:, lat.index(1, 1)])
    np.testing.assert_allclose(prob, ok / 4, atol=1e-15)


def test_area_law_L4():
    L = 4
    lat = Lattice("square", L)
    psi = enumerate_wavefunction(build_area_law_params(L), lat)
    prob = np.abs(psi) ** 2
    assert np.count_nonzero(prob) == 2**12
    np.testing.assert_allclose(prob[prob > 0], 2.0**-12, rtol=1e-12)
    for y in (1, 2):
        region = [lat.index(x, yy) for yy in range(y + 1) for x in range(L)]
        assert abs(cut_entropy(psi, region) - L * math.log(2)) <= 1e-9


def test_area_law_rejects_odd():
    with pytest.raises(ValueError):
        build_area_law_params(3)


def test_statevector_to_mps_examples():
    a = np.array([0.6, 0.8])
    prod = np.kron(np.kron(a, a), a)
    m = statevector_to_mps(prod, 1)
    assert np.max(np.abs(m.statevector() - prod)) <= 1e-12
    bell = np.array([1, 0, 0, 1]) / math.sqrt(2)
    assert np.max(np.abs(statevector_to_mps(bell, 2).statevector() - bell)) <= 1e-12
    cut = statevector_to_mps(bell, 1)
    trunc = cut.statevector()
    fid = abs(np.vdot(bell, trunc)) ** 2 / np.vdot(trunc, trunc).real
    assert abs(fid - 0.5) < 1e-12
    assert abs(cut.discarded[0] - 0.5) < 1e-12


def test_statevector_to_mps_random(rng):
    psi = rng.standard_normal(256) + 1j * rng.standard_normal(256)
    m = statevector_to_mps(psi, 16)
    assert np.max(np.abs(m.statevector() - psi)) <= 1e-10
    with pytest.raises(ValueError):
        statevector_to_mps(np.zeros(8), 2)
    with pytest.raises(ValueError):
        statevector_to_mps(psi, 0)


@pytest.mark.parametrize("seed", range(3))
def test_hierarchy_chain(seed):
    lat = Lattice("square", 3)
    chi = 2 + seed
    m = random_mps(9, chi, seed=seed, boundary_chi=1)
    cf = all_configs(9)
    van = mps_to_vanilla(m, pad=True)
    ref = conditionals(van, Lattice("chain", 9), cf)
    one = gauge_absorb(van)
    two = lift_1d_to_2d(one, lat, 0.0)
    ten = lift_2d_to_tensor(two, 0.0)
    np.testing.assert_allclose(conditionals(one, Lattice("chain", 9), cf), ref, atol=1e-10)
    np.testing.assert_allclose(conditionals(two, lat, cf), ref, atol=1e-10)
    np.testing.assert_allclose(conditionals(ten, lat, cf), ref, atol=1e-10)
