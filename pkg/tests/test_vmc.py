import numpy as np
import pytest

from mpsrnn.ansatz import log_amplitude, random_params
from mpsrnn.hamiltonian import build_afhm
from mpsrnn.lattice import Lattice
from mpsrnn.mapping import mps_to_vanilla, statevector_to_mps
from mpsrnn.oracle import all_configs, energy_expectation, enumerate_wavefunction, exact_ground_state
from mpsrnn.vmc import (
    TrainingDiverged,
    VmcConfig,
    _is_spike,
    adam_init,
    adam_step,
    clip_global_norm,
    default_schedule,
    energy_and_gradient,
    from_vector,
    log_derivatives,
    param_layout,
    to_vector,
    train,
    write_metrics_csv,
)


def fd_log_derivatives(params, lattice, spins, step=1e-5):
    layout = param_layout(params)
    v0 = np.asarray(to_vector(params))
    out = np.zeros((len(spins), v0.size), complex)
    for k in range(v0.size):
        d = np.zeros_like(v0)
        d[k] = step
        plus = log_amplitude(from_vector(v0 + d, layout), lattice, spins)
        minus = log_amplitude(from_vector(v0 - d, layout), lattice, spins)
        out[:, k] = (plus - minus) / (2 * step)
    return out


def test_vector_roundtrip():
    p = random_params("compressed", 4, 3, seed=1)
    q = from_vector(to_vector(p), param_layout(p))
    for k in p.tensors:
        assert np.array_equal(np.asarray(p.tensors[k]), np.asarray(q.tensors[k]))


@pytest.mark.parametrize(
    "variant,kind,L,chi",
    [("vanilla", "chain", 5, 2), ("oned", "chain", 5, 2), ("twod", "square", 2, 2), ("tensor", "triangular", 2, 2), ("compressed", "square", 2, 3)],
)
def test_log_derivatives_match_finite_differences(variant, kind, L, chi, rng):
    lat = Lattice(kind, L)
    p = random_params(variant, lat.V, chi, seed=3)
    spins = rng.integers(0, 2, (3, lat.V))
    O = log_derivatives(p, lat, spins)
    fd = fd_log_derivatives(p, lat, spins)
    for a, b in zip(O, fd):
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


def test_scaling_direction_has_zero_derivative(rng):
    lat = Lattice("chain", 5)
    p = random_params("oned", 5, 3, seed=2)
    layout = param_layout(p)
    spins = rng.integers(0, 2, (4, 5))
    O = log_derivatives(p, lat, spins)
    # tangent of (M[2], v[2]) -> (1 + t) (M[2], v[2])
    tangent = {k: np.zeros(np.shape(a), complex if k != "log_eta" else float) for k, a in p.tensors.items()}
    tangent["M"][2] = np.asarray(p.tensors["M"])[2]
    tangent["v"][2] = np.asarray(p.tensors["v"])[2]
    direction = np.asarray(to_vector(from_vector(to_vector(p), layout).replace(**tangent)))
    assert np.max(np.abs(O @ direction)) < 1e-12


def test_phase_stationary_at_real_axis(rng):
    lat = Lattice("chain", 3)
    p = random_params("oned", 3, 2, seed=1)
    p = p.replace(w=np.zeros((3, 2, 2), complex), c=np.ones((3, 2), complex))
    layout = param_layout(p)
    spins = rng.integers(0, 2, (4, 3))
    O = log_derivatives(p, lat, spins)
    name, shape, _, off = next(e for e in layout.entries if e[0] == "c")
    re_c = slice(off, off + int(np.prod(shape)))
    assert np.max(np.abs(O[:, re_c].imag)) < 1e-14


def exact_ground_params(lat, h, chi):
    e0, psi = exact_ground_state(h)
    return e0, mps_to_vanilla(statevector_to_mps(psi, chi), pad=True)


def test_eigenstate_fixed_point():
    lat = Lattice("square", 2)
    h = build_afhm(lat, True)
    e0, p = exact_ground_params(lat, h, 4)
    cf = all_configs(4)
    psi = enumerate_wavefunction(p, lat)
    keep = np.abs(psi) > 1e-8
    E, var, grad, excl = energy_and_gradient(p, lat, h, cf[keep], weights=np.abs(psi[keep]) ** 2)
    assert abs(E - e0) < 1e-10 and var <= 1e-12
    assert np.linalg.norm(grad) <= 1e-8


def test_identical_samples_zero_gradient():
    lat = Lattice("square", 2)
    h = build_afhm(lat, True)
    p = random_params("tensor", 4, 2, seed=0)
    E, var, grad, excl = energy_and_gradient(p, lat, h, np.tile([0, 1, 1, 0], (16, 1)))
    assert var < 1e-20 and np.linalg.norm(grad) < 1e-14 and excl == 0


def test_weighted_gradient_matches_finite_differences():
    lat = Lattice("chain", 2)
    h = build_afhm(lat)
    p = random_params("oned", 2, 2, seed=4)
    layout = param_layout(p)
    cf = all_configs(2)

    def energy(vec):
        return energy_expectation(enumerate_wavefunction(from_vector(vec, layout), lat), h)

    prob = np.abs(enumerate_wavefunction(p, lat)) ** 2
    E, _, grad, _ = energy_and_gradient(p, lat, h, cf, weights=prob)
    v0 = np.asarray(to_vector(p))
    assert abs(E.real - energy(v0)) < 1e-12
    fd = np.array([(energy(v0 + d) - energy(v0 - d)) / 2e-5 for d in np.eye(v0.size) * 1e-5])
    assert np.max(np.abs(fd - grad)) <= 1e-6 * max(1.0, np.max(np.abs(grad)))


def test_clip_examples():
    np.testing.assert_allclose(clip_global_norm(np.array([2.0, 0.0]), 1.0), [1.0, 0.0])
    np.testing.assert_allclose(clip_global_norm(np.array([0.3, 0.4]), 1.0), [0.3, 0.4])
    np.testing.assert_array_equal(clip_global_norm(np.zeros(3), 1.0), np.zeros(3))
    with pytest.raises(ValueError):
        clip_global_norm(np.ones(2), 0.0)


def test_adam_examples():
    delta, state = adam_step(adam_init(1), np.array([0.37]), 0.01)
    assert abs(float(delta[0]) + 0.01) < 1e-9 and int(state.step) == 1
    state = adam_init(3)
    total = np.zeros(3)
    for _ in range(10):
        delta, state = adam_step(state, np.zeros(3), 0.1)
        total += np.asarray(delta)
    assert np.all(total == 0)
    assert np.all(np.asarray(state.v) >= 0)
    grads = [np.array([0.1, -2.0]), np.array([0.5, 0.3])]
    runs = []
    for _ in range(2):
        s, out = adam_init(2), []
        for g in grads:
            d, s = adam_step(s, g, 1e-3)
            out.append(np.asarray(d))
        runs.append(out)
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


def test_config_validation_and_schedule():
    with pytest.raises(ValueError):
        VmcConfig(batch_size=1)
    with pytest.raises(ValueError):
        VmcConfig(lr_schedule=[(10, 0.0)])
    assert default_schedule(8, 40000) == [(10000, 1e-2), (10000, 1e-3), (20000, 1e-4)]
    assert default_schedule(16, 40000) == [(20000, 1e-3), (20000, 1e-4)]
    cfg = VmcConfig(lr_schedule=[(2, 0.1), (3, 0.01)])
    assert [cfg.lr_at(s) for s in range(6)] == [0.1, 0.1, 0.01, 0.01, 0.01, 0.01]


def test_spike_rule():
    hist = list(-9 + 0.01 * np.sin(np.arange(50)))
    assert not _is_spike(hist, -8.99, 10.0, 1e-3)
    assert _is_spike(hist, -5.0, 10.0, 1e-3)


def test_zero_steps():
    lat = Lattice("chain", 2)
    p = random_params("oned", 2, 2)
    r = train(p, lat, build_afhm(lat), VmcConfig(batch_size=16), steps=0)
    assert r.metrics == []
    for k in p.tensors:
        np.testing.assert_array_equal(np.asarray(r.params.tensors[k]), np.asarray(p.tensors[k]))


def test_two_site_training_and_determinism(tmp_path):
    lat = Lattice("chain", 2)
    h = build_afhm(lat)
    p = random_params("oned", 2, 2, seed=0)
    cfg = VmcConfig(batch_size=1024, lr_schedule=default_schedule(2, 2000), seed=7)
    a = train(p, lat, h, cfg)
    e = energy_expectation(enumerate_wavefunction(a.params, lat), h)
    assert abs(e + 0.75) < 1e-3
    b = train(p, lat, h, VmcConfig(batch_size=1024, lr_schedule=default_schedule(2, 50), seed=7))
    c = train(p, lat, h, VmcConfig(batch_size=1024, lr_schedule=default_schedule(2, 50), seed=7))
    key = lambda m: (m.step, m.energy, m.variance, m.grad_norm, m.lr)
    assert [key(m) for m in b.metrics] == [key(m) for m in c.metrics]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, b.metrics)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,energy_re,energy_im,variance,grad_norm,lr,wall_ms"
    assert len(lines) == 51


def test_divergence_keeps_last_good_state():
    lat = Lattice("chain", 2)
    p = random_params("oned", 2, 2, seed=0)
    M = np.asarray(p.tensors["M"]).copy()
    M[0, 0, 0, 0] = np.inf
    bad = p.replace(M=M)
    with pytest.raises(TrainingDiverged) as err:
        train(bad, lat, build_afhm(lat), VmcConfig(batch_size=8, lr_schedule=[(5, 0.01)]))
    assert err.value.step == 0
    assert np.isinf(np.asarray(err.value.params.tensors["M"])[0, 0, 0, 0])
