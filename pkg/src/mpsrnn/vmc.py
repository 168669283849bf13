"""Variational Monte Carlo: gradients, Adam, clipping and the training loop.

Complex parameters are optimised as pairs of real numbers. For a batch
with weights ``p_b`` (uniform for samples) the gradient of the energy is

    g_k = 2 Re sum_b p_b (E_b - E) conj(O_bk),   O_bk = d log psi_b / d theta_k,

which is one reverse pass through ``(Re log psi, Im log psi)`` with
cotangents ``2 p_b Re(E_b - E)`` and ``2 p_b Im(E_b - E)``.

Local energies reuse the sampling pass: every off-diagonal term flips
sites ``>= i``, so the flipped configuration shares all memories before
``i`` and the recurrence restarts there.
"""
from __future__ import annotations

import functools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from mpsrnn.ansatz import (
    REAL_FIELDS,
    RnnParams,
    check_configs,
    raise_if_degenerate,
    recurrence_plan,
    run_recurrence,
)
from mpsrnn.hamiltonian import FLAG_RATIO, Hamiltonian, flip_groups
from mpsrnn.lattice import Lattice
from mpsrnn.sampling import base_key, stream_uniforms

log = logging.getLogger(__name__)

LOG_FLAG = math.log(FLAG_RATIO)


def default_schedule(chi: int, total_steps: int = 40000) -> list[tuple[int, float]]:
    """Learning-rate phases scaled to ``total_steps``.

    Small bond dimensions use quarter, quarter and half of the steps at
    1e-2, 1e-3 and 1e-4. For ``chi > 10`` the first phase is skipped and
    the run spends half its steps at 1e-3 and half at 1e-4.
    """
    if total_steps <= 0:
        return []
    if chi <= 10:
        a = total_steps // 4
        return [(a, 1e-2), (a, 1e-3), (total_steps - 2 * a, 1e-4)]
    a = total_steps // 2
    return [(a, 1e-3), (total_steps - a, 1e-4)]


@dataclass
class VmcConfig:
    batch_size: int = 1024
    lr_schedule: list = field(default_factory=lambda: default_schedule(8))
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_samples: int = 10**6
    spike_factor: float = 10.0
    spike_window: int = 50
    spike_rel_floor: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        self.lr_schedule = [(int(n), float(r)) for n, r in self.lr_schedule]
        if any(n < 0 or r <= 0 for n, r in self.lr_schedule):
            raise ValueError("learning-rate phases need steps >= 0 and rate > 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    @property
    def total_steps(self) -> int:
        return sum(n for n, _ in self.lr_schedule)

    def lr_at(self, step: int) -> float:
        for n, r in self.lr_schedule:
            if step < n:
                return r
            step -= n
        return self.lr_schedule[-1][1]


# ---------------------------------------------------------------------------
# real-parameter view


@dataclass(frozen=True)
class ParamLayout:
    """Where each tensor lives in the flat real vector (hashable)."""

    variant: str
    phase_enabled: bool
    entries: tuple  # (name, shape, is_complex, offset)
    size: int


def param_layout(params: RnnParams) -> ParamLayout:
    entries, off = [], 0
    for name in sorted(params.tensors):
        shape = tuple(params.tensors[name].shape)
        cplx = name not in REAL_FIELDS
        entries.append((name, shape, cplx, off))
        off += math.prod(shape) * (2 if cplx else 1)
    return ParamLayout(params.variant, params.phase_enabled, tuple(entries), off)


def to_vector(params: RnnParams) -> jax.Array:
    parts = []
    for name in sorted(params.tensors):
        t = jnp.asarray(params.tensors[name])
        if name in REAL_FIELDS:
            parts.append(jnp.real(t).ravel())
        else:
            parts += [jnp.real(t).ravel(), jnp.imag(t).ravel()]
    return jnp.concatenate(parts).astype(jnp.float64)


def from_vector(vec, layout: ParamLayout) -> RnnParams:
    tensors = {}
    for name, shape, cplx, off in layout.entries:
        n = math.prod(shape)
        if cplx:
            tensors[name] = (vec[off : off + n] + 1j * vec[off + n : off + 2 * n]).reshape(shape)
        else:
            tensors[name] = vec[off : off + n].reshape(shape)
    return RnnParams(layout.variant, tensors, layout.phase_enabled)


# ---------------------------------------------------------------------------
# local energies and gradients


def _diag_terms(h: Hamiltonian):
    ii, jj, cc = [], [], []
    for t in h.terms:
        if t.kind == "x_field":
            continue
        ii.append(t.sites[0])
        jj.append(t.sites[1])
        cc.append(t.coefficient * (0.25 if t.kind == "heisenberg_bond" else 1.0))
    return np.array(ii, dtype=int), np.array(jj, dtype=int), np.array(cc)


def fast_local_energies(params, plan, h: Hamiltonian, spins, fwd):
    """``E_loc`` from a recorded forward pass over ``spins``.

    Flipped configurations restart the recurrence at their first flipped
    site from the stored memories of ``fwd``.
    """
    B, V = spins.shape
    spins = spins.astype(jnp.int32)
    z = 1.0 - 2.0 * spins
    ii, jj, cc = _diag_terms(h)
    eloc = ((z[:, ii] * z[:, jj]) @ cc).astype(jnp.complex128) if len(cc) else jnp.zeros(B, complex)
    zero = jnp.zeros((B, 1))
    cum_logp = jnp.concatenate([zero, jnp.cumsum(fwd.site_logp, axis=1)], axis=1)
    cum_phase = jnp.concatenate([zero, jnp.cumsum(fwd.site_phases, axis=1)], axis=1)
    logpsi = 0.5 * cum_logp[:, V] + 1j * cum_phase[:, V]
    for g in flip_groups(h):
        n = len(g.amps)
        flipped = (spins[:, None, :] ^ jnp.asarray(g.masks, dtype=jnp.int32)[None]).reshape(B * n, V)
        out = run_recurrence(params, plan, spins=flipped, start=g.start, prefix=fwd.memories, repeat=n)
        lp = 0.5 * (cum_logp[:, g.start, None] + out.logp.reshape(B, n)) + 1j * (
            cum_phase[:, g.start, None] + out.phase.reshape(B, n)
        )
        applies = jnp.where(
            jnp.asarray(g.pair)[None],
            spins[:, g.sites[:, 0]] != spins[:, g.sites[:, 1]],
            True,
        )
        ratio = jnp.exp(lp - logpsi[:, None])
        eloc = eloc + jnp.sum(jnp.where(applies, jnp.asarray(g.amps) * ratio, 0.0), axis=1)
    return eloc, logpsi


class Estimate(NamedTuple):
    energy: jax.Array  # complex
    variance: jax.Array
    grad: jax.Array  # flat real vector
    n_excluded: jax.Array
    spins: jax.Array
    eloc: jax.Array
    degenerate_site: jax.Array


def _estimate(vec, layout, plan, h, spins=None, uniforms=None, weights=None):
    def f(theta):
        params = from_vector(theta, layout)
        fwd = run_recurrence(params, plan, spins=spins, uniforms=uniforms, record=True)
        return (0.5 * fwd.logp, fwd.phase), fwd

    _, pullback, fwd = jax.vjp(f, vec, has_aux=True)
    params = from_vector(vec, layout)
    eloc, logpsi = fast_local_energies(params, plan, h, fwd.spins, fwd)
    keep = logpsi.real >= jnp.max(logpsi.real) + LOG_FLAG
    base = jnp.ones(eloc.shape) if weights is None else weights
    wts = jnp.where(keep, base, 0.0)
    wts = wts / jnp.sum(wts)
    eloc_safe = jnp.where(keep, eloc, 0.0)
    energy = jnp.sum(wts * eloc_safe)
    delta = jnp.where(keep, eloc_safe - energy, 0.0)
    variance = jnp.sum(wts * jnp.abs(delta) ** 2)
    (grad,) = pullback((2.0 * wts * delta.real, 2.0 * wts * delta.imag))
    return Estimate(
        energy, variance, grad, jnp.sum(~keep), fwd.spins, eloc, fwd.degenerate_site
    )


@functools.partial(jax.jit, static_argnames=("layout", "plan", "h"))
def _estimate_given(vec, spins, weights, layout, plan, h):
    return _estimate(vec, layout, plan, h, spins=spins, weights=weights)


def energy_and_gradient(params: RnnParams, lattice: Lattice, h: Hamiltonian, batch, weights=None):
    """Batch energy, variance and the real-vector gradient.

    ``batch`` is a :class:`SampleBatch` or a ``(B, V)`` spin array.
    ``weights`` (summing to one) replace the uniform sample average, e.g.
    exact probabilities over a full enumeration. Returns
    ``(E_mean, E_var, grad, n_excluded)``.
    """
    configs = getattr(batch, "configs", batch)
    spins = check_configs(configs, lattice.V)
    if len(spins) == 0:
        raise ValueError("empty batch")
    layout = param_layout(params)
    plan = recurrence_plan(params, lattice)
    w = None if weights is None else jnp.asarray(weights, dtype=jnp.float64)
    est = _estimate_given(to_vector(params), jnp.asarray(spins), w, layout, plan, h)
    raise_if_degenerate(est.degenerate_site)
    return complex(est.energy), float(est.variance), np.asarray(est.grad), int(est.n_excluded)


def fast_energies(params: RnnParams, lattice: Lattice, h: Hamiltonian, spins) -> np.ndarray:
    """Local energies of a batch through the prefix-restart estimator."""
    spins = check_configs(spins, lattice.V)
    plan = recurrence_plan(params, lattice)
    eloc = _fast_eloc_jit(params, jnp.asarray(spins), plan, h)
    return np.asarray(eloc)


@functools.partial(jax.jit, static_argnames=("plan", "h"))
def _fast_eloc_jit(params, spins, plan, h):
    fwd = run_recurrence(params, plan, spins=spins, record=True)
    return fast_local_energies(params, plan, h, spins, fwd)[0]


def log_derivatives(params: RnnParams, lattice: Lattice, spins) -> np.ndarray:
    """``(B, n_real)`` complex matrix ``d log psi / d theta``."""
    spins = jnp.asarray(check_configs(spins, lattice.V))
    layout = param_layout(params)
    plan = recurrence_plan(params, lattice)

    def parts(theta):
        out = run_recurrence(from_vector(theta, layout), plan, spins=spins)
        return 0.5 * out.logp, out.phase

    re, im = jax.jacrev(parts)(to_vector(params))
    return np.asarray(re) + 1j * np.asarray(im)


# ---------------------------------------------------------------------------
# optimiser


class OptimizerState(NamedTuple):
    m: jax.Array
    v: jax.Array
    step: jax.Array


def adam_init(size: int) -> OptimizerState:
    return OptimizerState(jnp.zeros(size), jnp.zeros(size), jnp.zeros((), dtype=jnp.int64))


def clip_global_norm(grad, max_norm: float):
    if isinstance(max_norm, (int, float)) and max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = jnp.sqrt(jnp.sum(jnp.square(grad)))
    return grad * jnp.minimum(1.0, max_norm / jnp.where(norm > 0, norm, 1.0))


def adam_step(state: OptimizerState, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; returns ``(delta, new_state)``."""
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * jnp.square(grad)
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    delta = -lr * m_hat / (jnp.sqrt(v_hat) + eps)
    return delta, OptimizerState(m, v, t)


@functools.partial(jax.jit, static_argnames=("layout", "plan", "h", "batch_size"))
def _train_step(vec, opt, lr, key, first_id, hyper, layout, plan, h, batch_size):
    clip, b1, b2, eps = hyper
    V = len(plan)
    ids = first_id + jnp.arange(batch_size, dtype=jnp.uint32)
    u = stream_uniforms(key, ids, V)
    est = _estimate(vec, layout, plan, h, uniforms=u)
    gnorm = jnp.sqrt(jnp.sum(jnp.square(est.grad)))
    grad = clip_global_norm(est.grad, clip)
    delta, opt = adam_step(opt, grad, lr, b1, b2, eps)
    return vec + delta, opt, est.energy, est.variance, gnorm, est.n_excluded


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepMetrics:
    step: int
    energy: complex
    variance: float
    grad_norm: float
    lr: float
    wall_ms: float


class TrainingDiverged(FloatingPointError):
    """Non-finite parameters or energy; carries the last good state."""

    def __init__(self, message, params, metrics, step):
        super().__init__(message)
        self.params = params
        self.metrics = metrics
        self.step = step


@dataclass
class TrainResult:
    params: RnnParams
    metrics: list
    events: list


def _is_spike(history, energy, factor, rel_floor):
    med = float(np.median(history))
    mad = float(np.median(np.abs(np.asarray(history) - med)))
    scale = max(mad, rel_floor * abs(med), 1e-12)
    return energy - med > factor * scale


def train(
    params: RnnParams,
    lattice: Lattice,
    h: Hamiltonian,
    config: VmcConfig,
    *,
    steps: int | None = None,
    callback: Callable | None = None,
) -> TrainResult:
    """Adam on sampled gradients following ``config.lr_schedule``.

    A step whose energy exceeds the median of the previous
    ``spike_window`` energies by more than ``spike_factor`` times a
    deviation scale divides all later learning rates by 10; the window
    then restarts. The scale is the median absolute deviation, floored at
    ``spike_rel_floor * |median|`` so that sampling noise of a converged
    run does not count as a spike. Non-finite energies or parameters raise
    :class:`TrainingDiverged` holding the last finite parameters.
    """
    total = config.total_steps if steps is None else int(steps)
    layout = param_layout(params)
    plan = recurrence_plan(params, lattice)
    vec = to_vector(params)
    opt = adam_init(layout.size)
    key = base_key(config.seed)
    hyper = (float(config.clip_norm), float(config.beta1), float(config.beta2), float(config.eps))
    metrics, events, history = [], [], []
    lr_scale = 1.0
    B = config.batch_size
    for step in range(total):
        lr = config.lr_at(step) * lr_scale
        t0 = time.perf_counter()
        new_vec, new_opt, energy, var, gnorm, n_excl = _train_step(
            vec, opt, lr, key, step * B, hyper, layout, plan, h, B
        )
        energy = complex(energy)
        wall = (time.perf_counter() - t0) * 1e3
        if not (np.isfinite(energy) and bool(jnp.all(jnp.isfinite(new_vec)))):
            raise TrainingDiverged(
                f"non-finite state at step {step}", from_vector(vec, layout), metrics, step
            )
        vec, opt = new_vec, new_opt
        row = StepMetrics(step, energy, float(var), float(gnorm), lr, wall)
        metrics.append(row)
        if int(n_excl):
            events.append((step, f"excluded {int(n_excl)} low-amplitude samples"))
        if len(history) >= config.spike_window and _is_spike(
            history, energy.real, config.spike_factor, config.spike_rel_floor
        ):
            lr_scale /= 10.0
            history = []
            events.append((step, f"energy spike, learning rate scale now {lr_scale:g}"))
            log.warning("step %d: energy spike %.6f, lr scale %g", step, energy.real, lr_scale)
        else:
            history.append(energy.real)
            history = history[-config.spike_window :]
        if callback is not None:
            callback(step, row)
    return TrainResult(from_vector(vec, layout), metrics, events)


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,energy_re,energy_im,variance,grad_norm,lr,wall_ms\n")
        for m in metrics:
            fh.write(
                f"{m.step},{m.energy.real!r},{m.energy.imag!r},{m.variance!r},"
                f"{m.grad_norm!r},{m.lr!r},{m.wall_ms:.3f}\n"
            )
