"""Parameter containers and forward evaluation of the MPS-RNN family.

Five variants share one recurrence engine:

``vanilla``
    ``h_i = M_i[s] h_{i-1}``; conditionals from a quadratic form with a
    Hermitian PSD matrix ``gamma_i``; phase ``arg(sum(h_last))``.
``oned``
    ``M_i[s] h_{i-1} + v_i[s]`` with per-step normalisation over both
    spin branches, eta-weighted conditionals and a local phase per site.
``twod`` / ``tensor`` / ``compressed``
    Same output layers, but the update mixes the horizontal and the
    vertical predecessor on the snake-ordered square lattice, optionally
    through a trilinear tensor (dense or Tucker-factored).

Spins are encoded 0 = up, 1 = down. All per-site tensors carry a leading
snake-index axis and a spin axis.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from mpsrnn.lattice import Boundary, Lattice

VARIANTS = ("vanilla", "oned", "twod", "tensor", "compressed")

FIELDS = {
    "vanilla": ("M", "gamma"),
    "oned": ("M", "v", "log_eta", "w", "c"),
    "twod": ("Mx", "My", "v", "log_eta", "w", "c"),
    "tensor": ("T", "Mx", "My", "v", "log_eta", "w", "c"),
    "compressed": ("K", "Uo", "Ux", "Uy", "Mx", "My", "v", "log_eta", "w", "c"),
}

REAL_FIELDS = frozenset({"log_eta"})

# memory sources in a recurrence plan
ONES = -1
ZERO = -2


class DegenerateStateError(ArithmeticError):
    """Both spin branches carry zero weight for a reachable prefix."""

    def __init__(self, message, site=None, sample=None):
        super().__init__(message)
        self.site = site
        self.sample = sample


def compressed_rank(chi: int) -> int:
    """Smallest integer ``k`` with ``k**3 >= chi**2``, i.e. ``ceil(chi**(2/3))``."""
    if chi < 1:
        raise ValueError("bond dimension must be positive")
    k = max(1, round(chi ** (2 / 3)))
    while k**3 < chi**2:
        k += 1
    while k > 1 and (k - 1) ** 3 >= chi**2:
        k -= 1
    return k


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class RnnParams:
    """Tagged container: ``variant`` selects which named tensors exist."""

    variant: str
    tensors: Mapping[str, jax.Array] = field(repr=False)
    phase_enabled: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        missing = set(FIELDS[self.variant]) - set(self.tensors)
        extra = set(self.tensors) - set(FIELDS[self.variant])
        if missing or extra:
            raise ValueError(
                f"{self.variant} params: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )

    def tree_flatten(self):
        keys = tuple(sorted(self.tensors))
        return [self.tensors[k] for k in keys], (self.variant, keys, self.phase_enabled)

    @classmethod
    def tree_unflatten(cls, aux, children):
        variant, keys, phase_enabled = aux
        obj = object.__new__(cls)
        object.__setattr__(obj, "variant", variant)
        object.__setattr__(obj, "tensors", dict(zip(keys, children)))
        object.__setattr__(obj, "phase_enabled", phase_enabled)
        return obj

    @property
    def V(self) -> int:
        return int(next(iter(self.tensors.values())).shape[0])

    @property
    def chi(self) -> int:
        key = {"vanilla": "M", "oned": "M"}.get(self.variant, "Mx")
        return int(self.tensors[key].shape[-1])

    @property
    def chi_compressed(self) -> int | None:
        if self.variant != "compressed":
            return None
        return int(self.tensors["K"].shape[-1])

    def site(self, i: int) -> dict:
        return {k: t[i] for k, t in self.tensors.items()}

    def replace(self, phase_enabled=None, **tensors) -> "RnnParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        pe = self.phase_enabled if phase_enabled is None else phase_enabled
        return RnnParams(self.variant, merged, pe)

    def to_numpy(self) -> "RnnParams":
        return RnnParams(
            self.variant, {k: np.asarray(t) for k, t in self.tensors.items()}, self.phase_enabled
        )

    def check(self) -> None:
        """Validate shapes against the variant's layout."""
        V, chi = self.V, self.chi
        shapes = {
            "M": (V, 2, chi, chi),
            "Mx": (V, 2, chi, chi),
            "My": (V, 2, chi, chi),
            "T": (V, 2, chi, chi, chi),
            "gamma": (V, chi, chi),
            "v": (V, 2, chi),
            "w": (V, 2, chi),
            "log_eta": (V, chi),
            "c": (V, 2),
        }
        if self.variant == "compressed":
            k = self.chi_compressed
            shapes.update(K=(V, 2, k, k, k), Uo=(V, 2, chi, k), Ux=(V, 2, chi, k), Uy=(V, 2, chi, k))
        for name, t in self.tensors.items():
            if tuple(t.shape) != shapes[name]:
                raise ValueError(f"tensor {name} has shape {tuple(t.shape)}, expected {shapes[name]}")
        if "log_eta" in self.tensors and not np.all(np.isfinite(np.asarray(self.tensors["log_eta"]))):
            raise ValueError("log_eta must be finite (eta > 0)")


def _complex_normal(rng, shape, scale):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def random_params(
    variant: str,
    V: int,
    chi: int,
    seed=0,
    *,
    scale: float = 1.0,
    phase_enabled: bool = True,
    chi_compressed: int | None = None,
) -> RnnParams:
    """Gaussian random parameters, mostly for tests and fresh starts."""
    rng = np.random.default_rng(seed)
    m = scale / math.sqrt(chi)
    t = {}
    if variant == "vanilla":
        t["M"] = _complex_normal(rng, (V, 2, chi, chi), m)
        a = _complex_normal(rng, (V, chi, chi), 1.0)
        t["gamma"] = np.einsum("vts,vtu->vsu", a.conj(), a)
        return RnnParams(variant, t, phase_enabled)
    if variant == "oned":
        t["M"] = _complex_normal(rng, (V, 2, chi, chi), m)
    else:
        t["Mx"] = _complex_normal(rng, (V, 2, chi, chi), m)
        t["My"] = _complex_normal(rng, (V, 2, chi, chi), m)
    if variant == "tensor":
        t["T"] = _complex_normal(rng, (V, 2, chi, chi, chi), m)
    if variant == "compressed":
        k = chi_compressed or compressed_rank(chi)
        t["K"] = _complex_normal(rng, (V, 2, k, k, k), m)
        for name in ("Uo", "Ux", "Uy"):
            t[name] = _complex_normal(rng, (V, 2, chi, k), 1 / math.sqrt(k))
    t["v"] = _complex_normal(rng, (V, 2, chi), scale)
    t["log_eta"] = 0.5 * rng.standard_normal((V, chi))
    t["w"] = _complex_normal(rng, (V, 2, chi), 1.0)
    t["c"] = _complex_normal(rng, (V, 2), 1.0)
    return RnnParams(variant, t, phase_enabled)


# ---------------------------------------------------------------------------
# single-step operations


def _candidates(site, hx, hy):
    """Unnormalised memories for both spins, shape ``(..., 2, chi)``.

    ``hx``/``hy`` are the horizontal (or 1D predecessor) and vertical
    memories; ``None`` marks a zero boundary and drops every term that
    would multiply it.
    """
    out = None

    def add(term):
        nonlocal out
        out = term if out is None else out + term

    if hx is not None and hy is not None:
        if "T" in site:
            add(jnp.einsum("pstu,...t,...u->...ps", site["T"], hx, hy))
        if "K" in site:
            a = jnp.einsum("ptk,...t->...pk", site["Ux"], hx)
            b = jnp.einsum("puk,...u->...pk", site["Uy"], hy)
            core = jnp.einsum("pkmn,...pm,...pn->...pk", site["K"], a, b)
            add(jnp.einsum("psk,...pk->...ps", site["Uo"], core))
    if hx is not None:
        add(jnp.einsum("pst,...t->...ps", site["M"] if "M" in site else site["Mx"], hx))
    if hy is not None and "My" in site:
        add(jnp.einsum("pst,...t->...ps", site["My"], hy))
    if "v" in site:
        add(site["v"])
    if out is None:
        out = jnp.zeros_like(site["v"])
    return out


def memory_update(site, h_horizontal, h_vertical, spin: int):
    """Unnormalised next memory for ``spin`` at one site.

    ``site`` is ``params.site(i)``. Pass zero vectors for zero
    boundaries; for 1D variants ``h_vertical`` is ignored.
    """
    h = _candidates(site, jnp.asarray(h_horizontal), jnp.asarray(h_vertical))
    return h[spin]


def normalize_memory(h_up, h_down):
    """Divide both branches by their joint norm."""
    h_up, h_down = np.asarray(h_up), np.asarray(h_down)
    norm = math.sqrt(float(np.sum(np.abs(h_up) ** 2) + np.sum(np.abs(h_down) ** 2)))
    if norm == 0.0:
        raise DegenerateStateError("both memory branches vanish")
    return h_up / norm, h_down / norm


def conditional_probability(h_up, h_down, eta=None, gamma=None):
    """``(p_up, p_down)`` from the eta-weighted norm or a gamma quadratic form."""
    if (eta is None) == (gamma is None):
        raise ValueError("pass exactly one of eta or gamma")
    h = np.stack([np.asarray(h_up), np.asarray(h_down)])
    if eta is not None:
        weight = np.abs(h) ** 2 @ np.asarray(eta, dtype=float)
    else:
        weight = np.real(np.einsum("ps,st,pt->p", h.conj(), np.asarray(gamma), h))
    total = weight.sum()
    if not total > 0:
        raise DegenerateStateError("unnormalised conditional weights sum to zero")
    p_up = weight[0] / total
    return float(p_up), float(1.0 - p_up)


def site_phase(w, c, h) -> float:
    """``arg(w . h + c)``; zero (and undefined) when the argument vanishes."""
    z = np.dot(np.asarray(w), np.asarray(h)) + c
    return float(np.angle(z))


# ---------------------------------------------------------------------------
# the recurrence


def recurrence_plan(params_or_variant, lattice: Lattice) -> tuple[tuple[int, int], ...]:
    """Static per-site ``(horizontal, vertical)`` memory sources."""
    variant = getattr(params_or_variant, "variant", params_or_variant)
    V = lattice.V
    if variant in ("vanilla", "oned"):
        return tuple((ONES if i == 0 else i - 1, ZERO) for i in range(V))
    if not lattice.is_2d:
        raise ValueError(f"{variant} needs a square or triangular lattice")
    tag = {Boundary.ONES: ONES, Boundary.ZERO: ZERO}
    return tuple(
        tuple(tag[s] if isinstance(s, Boundary) else s for s in pair) for pair in lattice.sources
    )


class Forward(NamedTuple):
    spins: jax.Array  # (B, V)
    logp: jax.Array  # (B,) sum of log conditionals over the walked sites
    phase: jax.Array  # (B,) sum of local phases over the walked sites
    degenerate_site: jax.Array  # (B,) first reachable site with zero weight, or -1
    site_logp: jax.Array | None = None  # (B, V) log conditional of the realised spin
    site_phases: jax.Array | None = None  # (B, V)
    memories: tuple | None = None  # one (B, chi) array per walked site
    probs: jax.Array | None = None  # (B, V, 2)
    phase_undefined: jax.Array | None = None  # (B, V) bool


def run_recurrence(
    params: RnnParams,
    plan,
    spins=None,
    uniforms=None,
    record=False,
    normalize=True,
    start=0,
    prefix=None,
    repeat=1,
) -> Forward:
    """Walk the sites in snake order for a batch.

    Exactly one of ``spins`` (evaluate given configurations) or
    ``uniforms`` (draw each spin as ``u >= p_up``) is given, both of shape
    ``(B, V)``. With ``start > 0`` the walk resumes at that site using
    ``prefix``, the per-site memories of an earlier pass; each prefix row
    is reused for ``repeat`` consecutive rows of the batch. Returned sums
    then only cover sites ``>= start``.

    ``normalize=False`` skips the per-step memory normalisation, giving
    the plain linear (or multilinear) recurrence. Not jitted itself.
    """
    drive = spins if spins is not None else uniforms
    batch = drive.shape[0]
    t = params.tensors
    vanilla = params.variant == "vanilla"
    chi = params.chi
    dtype = jnp.result_type(t["M"] if vanilla else t["v"])
    eta = None if vanilla else jnp.exp(t["log_eta"])
    V = len(plan)

    mem = {}

    def fetch(src):
        if src == ZERO:
            return None
        if src == ONES:
            return jnp.ones((batch, chi), dtype=dtype)
        if src not in mem:
            mem[src] = jnp.repeat(prefix[src], repeat, axis=0) if repeat > 1 else prefix[src]
        return mem[src]

    drawn = []
    rec = {k: [] for k in ("logp", "phase", "probs", "undefined")}
    logp = jnp.zeros(batch)
    phase = jnp.zeros(batch)
    deg_site = jnp.full(batch, -1, dtype=jnp.int32)
    for i in range(start, V):
        sx, sy = plan[i]
        site = params.site(i)
        cand = _candidates(site, fetch(sx), fetch(sy))
        cand = jnp.broadcast_to(cand, (batch, 2, chi))
        cr, ci = cand.real, cand.imag
        if vanilla:
            g = jnp.einsum("st,bpt->bps", site["gamma"], cand)
            weight = jnp.sum(cr * g.real + ci * g.imag, axis=-1)
        else:
            a2 = cr * cr + ci * ci
            weight = a2 @ eta[i]
        total = weight[:, 0] + weight[:, 1]
        alive = total > 0
        safe = jnp.where(alive, total, 1.0)
        p_up = jnp.where(alive, weight[:, 0] / safe, 0.0)
        p_down = jnp.where(alive, weight[:, 1] / safe, 0.0)
        if spins is None:
            s = (uniforms[:, i] >= p_up).astype(jnp.int32)
        else:
            s = spins[:, i].astype(jnp.int32)
        down = s == 1
        deg_site = jnp.where((deg_site < 0) & ~alive & (logp > -jnp.inf), i, deg_site)
        lp = jnp.log(jnp.where(down, p_down, p_up))
        h = jnp.where(down[:, None], cand[:, 1], cand[:, 0])
        if vanilla:
            # linear update: any positive rescaling leaves conditionals intact
            hn2 = jnp.sum(h.real**2 + h.imag**2, axis=-1)
            h = h * jax.lax.rsqrt(jnp.where(hn2 > 0, hn2, 1.0))[:, None]
        elif normalize:
            n2 = jnp.sum(a2, axis=(1, 2))
            h = h * jax.lax.rsqrt(jnp.where(n2 > 0, n2, 1.0))[:, None]

        local = jnp.zeros(batch)
        undefined = jnp.zeros(batch, dtype=bool)
        if vanilla:
            if i == V - 1 and params.phase_enabled:
                z = jnp.sum(h, axis=-1)
                local = jnp.angle(z)
                undefined = z == 0
        elif params.phase_enabled:
            w = jnp.where(down[:, None], site["w"][1], site["w"][0])
            c = jnp.where(down, site["c"][1], site["c"][0])
            z = jnp.sum(w * h, axis=-1) + c
            local = jnp.angle(z)
            undefined = z == 0
        logp = logp + lp
        phase = phase + local
        mem[i] = h
        drawn.append(s)
        if record:
            rec["logp"].append(lp)
            rec["phase"].append(local)
            rec["probs"].append(jnp.stack([p_up, p_down], axis=-1))
            rec["undefined"].append(undefined)

    spins_out = jnp.stack(drawn, axis=1)
    if not record:
        return Forward(spins_out, logp, phase, deg_site)
    return Forward(
        spins_out,
        logp,
        phase,
        deg_site,
        site_logp=jnp.stack(rec["logp"], axis=1),
        site_phases=jnp.stack(rec["phase"], axis=1),
        memories=tuple(mem[i] for i in range(start, V)),
        probs=jnp.stack(rec["probs"], axis=1),
        phase_undefined=jnp.stack(rec["undefined"], axis=1),
    )


@functools.partial(jax.jit, static_argnames=("plan", "record", "normalize"))
def forward(params: RnnParams, plan, spins, record=False, normalize=True) -> Forward:
    return run_recurrence(params, plan, spins=spins, record=record, normalize=normalize)


@functools.partial(jax.jit, static_argnames=("plan", "normalize"))
def log_psi(params: RnnParams, plan, spins, normalize=True):
    """Complex ``log psi`` for a batch of configurations."""
    out = run_recurrence(params, plan, spins=spins, normalize=normalize)
    return 0.5 * out.logp + 1j * out.phase


# ---------------------------------------------------------------------------
# public evaluation


@dataclass
class AmplitudeTrace:
    spins: np.ndarray
    probs: np.ndarray  # (V, 2) conditionals of both branches
    cond: np.ndarray  # (V,) conditional of the realised spin
    site_phases: np.ndarray
    log_abs: float
    phase: float  # wrapped to (-pi, pi]
    memories: np.ndarray  # (V, chi)
    phase_undefined: np.ndarray

    @property
    def amplitude(self) -> complex:
        return complex(np.exp(self.log_abs + 1j * self.phase))


def wrap_phase(phase):
    return np.angle(np.exp(1j * np.asarray(phase)))


def check_configs(spins, V):
    spins = np.atleast_2d(np.asarray(spins))
    if spins.shape[-1] != V:
        raise ValueError(f"configuration has {spins.shape[-1]} sites, lattice has {V}")
    if not np.all((spins == 0) | (spins == 1)):
        raise ValueError("spins must be 0 (up) or 1 (down)")
    return spins.astype(np.int32)


def raise_if_degenerate(degenerate_site, offset=0):
    bad = np.flatnonzero(np.asarray(degenerate_site) >= 0)
    if bad.size:
        b = int(bad[0])
        i = int(np.asarray(degenerate_site)[b])
        raise DegenerateStateError(
            f"degenerate state at site {i} (sample {b + offset})", site=i, sample=b + offset
        )


def _check_sizes(params, lattice):
    if params.V != lattice.V:
        raise ValueError(f"params have {params.V} sites, lattice has {lattice.V}")


def evaluate_batch(params: RnnParams, lattice: Lattice, spins, normalize=True) -> Forward:
    """Recorded forward pass for a batch; raises on degenerate prefixes."""
    _check_sizes(params, lattice)
    spins = check_configs(spins, lattice.V)
    plan = recurrence_plan(params, lattice)
    out = forward(params, plan, jnp.asarray(spins), record=True, normalize=normalize)
    raise_if_degenerate(out.degenerate_site)
    return out


def evaluate_amplitude(params: RnnParams, lattice: Lattice, spins, normalize=True) -> AmplitudeTrace:
    """Full trace for one configuration."""
    out = evaluate_batch(params, lattice, np.asarray(spins)[None], normalize=normalize)
    probs = np.asarray(out.probs[0])
    s = np.asarray(out.spins[0])
    cond = probs[np.arange(len(s)), s]
    with np.errstate(divide="ignore"):
        log_abs = 0.5 * float(np.sum(np.log(cond)))
    return AmplitudeTrace(
        spins=s,
        probs=probs,
        cond=cond,
        site_phases=np.asarray(out.site_phases[0]),
        log_abs=log_abs,
        phase=float(wrap_phase(np.sum(np.asarray(out.site_phases[0])))),
        memories=np.stack([np.asarray(m[0]) for m in out.memories]),
        phase_undefined=np.asarray(out.phase_undefined[0]),
    )


def log_amplitude(params: RnnParams, lattice: Lattice, spins, normalize=True, chunk=1 << 16) -> np.ndarray:
    """Complex ``log psi`` for a batch (``-inf`` real part where psi = 0)."""
    _check_sizes(params, lattice)
    spins = check_configs(spins, lattice.V)
    plan = recurrence_plan(params, lattice)
    parts = [
        np.asarray(log_psi(params, plan, jnp.asarray(spins[k : k + chunk]), normalize=normalize))
        for k in range(0, len(spins), chunk)
    ]
    return np.concatenate(parts)


def conditionals(params: RnnParams, lattice: Lattice, spins, normalize=True) -> np.ndarray:
    """``(B, V, 2)`` branch probabilities along each configuration."""
    return np.asarray(evaluate_batch(params, lattice, spins, normalize=normalize).probs)
