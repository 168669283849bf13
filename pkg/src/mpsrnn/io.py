"""Checkpoint and tensor-container files, MPS import/export and config files.

Container layout (all integers little-endian)::

    MPSRNN 1\\n
    key=value\\n        (UTF-8 metadata, any number of lines)
    \\n                 (blank line ends the header)
    records: u32 name length, name bytes, u8 rank, rank x u64 dims,
             u8 dtype (0 = float64, 1 = complex128 as interleaved float64),
             row-major payload

Config files hold ``key = value`` lines; ``#`` starts a comment.
"""
from __future__ import annotations

import io as _io
import re
import struct
from pathlib import Path

import numpy as np

from mpsrnn.ansatz import VARIANTS, RnnParams
from mpsrnn.mapping import Mps

MAGIC = b"MPSRNN"
VERSION = 1

METADATA_KEYS = frozenset(
    {
        "kind",
        "variant",
        "lattice.kind",
        "lattice.L",
        "V",
        "chi",
        "chi_compressed",
        "phase_enabled",
        "seed",
        "step",
        "status",
        "source",
    }
)


class ContainerError(Exception):
    """Base class; ``code`` is a stable short identifier."""

    code = "E_CONTAINER"


class HeaderError(ContainerError):
    code = "E_HEADER"


class VersionError(ContainerError):
    code = "E_VERSION"


class PayloadError(ContainerError):
    code = "E_PAYLOAD"


class ShapeError(ContainerError):
    code = "E_SHAPE"


class MissingSiteError(ContainerError):
    code = "E_MISSING_SITE"


class ConfigError(ValueError):
    code = "E_CONFIG"


# ---------------------------------------------------------------------------
# raw container


def write_container(path, metadata: dict, tensors: dict) -> None:
    buf = _io.BytesIO()
    buf.write(f"MPSRNN {VERSION}\n".encode())
    for k, v in metadata.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v or not k:
            raise ValueError(f"metadata entry {k!r}={v!r} cannot be stored")
        buf.write(f"{k}={v}\n".encode())
    buf.write(b"\n")
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        cplx = np.iscomplexobj(arr)
        data = np.require(arr, dtype="<c16" if cplx else "<f8", requirements="C")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(struct.pack("<B", 1 if cplx else 0))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_container(path):
    """``(metadata, tensors)``; nothing is returned unless the file parses fully."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    first = blob[:nl] if nl >= 0 else blob
    m = re.fullmatch(rb"MPSRNN (\d+)", first)
    if not m:
        raise HeaderError(f"{path}: not an MPSRNN container")
    if int(m.group(1)) != VERSION:
        raise VersionError(f"{path}: format version {int(m.group(1))}, this build reads {VERSION}")
    end = blob.find(b"\n\n", nl)
    if end < 0:
        # an empty metadata block is just the blank line after the magic
        if blob[nl : nl + 2] == b"\n\n":
            end = nl
        else:
            raise HeaderError(f"{path}: metadata block is not terminated")
    metadata = {}
    for line in blob[nl + 1 : end].decode("utf-8", errors="strict").splitlines():
        if "=" not in line:
            raise HeaderError(f"{path}: malformed metadata line {line!r}")
        k, v = line.split("=", 1)
        metadata[k] = v
    pos = end + 2
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise PayloadError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in (0, 1):
            raise PayloadError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = take(count * (16 if tag else 8))
        arr = np.frombuffer(raw, dtype="<c16" if tag else "<f8").reshape(dims)
        if name in tensors:
            raise PayloadError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = arr.astype(np.complex128 if tag else np.float64)
    return metadata, tensors


# ---------------------------------------------------------------------------
# checkpoints


def _parse_bool(text):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(text)


def save_checkpoint(path, params: RnnParams, metadata: dict | None = None) -> None:
    p = params.to_numpy()
    meta = {
        "kind": "checkpoint",
        "variant": p.variant,
        "V": p.V,
        "chi": p.chi,
        "phase_enabled": str(p.phase_enabled).lower(),
    }
    if p.chi_compressed is not None:
        meta["chi_compressed"] = p.chi_compressed
    for k, v in (metadata or {}).items():
        meta[k] = v
    unknown = set(meta) - METADATA_KEYS
    if unknown:
        raise ValueError(f"unsupported metadata keys {sorted(unknown)}")
    tensors = {}
    for name in sorted(p.tensors):
        arr = p.tensors[name]
        tensors[name] = arr.real.astype(np.float64) if name == "log_eta" else arr.astype(np.complex128)
    write_container(path, meta, tensors)


def load_checkpoint(path):
    """``(params, metadata)`` with magic, version, shape and eta checks."""
    meta, tensors = read_container(path)
    unknown = set(meta) - METADATA_KEYS
    if unknown:
        raise VersionError(f"{path}: unknown metadata fields {sorted(unknown)}")
    if meta.get("kind") != "checkpoint":
        raise HeaderError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    variant = meta.get("variant")
    if variant not in VARIANTS:
        raise HeaderError(f"{path}: unknown variant {variant!r}")
    try:
        phase = _parse_bool(meta.get("phase_enabled", "true"))
        params = RnnParams(variant, tensors, phase)
        params.check()
    except ValueError as exc:
        raise ShapeError(f"{path}: {exc}") from None
    for key, value in (("V", params.V), ("chi", params.chi), ("chi_compressed", params.chi_compressed)):
        if key in meta and int(meta[key]) != value:
            raise ShapeError(f"{path}: metadata {key}={meta[key]} but tensors give {value}")
    return params, meta


# ---------------------------------------------------------------------------
# MPS files


def export_mps(path, mps: Mps, metadata: dict | None = None) -> None:
    tensors = {}
    for i, m in enumerate(mps.sites):
        for s in (0, 1):
            tensors[f"M_{i}_{s}"] = m[s]
    meta = {"kind": "mps", "V": mps.V}
    meta.update(metadata or {})
    write_container(path, meta, tensors)


def import_mps(path) -> Mps:
    meta, tensors = read_container(path)
    pattern = re.compile(r"M_(\d+)_([01])")
    found = {}
    for name, arr in tensors.items():
        m = pattern.fullmatch(name)
        if not m:
            raise PayloadError(f"{path}: unexpected tensor {name!r} in an MPS file")
        if arr.ndim != 2:
            raise ShapeError(f"{path}: {name} must be a matrix, has shape {arr.shape}")
        found[(int(m.group(1)), int(m.group(2)))] = arr
    if not found:
        raise MissingSiteError(f"{path}: no site tensors")
    V = int(meta.get("V", 1 + max(i for i, _ in found)))
    sites = []
    for i in range(V):
        for s in (0, 1):
            if (i, s) not in found:
                raise MissingSiteError(f"{path}: missing M_{i}_{s}")
        up, down = found[(i, 0)], found[(i, 1)]
        if up.shape != down.shape:
            raise ShapeError(f"{path}: M_{i}_0 and M_{i}_1 differ in shape")
        sites.append(np.stack([up, down]).astype(complex))
    extra = [k for k in found if k[0] >= V]
    if extra:
        raise PayloadError(f"{path}: site tensors beyond V={V}")
    try:
        return Mps(sites)
    except ValueError as exc:
        raise ShapeError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# config files

CONFIG_KEYS = {
    "lattice.kind": str,
    "lattice.L": int,
    "ansatz.variant": str,
    "ansatz.chi": int,
    "ansatz.phase_enabled": bool,
    "hamiltonian": str,
    "hamiltonian.marshall": bool,
    "hamiltonian.g": float,
    "vmc.batch_size": int,
    "vmc.lr_schedule": "schedule",
    "vmc.clip_norm": float,
    "vmc.steps": int,
    "vmc.seed": int,
    "vmc.eval_samples": int,
    "init.from": str,
    "init.noise_std": float,
}

CONFIG_DEFAULTS = {
    "lattice.kind": "square",
    "lattice.L": 4,
    "ansatz.variant": "oned",
    "ansatz.chi": 8,
    "hamiltonian": "afhm",
    "hamiltonian.marshall": True,
    "hamiltonian.g": 3.044,
    "vmc.batch_size": 1024,
    "vmc.clip_norm": 1.0,
    "vmc.seed": 0,
    "vmc.eval_samples": 10**6,
    "init.from": "random",
    "init.noise_std": 1e-7,
}


def parse_schedule(text: str) -> list[tuple[int, float]]:
    """``"10000:1e-2, 10000:1e-3"`` into ``[(10000, 0.01), (10000, 0.001)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        steps, _, rate = part.partition(":")
        out.append((int(steps), float(rate)))
    if not out:
        raise ValueError("empty schedule")
    return out


def parse_config(text: str) -> dict:
    """Typed settings with defaults filled in; unknown keys are errors."""
    cfg = dict(CONFIG_DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        kind = CONFIG_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if kind == "schedule":
                cfg[key] = parse_schedule(value)
            elif kind is bool:
                cfg[key] = _parse_bool(value)
            else:
                cfg[key] = kind(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    if cfg["hamiltonian"] not in ("afhm", "tfim"):
        raise ConfigError(f"hamiltonian must be afhm or tfim, got {cfg['hamiltonian']!r}")
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
