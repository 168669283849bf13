import numpy as np
import pytest

from mpsrnn.ansatz import log_amplitude, random_params
from mpsrnn.io import (
    ConfigError,
    HeaderError,
    MissingSiteError,
    PayloadError,
    ShapeError,
    VersionError,
    export_mps,
    import_mps,
    load_checkpoint,
    parse_config,
    parse_schedule,
    read_container,
    save_checkpoint,
    write_container,
)
from mpsrnn.lattice import Lattice
from mpsrnn.mapping import random_mps


@pytest.mark.parametrize("variant", ["vanilla", "oned", "twod", "tensor", "compressed"])
def test_checkpoint_roundtrip_is_bitwise(tmp_path, variant):
    p = random_params(variant, 4, 3, seed=5, phase_enabled=variant != "twod")
    path = tmp_path / "ck.bin"
    save_checkpoint(path, p, {"lattice.kind": "square", "lattice.L": 2, "step": 7})
    q, meta = load_checkpoint(path)
    assert q.variant == variant and q.phase_enabled == p.phase_enabled
    assert meta["step"] == "7" and meta["lattice.L"] == "2"
    for k in p.tensors:
        assert np.array_equal(np.asarray(p.tensors[k]), q.tensors[k])
    lat = Lattice("square", 2)
    assert np.array_equal(log_amplitude(p, lat, [[0, 1, 1, 0]]), log_amplitude(q, lat, [[0, 1, 1, 0]]))


def test_unknown_metadata_rejected(tmp_path):
    p = random_params("oned", 3, 2)
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "a", p, {"colour": "blue"})
    write_container(tmp_path / "b", {"kind": "checkpoint", "variant": "oned", "future": "x"}, dict(p.to_numpy().tensors))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "b")


def test_corrupt_files(tmp_path):
    p = random_params("twod", 4, 2)
    good = tmp_path / "good"
    save_checkpoint(good, p)
    blob = good.read_bytes()
    cases = {
        "magic": (b"NOTME 1" + blob[8:], HeaderError),
        "version": (blob.replace(b"MPSRNN 1", b"MPSRNN 9", 1), VersionError),
        "truncated": (blob[:-5], PayloadError),
    }
    for name, (data, err) in cases.items():
        f = tmp_path / name
        f.write_bytes(data)
        with pytest.raises(err):
            load_checkpoint(f)
    t = dict(p.to_numpy().tensors)
    t["Mx"] = t["Mx"][:, :, :1]
    write_container(tmp_path / "shape", {"kind": "checkpoint", "variant": "twod"}, t)
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "shape")
    write_container(tmp_path / "mps", {"kind": "mps"}, {})
    with pytest.raises(HeaderError):
        load_checkpoint(tmp_path / "mps")


def test_container_preserves_dtypes(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1 + 2j, -3j]), "s": np.array(4.0)}
    write_container(tmp_path / "c", {"x": "1"}, t)
    meta, out = read_container(tmp_path / "c")
    assert meta == {"x": "1"}
    for k in t:
        assert out[k].dtype == t[k].dtype and np.array_equal(out[k], t[k])


def test_mps_roundtrip_and_missing_site(tmp_path):
    mps = random_mps(5, 3, seed=2)
    export_mps(tmp_path / "m", mps)
    back = import_mps(tmp_path / "m")
    np.testing.assert_array_equal(back.statevector(), mps.statevector())
    tensors = {f"M_{i}_{s}": mps.sites[i][s] for i in range(5) for s in (0, 1) if (i, s) != (3, 1)}
    write_container(tmp_path / "bad", {"kind": "mps", "V": 5}, tensors)
    with pytest.raises(MissingSiteError):
        import_mps(tmp_path / "bad")


def test_config_parsing():
    cfg = parse_config(
        """
        # a comment
        lattice.kind = triangular
        lattice.L = 3
        ansatz.phase_enabled = false
        vmc.lr_schedule = 100:1e-2, 200:1e-3   # trailing comment
        """
    )
    assert cfg["lattice.kind"] == "triangular" and cfg["lattice.L"] == 3
    assert cfg["ansatz.phase_enabled"] is False
    assert cfg["vmc.lr_schedule"] == [(100, 1e-2), (200, 1e-3)]
    assert cfg["hamiltonian.g"] == 3.044 and cfg["vmc.batch_size"] == 1024
    assert parse_schedule("5:0.1") == [(5, 0.1)]
    for bad in ("nonsense = 1", "lattice.L = four", "hamiltonian = xy", "just words"):
        with pytest.raises(ConfigError):
            parse_config(bad)
