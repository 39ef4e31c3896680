import numpy as np
import pytest

from deltanerf import io
from deltanerf.errors import ConfigError


def test_ppm_round_trip_16bit(tmp_path, rng):
    img = rng.uniform(size=(5, 7, 3))
    io.write_ppm(tmp_path / "a.ppm", img)
    back = io.read_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape and np.abs(back - img).max() <= 0.5 / 65535 + 1e-15


def test_pgm_header(tmp_path):
    io.write_pgm(tmp_path / "g.pgm", np.array([[0.0, 1.0]]))
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 1\n255\n") and raw[-2:] == bytes([0, 255])


def test_f64_round_trip_exact(tmp_path, rng):
    a = rng.normal(size=(3, 4, 2))
    io.write_f64(tmp_path / "a.f64", a)
    assert np.array_equal(io.read_f64(tmp_path / "a.f64"), a)
    assert (tmp_path / "a.f64").read_bytes().startswith(b"DNRF-F64\n3 3 4 2\n")


def test_checkpoint_layout(tmp_path):
    params = {"b": np.arange(3.0), "a": np.ones((2, 2))}
    io.save_checkpoint(tmp_path / "c", "field", {"w": 1}, params, {"j_old": 2})
    kind, arch, back, meta = io.load_checkpoint(tmp_path / "c")
    assert (kind, arch, meta) == ("field", {"w": 1}, {"j_old": 2})
    assert all(np.array_equal(back[k], params[k]) for k in params)
    raw = (tmp_path / "c").read_bytes()
    assert raw[:8] == b"DNRFCKPT"
    # blocks are stored in sorted name order: 'a' (32 bytes) then 'b'
    assert raw[-24:] == np.arange(3.0).astype("<f8").tobytes()


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world")
    with pytest.raises(ConfigError):
        io.load_checkpoint(tmp_path / "x")


def test_hash_sensitive_to_one_ulp():
    a = {"w": np.array([1.0, 2.0])}
    b = {"w": np.array([1.0, np.nextafter(2.0, 3.0)])}
    assert io.params_hash(a) != io.params_hash(b) and io.params_hash(a) == io.params_hash({"w": np.array([1.0, 2.0])})
