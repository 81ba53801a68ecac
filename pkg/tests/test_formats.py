import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pmf
from dfguide.formats import (
    FormatError,
    load_container,
    panel_grid,
    read_pgm,
    read_pmf_csv,
    read_samples_csv,
    save_container,
    to_u16,
    write_json,
    write_pgm,
    write_pmf_csv,
    write_samples_csv,
)
from dfguide.statespace import StateSpace


def test_pmf_csv_roundtrip_exact(tmp_path, rng):
    sp = StateSpace(2, 5)
    p = random_pmf(sp, rng, zero_frac=0.4)
    write_pmf_csv(tmp_path / "p.csv", p)
    q = read_pmf_csv(tmp_path / "p.csv", sp)
    assert np.array_equal(p.weights, q.weights)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "index,s0,s1,weight"


def test_pmf_csv_wrong_space(tmp_path, rng):
    write_pmf_csv(tmp_path / "p.csv", random_pmf(StateSpace(2, 3), rng))
    with pytest.raises(FormatError):
        read_pmf_csv(tmp_path / "p.csv", StateSpace(3, 3))


def test_samples_csv_roundtrip(tmp_path, rng):
    x = rng.integers(0, 34, (100, 2))
    write_samples_csv(tmp_path / "s.csv", x)
    assert np.array_equal(read_samples_csv(tmp_path / "s.csv"), x)
    assert (tmp_path / "s.csv").read_text().startswith("chain_id,d_0,d_1\n0,")


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_pgm_roundtrip(h, w, seed):
    import tempfile, os

    img = np.random.default_rng(seed).integers(0, 65536, (h, w)).astype(np.uint16)
    with tempfile.TemporaryDirectory() as d:
        f = os.path.join(d, "a.pgm")
        write_pgm(f, img, normalize=False)
        assert np.array_equal(read_pgm(f), img)


def test_pgm_header_and_normalization(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0.0, 0.5], [1.0, 0.25]]))
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n2 2\n65535\n")
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 32768], [65535, 16384]]
    assert to_u16(np.zeros((2, 2))).max() == 0


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "b.pgm")


def test_panel_grid_layout():
    a = np.ones((3, 3))
    out = panel_grid([[a, None], [a, a]], pad=1)
    assert out.shape == (3 * 2 + 3, 3 * 2 + 3)
    assert out[1:4, 1:4].min() == 65535
    assert out[1:4, 5:8].max() == 0


def test_container_roundtrip(tmp_path, rng):
    arr = rng.standard_normal((3, 4, 5))
    save_container(tmp_path / "m.dfmp", "mlp", arr, {"k": 1})
    tag, back, side = load_container(tmp_path / "m.dfmp")
    assert tag == "mlp" and side == {"k": 1}
    assert np.array_equal(back, arr)
    raw = (tmp_path / "m.dfmp").read_bytes()
    assert raw[:4] == b"DFMP"


def test_container_bad_magic_and_version(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        load_container(tmp_path / "x")
    (tmp_path / "y").write_bytes(b"DFMP" + (9).to_bytes(4, "little") + bytes(20))
    with pytest.raises(FormatError):
        load_container(tmp_path / "y")


def test_json_numpy_values(tmp_path):
    write_json(tmp_path / "a.json", {"b": np.float64(0.5), "a": np.arange(2), "c": np.int64(3)})
    assert (tmp_path / "a.json").read_text() == '{\n  "a": [\n    0,\n    1\n  ],\n  "b": 0.5,\n  "c": 3\n}\n'
