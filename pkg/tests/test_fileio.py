import struct

import numpy as np
import pytest

from crispdec.fileio import (
    IGNORE,
    FormatError,
    load_checkpoint,
    read_ctsr,
    read_pgm,
    save_checkpoint,
    write_ctsr,
    write_pgm,
)


def test_ctsr_roundtrip_f32_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((2, 3, 4)).astype(np.float32)
    p = tmp_path / "t.ctsr"
    write_ctsr(p, arr)
    back = read_ctsr(p)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_ctsr_header_layout(tmp_path):
    p = tmp_path / "t.ctsr"
    write_ctsr(p, np.zeros((3, 5), dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"CTSR"
    version, rank = struct.unpack("<II", raw[4:12])
    assert version == 1 and rank == 2
    assert struct.unpack("<2Q", raw[12:28]) == (3, 5)
    assert len(raw) == 28 + 4 * 15


def test_ctsr_scalar_rank0(tmp_path):
    p = tmp_path / "s.ctsr"
    write_ctsr(p, np.float32(2.5))
    back = read_ctsr(p)
    assert back.shape == () and back == np.float32(2.5)


def test_ctsr_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.ctsr"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError):
        read_ctsr(p)


def test_ctsr_bad_version_rejected(tmp_path):
    p = tmp_path / "v.ctsr"
    p.write_bytes(b"CTSR" + struct.pack("<II", 99, 0))
    with pytest.raises(FormatError):
        read_ctsr(p)


def test_ctsr_truncated_payload_rejected(tmp_path):
    p = tmp_path / "t.ctsr"
    write_ctsr(p, np.ones(10, dtype=np.float32))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_ctsr(p)


def test_pgm_roundtrip_with_ignore(tmp_path):
    lab = np.array([[0, 1, 2], [3, IGNORE, 0]], dtype=np.uint8)
    p = tmp_path / "m.pgm"
    write_pgm(p, lab)
    back = read_pgm(p)
    np.testing.assert_array_equal(back, lab)
    assert back.dtype == np.uint8


def test_pgm_header_is_p5(tmp_path):
    p = tmp_path / "m.pgm"
    write_pgm(p, np.zeros((2, 4), dtype=np.uint8))
    assert p.read_bytes().startswith(b"P5\n4 2\n255\n")


def test_pgm_rejects_3d():
    with pytest.raises(FormatError):
        write_pgm("/dev/null", np.zeros((2, 2, 2)))


def test_pgm_rejects_out_of_range():
    with pytest.raises(FormatError):
        write_pgm("/dev/null", np.array([[300]]))


def test_pgm_read_rejects_ascii_variant(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(FormatError):
        read_pgm(p)


def test_pgm_read_rejects_truncated(tmp_path):
    p = tmp_path / "t.pgm"
    write_pgm(p, np.zeros((4, 4), dtype=np.uint8))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_pgm(p)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    params = {"a.w": rng.standard_normal((2, 3)).astype(np.float32),
              "b.b": rng.standard_normal(4).astype(np.float32)}
    d = tmp_path / "ckpt"
    save_checkpoint(d, params, {"a.w": "weight", "b.b": "bias"})
    back = load_checkpoint(d)
    assert set(back) == set(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_checkpoint_manifest_lists_all_params(tmp_path):
    d = tmp_path / "ckpt"
    save_checkpoint(d, {"x": np.zeros(3, dtype=np.float32)})
    lines = (d / "manifest.txt").read_text().strip().splitlines()
    assert lines == ["x\t3\tparameter"]


def test_checkpoint_missing_manifest_rejected(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    d = tmp_path / "ckpt"
    save_checkpoint(d, {"x": np.zeros((2, 2), dtype=np.float32)})
    write_ctsr(d / "x.ctsr", np.zeros(4, dtype=np.float32))
    with pytest.raises(FormatError):
        load_checkpoint(d)
