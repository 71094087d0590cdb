"""Binary tensor and archive formats."""

import struct

import numpy as np
import pytest

from mtda.rng import SplitMix64
from mtda.tensorio import (
    FormatError,
    read_archive,
    read_tensor,
    write_archive,
    write_tensor,
)


def test_tensor_roundtrip_bitwise(tmp_path):
    rng = SplitMix64(1)
    a = rng.normal(24).reshape(2, 3, 4)
    path = tmp_path / "t.bin"
    write_tensor(path, a)
    back = read_tensor(path)
    assert back.shape == (2, 3, 4)
    assert (back == a).all()


def test_tensor_header_layout(tmp_path):
    path = tmp_path / "t.bin"
    write_tensor(path, np.array([[1.0, 2.0]]))
    blob = path.read_bytes()
    assert blob[:8] == b"ADASTNSR"
    assert struct.unpack_from("<I", blob, 8)[0] == 2          # rank
    assert struct.unpack_from("<II", blob, 12) == (1, 2)      # dims
    assert np.frombuffer(blob[20:], dtype="<f8").tolist() == [1.0, 2.0]


def test_bad_magic_names_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(FormatError, match="bad.bin"):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.bin"
    write_tensor(path, np.zeros(4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.bin"
    write_tensor(path, np.zeros(2))
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(path)


def test_archive_roundtrip_and_manifest(tmp_path):
    rng = SplitMix64(2)
    named = {"enc.w": rng.normal(12).reshape(3, 4), "enc.b": rng.normal(3)}
    path = tmp_path / "model.bin"
    write_archive(path, named)
    back = read_archive(path)
    assert set(back) == set(named)
    for k in named:
        assert (back[k] == named[k]).all()
    manifest = (tmp_path / "model.bin.manifest").read_text()
    assert "enc.w\t3x4" in manifest
    assert "enc.b\t3" in manifest


def test_archive_bad_magic(tmp_path):
    path = tmp_path / "a.bin"
    path.write_bytes(b"WRONG!!!" + b"\x00" * 8)
    with pytest.raises(FormatError, match="archive magic"):
        read_archive(path)
