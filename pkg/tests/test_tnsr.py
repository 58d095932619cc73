import io
import struct

import numpy as np
import pytest

from progdit import tnsr


@pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.float64, 1)])
def test_header_layout(dtype, code):
    arr = np.arange(6, dtype=dtype).reshape(2, 3)
    buf = io.BytesIO()
    tnsr.write_blob(buf, arr)
    raw = buf.getvalue()
    assert raw[:5] == b"TNSR1"
    assert raw[5] == code and raw[6] == 2
    assert struct.unpack("<2Q", raw[7:23]) == (2, 3)
    assert raw[23:] == arr.astype(np.dtype(dtype).newbyteorder("<")).tobytes()


def test_roundtrip_file(tmp_path, rng):
    arr = rng.standard_normal((3, 1, 4))
    tnsr.save(tmp_path / "a.tnsr", arr)
    back = tnsr.load(tmp_path / "a.tnsr")
    assert back.dtype == np.float64 and np.array_equal(back, arr)


def test_scalar_rank_zero(tmp_path):
    tnsr.save(tmp_path / "s.tnsr", np.float64(2.5))
    assert tnsr.load(tmp_path / "s.tnsr").shape == ()


def test_bad_magic_and_truncation():
    with pytest.raises(tnsr.FormatError):
        tnsr.read_blob(io.BytesIO(b"NOPE1\x01\x00"))
    buf = io.BytesIO()
    tnsr.write_blob(buf, np.ones(4))
    with pytest.raises(tnsr.FormatError):
        tnsr.read_blob(io.BytesIO(buf.getvalue()[:-3]))


def test_table_roundtrip(tmp_path, rng):
    arrays = {"blocks.0.w": rng.standard_normal((2, 2)), "b": np.zeros(3, dtype=np.float32)}
    tnsr.save_table(tmp_path / "t", arrays, {"step": 7})
    back, meta = tnsr.load_table(tmp_path / "t")
    assert meta["step"] == 7
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])
