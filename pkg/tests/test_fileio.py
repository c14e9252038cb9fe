"""File format round-trips and malformed-input rejection."""

import struct

import numpy as np
import pytest

from s2cassi import fileio as fio
from s2cassi.autodiff import Tensor
from s2cassi.network import ModelParams
from s2cassi.optics import CodedMask, HyperCube


def _cube(rng, h=4, w=4, c=3):
    return HyperCube(rng.random((h, w, c), dtype=np.float32))


class TestCubeFormat:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        cube = _cube(rng)
        path = str(tmp_path / "a.hsc")
        fio.write_cube(path, cube)
        back = fio.read_cube(path)
        assert back.data.dtype == np.float32
        assert np.array_equal(
            back.data.view(np.uint32), cube.data.view(np.uint32))

    def test_2x2x1_file_is_32_bytes(self, tmp_path):
        # 16-byte header + 4 floats
        path = str(tmp_path / "b.hsc")
        fio.write_cube(path, HyperCube(np.zeros((2, 2, 1), dtype=np.float32)))
        assert (tmp_path / "b.hsc").stat().st_size == 32

    def test_bad_magic_names_offset_zero(self, tmp_path):
        path = tmp_path / "c.hsc"
        path.write_bytes(b"XSC1" + struct.pack("<III", 1, 1, 1) + b"\0" * 4)
        with pytest.raises(fio.FileFormatError, match="offset 0"):
            fio.read_cube(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "d.hsc"
        path.write_bytes(b"HSC1" + struct.pack("<III", 2, 2, 1) + b"\0" * 8)
        with pytest.raises(fio.FileFormatError, match="payload"):
            fio.read_cube(str(path))

    def test_extra_bytes_rejected(self, tmp_path):
        path = tmp_path / "e.hsc"
        path.write_bytes(b"HSC1" + struct.pack("<III", 1, 1, 1) + b"\0" * 8)
        with pytest.raises(fio.FileFormatError):
            fio.read_cube(str(path))

    def test_zero_dimension_rejected(self, tmp_path):
        path = tmp_path / "f.hsc"
        path.write_bytes(b"HSC1" + struct.pack("<III", 0, 2, 1))
        with pytest.raises(fio.FileFormatError, match="dimension"):
            fio.read_cube(str(path))

    def test_index_order_is_row_major_channel_fastest(self, tmp_path):
        # value at (h, w, c) sits at payload slot (h*W + w)*C + c
        cube = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
        path = str(tmp_path / "g.hsc")
        fio.write_cube(path, HyperCube(cube))
        raw = (tmp_path / "g.hsc").read_bytes()
        vals = np.frombuffer(raw, dtype="<f4", offset=16)
        assert vals[(1 * 3 + 2) * 2 + 1] == cube[1, 2, 1]


class TestMaskFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        mask = CodedMask((rng.random((5, 7)) > 0.5).astype(np.float32))
        path = str(tmp_path / "m.msk")
        fio.write_mask(path, mask)
        back = fio.read_mask(path)
        assert np.array_equal(back.data, mask.data)
        assert (tmp_path / "m.msk").stat().st_size == 12 + 4 * 35

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "n.msk"
        path.write_bytes(b"MSKX" + struct.pack("<II", 1, 1) + b"\0" * 4)
        with pytest.raises(fio.FileFormatError, match="magic"):
            fio.read_mask(str(path))


def _toy_params(rng):
    params = ModelParams()
    params.add("extractor.w", Tensor(rng.standard_normal((3, 3, 2, 4)).astype(np.float32), requires_grad=True))
    params.add("scalarish", Tensor(np.float32(1.5), requires_grad=True))
    params.add("stage0.block0.ln1.g", Tensor(np.ones(4, dtype=np.float32), requires_grad=True))
    return params


class TestCheckpointFormat:
    def test_round_trip_bit_exact_and_ordered(self, tmp_path):
        rng = np.random.default_rng(2)
        params = _toy_params(rng)
        path = str(tmp_path / "p.ckpt")
        fio.write_checkpoint(path, params)
        back = fio.read_checkpoint(path)
        assert back.names() == params.names()
        for name, t in params.items():
            got = back[name]
            assert got.data.dtype == np.float32
            assert got.data.shape == t.data.shape
            assert np.array_equal(np.atleast_1d(got.data).view(np.uint32),
                                  np.atleast_1d(t.data).view(np.uint32))
            assert got.requires_grad

    def test_flipped_payload_byte_fails_crc(self, tmp_path):
        path = tmp_path / "q.ckpt"
        fio.write_checkpoint(str(path), _toy_params(np.random.default_rng(3)))
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(fio.FileFormatError, match="CRC"):
            fio.read_checkpoint(str(path))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "r.ckpt"
        fio.write_checkpoint(str(path), _toy_params(np.random.default_rng(4)))
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 99)
        body = bytes(raw[:-4])
        import zlib
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(fio.FileFormatError, match="version"):
            fio.read_checkpoint(str(path))

    def test_truncated_tensor_record(self, tmp_path):
        import zlib
        name = b"w"
        body = (b"S2CK" + struct.pack("<II", fio.CHECKPOINT_VERSION, 1)
                + struct.pack("<H", 1) + name + struct.pack("<B", 1)
                + struct.pack("<I", 4) + b"\0" * 8)  # promises 16 bytes
        path = tmp_path / "s.ckpt"
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(fio.FileFormatError, match="truncated"):
            fio.read_checkpoint(str(path))

    def test_duplicate_name_rejected(self, tmp_path):
        import zlib
        rec = (struct.pack("<H", 1) + b"w" + struct.pack("<B", 0)
               + struct.pack("<f", 1.0))
        body = b"S2CK" + struct.pack("<II", fio.CHECKPOINT_VERSION, 2) + rec + rec
        path = tmp_path / "t.ckpt"
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(fio.FileFormatError, match="duplicate"):
            fio.read_checkpoint(str(path))

    def test_rank0_survives(self, tmp_path):
        params = _toy_params(np.random.default_rng(5))
        path = str(tmp_path / "u.ckpt")
        fio.write_checkpoint(path, params)
        assert fio.read_checkpoint(path)["scalarish"].data.shape == ()


class TestPgm:
    def test_header_and_scaling(self, tmp_path):
        img = np.array([[0.0, 1.0], [2.0, 4.0]])
        path = tmp_path / "v.pgm"
        fio.write_pgm(str(path), img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        assert list(raw[-4:]) == [0, 64, 128, 255]
        assert (tmp_path / "v.pgm.max").read_text() == "4\n"

    def test_all_zero_map(self, tmp_path):
        path = tmp_path / "w.pgm"
        fio.write_pgm(str(path), np.zeros((2, 3)))
        raw = path.read_bytes()
        assert raw.endswith(b"\0" * 6)
        assert (tmp_path / "w.pgm.max").read_text() == "0\n"

    def test_rank_check(self, tmp_path):
        with pytest.raises(fio.FileFormatError):
            fio.write_pgm(str(tmp_path / "x.pgm"), np.zeros((2, 2, 2)))


class TestCsv:
    def test_formatting(self, tmp_path):
        path = tmp_path / "y.csv"
        fio.write_csv(str(path), ("a", "b", "c", "d"),
                      [(1, 0.123456789, True, "ME"),
                       (2, float("inf"), False, "MA")])
        assert path.read_text() == (
            "a,b,c,d\n1,0.123457,1,ME\n2,inf,0,MA\n")

    def test_rewrite_is_byte_identical(self, tmp_path):
        rows = [(i, np.float64(i) / 3.0, np.float32(i) * 0.1) for i in range(5)]
        p1, p2 = tmp_path / "z1.csv", tmp_path / "z2.csv"
        fio.write_csv(str(p1), ("i", "x", "y"), rows)
        fio.write_csv(str(p2), ("i", "x", "y"), rows)
        assert p1.read_bytes() == p2.read_bytes()
