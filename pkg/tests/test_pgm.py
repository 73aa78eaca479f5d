"""PGM I/O: exact bytes, rounding convention, parse errors with offsets."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfbench.pgm import PGMParseError, read_pgm, write_pgm


class TestWrite:
    def test_two_by_two_exact_bytes(self):
        data = write_pgm(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert data == b"P5\n2 2\n255\n" + bytes([0x00, 0xFF, 0xFF, 0x00])

    def test_rounding_half_up(self):
        # 0.5/255 sits exactly on the half-step boundary and must go up.
        data = write_pgm(np.array([[0.5 / 255.0]]))
        assert data.endswith(bytes([1]))
        data = write_pgm(np.array([[1.49 / 255.0]]))
        assert data.endswith(bytes([1]))
        data = write_pgm(np.array([[1.5 / 255.0]]))
        assert data.endswith(bytes([2]))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            write_pgm(np.array([[1.2]]))
        with pytest.raises(ValueError):
            write_pgm(np.array([[-0.1]]))
        with pytest.raises(ValueError):
            write_pgm(np.zeros((2, 2, 2)))


class TestRoundTrip:
    def test_error_bound(self):
        rng = np.random.default_rng(3)
        x = rng.random((16, 16))
        back = read_pgm(write_pgm(x))
        assert np.max(np.abs(back - x)) <= 0.5 / 255.0 + 1e-12

    def test_write_read_write_idempotent(self):
        rng = np.random.default_rng(4)
        x = rng.random((8, 8))
        once = write_pgm(x)
        assert write_pgm(read_pgm(once)) == once

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        x = rng.random((h, w))
        back = read_pgm(write_pgm(x))
        assert back.shape == (h, w)
        assert np.max(np.abs(back - x)) <= 0.5 / 255.0 + 1e-12


class TestParseErrors:
    def test_bad_magic(self):
        with pytest.raises(PGMParseError) as ei:
            read_pgm(b"P6\n2 2\n255\n" + bytes(4))
        assert "byte 0" in str(ei.value)

    def test_truncated_payload_names_offset(self):
        data = write_pgm(np.zeros((4, 4)))
        with pytest.raises(PGMParseError) as ei:
            read_pgm(data[:-3])
        assert "truncated" in str(ei.value) and "byte" in str(ei.value)

    def test_truncated_header(self):
        with pytest.raises(PGMParseError):
            read_pgm(b"P5\n2 ")

    def test_nonnumeric_header(self):
        with pytest.raises(PGMParseError) as ei:
            read_pgm(b"P5\n2 x\n255\n" + bytes(4))
        assert "byte" in str(ei.value)

    def test_wrong_maxval(self):
        with pytest.raises(PGMParseError) as ei:
            read_pgm(b"P5\n2 2\n65535\n" + bytes(8))
        assert "maxval" in str(ei.value)

    def test_comment_in_header_tolerated(self):
        data = b"P5\n# made by hand\n2 2\n255\n" + bytes([0, 64, 128, 255])
        img = read_pgm(data)
        assert img.shape == (2, 2)
        assert img[1, 1] == 1.0
