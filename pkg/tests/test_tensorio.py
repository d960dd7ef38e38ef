import numpy as np
import pytest
from PIL import Image

from gags.errors import FormatError, MissingInputError
from gags.tensorio import (
    TENSOR_MAGIC,
    file_sha256,
    read_label_image,
    read_pgm,
    read_tensor,
    write_pgm16,
    write_tensor,
)


def test_float_tensor_is_stored_as_f32(tmp_path):
    data = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
    write_tensor(tmp_path / "a.tensor", data)
    back = read_tensor(tmp_path / "a.tensor")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, data.astype(np.float32))


def test_integer_tensor_is_stored_as_u32(tmp_path):
    data = np.array([[0, 7], [65536, 4294967295]], dtype=np.uint64)
    write_tensor(tmp_path / "ids.tensor", data)
    back = read_tensor(tmp_path / "ids.tensor")
    assert back.dtype == np.uint32
    np.testing.assert_array_equal(back, data)


def test_header_layout(tmp_path):
    write_tensor(tmp_path / "h.tensor", np.zeros((5, 2), dtype=np.float32))
    raw = (tmp_path / "h.tensor").read_bytes()
    assert raw[:8] == TENSOR_MAGIC
    assert raw[8] == 0 and raw[9] == 2
    assert len(raw) == 10 + 8 + 5 * 2 * 4


def test_bad_magic_is_rejected(tmp_path):
    (tmp_path / "x.tensor").write_bytes(b"NOTATENS" + bytes(10))
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "x.tensor")


def test_truncated_payload_is_rejected(tmp_path):
    write_tensor(tmp_path / "t.tensor", np.ones((4, 4), dtype=np.float32))
    raw = (tmp_path / "t.tensor").read_bytes()
    (tmp_path / "t.tensor").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "t.tensor")


def test_rank_and_sign_limits(tmp_path):
    with pytest.raises(FormatError):
        write_tensor(tmp_path / "r.tensor", np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(FormatError):
        write_tensor(tmp_path / "n.tensor", np.array([-1, 2]))


def test_missing_tensor(tmp_path):
    with pytest.raises(MissingInputError):
        read_tensor(tmp_path / "absent.tensor")


def test_pgm16_keeps_region_ids(tmp_path):
    ids = np.array([[0, 1, 2], [300, 65535, 4]], dtype=np.uint32)
    write_pgm16(tmp_path / "m.pgm", ids)
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), ids)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n3 2\n65535\n")


def test_pgm16_rejects_out_of_range(tmp_path):
    with pytest.raises(FormatError):
        write_pgm16(tmp_path / "bad.pgm", np.array([[70000]]))


def test_eight_bit_pgm_with_comment(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n# exported mask\n2 2\n255\n" + bytes([0, 1, 2, 255]))
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 1], [2, 255]])


def test_truncated_pgm(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n4 4\n65535\n" + bytes(6))
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "m.pgm")


def test_pgm_reader_rejects_other_formats(tmp_path):
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "m.png")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "m.png")
    with pytest.raises(MissingInputError):
        read_pgm(tmp_path / "absent.pgm")


def test_label_image_from_png(tmp_path):
    ids = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    Image.fromarray(ids).save(tmp_path / "m.png")
    np.testing.assert_array_equal(read_label_image(tmp_path / "m.png"), ids)


def test_rgb_png_is_not_a_label_image(tmp_path):
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(FormatError):
        read_label_image(tmp_path / "rgb.png")


def test_sha256_changes_with_content(tmp_path):
    (tmp_path / "a").write_bytes(b"one")
    (tmp_path / "b").write_bytes(b"two")
    assert file_sha256(tmp_path / "a") != file_sha256(tmp_path / "b")
    assert len(file_sha256(tmp_path / "a")) == 64
