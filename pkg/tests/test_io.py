import numpy as np
import pytest

from csmunet import io


def test_tnsr_round_trip_is_bit_exact(tmp_path, rng):
    a = rng.standard_normal((3, 4, 5)).astype(np.float32)
    io.write_tnsr(tmp_path / "a.tnsr", a)
    b = io.read_tnsr(tmp_path / "a.tnsr")
    assert b.dtype == np.float32 and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_tnsr_layout(tmp_path):
    io.write_tnsr(tmp_path / "x.tnsr", np.array([[1.0, 2.0]], dtype=np.float32))
    raw = (tmp_path / "x.tnsr").read_bytes()
    assert raw[:5] == b"TNSR1"
    assert raw[5:9] == (2).to_bytes(4, "little")
    assert raw[9:17] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[17:], "<f4").tolist() == [1.0, 2.0]


def test_tnsr_scalar(tmp_path):
    io.write_tnsr(tmp_path / "s.tnsr", np.float32(2.5))
    assert io.read_tnsr(tmp_path / "s.tnsr").shape == ()


def test_tnsr_bad_magic(tmp_path):
    (tmp_path / "bad.tnsr").write_bytes(b"NOPE!" + bytes(8))
    with pytest.raises(io.FormatError):
        io.read_tnsr(tmp_path / "bad.tnsr")


def test_tnsr_truncated(tmp_path):
    io.write_tnsr(tmp_path / "t.tnsr", np.ones((4, 4), np.float32))
    data = (tmp_path / "t.tnsr").read_bytes()
    (tmp_path / "t.tnsr").write_bytes(data[:-3])
    with pytest.raises(io.FormatError):
        io.read_tnsr(tmp_path / "t.tnsr")


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9)).astype(np.uint8)
    io.write_pgm(tmp_path / "i.pgm", img)
    assert (tmp_path / "i.pgm").read_bytes().startswith(b"P5")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "i.pgm"), img)


def test_to_gray8_range():
    out = io.to_gray8(np.array([0.0, 0.5, 1.0, 2.0, -1.0]))
    assert out.tolist() == [0, 128, 255, 255, 0]


def test_parse_config_comments_and_dotted_keys():
    cfg = io.parse_config("# comment\nbasm.modulation = off  # trailing\n\ncmsa.groups=8\n")
    assert cfg == {"basm.modulation": "off", "cmsa.groups": "8"}


def test_parse_config_rejects_garbage():
    with pytest.raises(io.FormatError):
        io.parse_config("this line has no equals sign\n")


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((2, 3)).astype(np.float32),
              "b": np.asarray(1.5, np.float32)}
    io.save_checkpoint(tmp_path / "ck", params)
    names = io.read_manifest(tmp_path / "ck")
    assert set(names) == set(params)
    back = io.load_checkpoint(tmp_path / "ck")
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
