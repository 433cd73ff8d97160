import numpy as np
import pytest

from radiart_bridge.protocol import ProtocolError, decode_tensor, encode_tensor


def test_f32_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    for shape in [(5,), (3, 4), (2, 2, 3), ()]:
        arr = rng.standard_normal(shape).astype(np.float32)
        back = decode_tensor(encode_tensor(arr))
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_special_values_survive():
    arr = np.array([0.0, -0.0, np.inf, -np.inf, np.float32(1e-45)],
                   dtype=np.float32)
    back = decode_tensor(encode_tensor(arr))
    assert back.tobytes() == arr.tobytes()


def test_shape_mismatch_rejected():
    doc = encode_tensor(np.zeros(3, dtype=np.float32))
    doc["shape"] = [4]
    with pytest.raises(ProtocolError):
        decode_tensor(doc)


def test_wrong_dtype_rejected():
    doc = encode_tensor(np.zeros(3, dtype=np.float32))
    doc["dtype"] = "f16"
    with pytest.raises(ProtocolError):
        decode_tensor(doc)
