"""Engine-side protocol tests against scripted mock servers (no real model)."""

import json
import socket
import threading
import textwrap

import numpy as np
import pytest

from radiart.bridge_client import (BridgeClient, BridgeProvider, decode_tensor,
                                   encode_tensor)
from radiart.errors import BridgeError, ValidationError


class TestTensorCodec:
    def test_f32_roundtrip_bit_exact(self):
        rng = np.random.default_rng(0)
        for shape in [(3,), (4, 5), (2, 3, 4), ()]:
            arr = rng.standard_normal(shape).astype(np.float32)
            back = decode_tensor(encode_tensor(arr))
            assert back.dtype == np.float32
            assert back.shape == arr.shape
            assert back.tobytes() == arr.tobytes()

    def test_f64_input_is_truncated_to_f32(self):
        arr = np.array([1.0 / 3.0], dtype=np.float64)
        back = decode_tensor(encode_tensor(arr))
        assert back[0] == np.float32(1.0 / 3.0)

    def test_shape_mismatch_detected(self):
        doc = encode_tensor(np.zeros(4, dtype=np.float32))
        doc["shape"] = [5]
        with pytest.raises(BridgeError):
            decode_tensor(doc)

    def test_unknown_dtype_rejected(self):
        doc = encode_tensor(np.zeros(2, dtype=np.float32))
        doc["dtype"] = "f64"
        with pytest.raises(BridgeError):
            decode_tensor(doc)


def stdio_endpoint(tmp_path, body: str) -> str:
    """Write a line-oriented mock server script; return its endpoint."""
    script = tmp_path / "mock_server.py"
    script.write_text(textwrap.dedent(body))
    return f"stdio:python3 {script}"


ECHO_SERVER = """
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        resp = {"id": req["id"], "result": {"echo": req["params"]}}
        sys.stdout.write(json.dumps(resp) + "\\n")
        sys.stdout.flush()
"""

STALE_ID_SERVER = """
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        # emit an unrelated (stale) response first, then the real one
        sys.stdout.write(json.dumps({"id": -99, "result": {}}) + "\\n")
        sys.stdout.write(json.dumps(
            {"id": req["id"], "result": {"ok": True}}) + "\\n")
        sys.stdout.flush()
"""

GARBAGE_SERVER = """
    import sys
    sys.stdin.readline()
    sys.stdout.write("this is not json{{{\\n")
    sys.stdout.flush()
    sys.stdin.read()
"""

SILENT_SERVER = """
    import sys, time
    sys.stdin.readline()
    time.sleep(30)
"""


class TestClientRoundtrip:
    def test_echo_tensor_byte_exact(self, tmp_path):
        client = BridgeClient(stdio_endpoint(tmp_path, ECHO_SERVER), timeout=10)
        try:
            arr = np.random.default_rng(1).standard_normal(17).astype(np.float32)
            result = client.roundtrip("embed_image", {"image": encode_tensor(arr)})
            back = decode_tensor(result["echo"]["image"])
            assert back.tobytes() == arr.tobytes()
        finally:
            client.close()

    def test_responses_matched_by_id(self, tmp_path):
        client = BridgeClient(stdio_endpoint(tmp_path, STALE_ID_SERVER), timeout=10)
        try:
            for _ in range(3):  # every call must skip the stale frame
                assert client.roundtrip("info", {}) == {"ok": True}
        finally:
            client.close()

    def test_malformed_json_is_protocol_error(self, tmp_path):
        client = BridgeClient(stdio_endpoint(tmp_path, GARBAGE_SERVER), timeout=10)
        try:
            with pytest.raises(BridgeError):
                client.roundtrip("info", {})
        finally:
            client.close()

    def test_timeout_raises_bridge_error(self, tmp_path):
        client = BridgeClient(stdio_endpoint(tmp_path, SILENT_SERVER), timeout=0.4)
        try:
            with pytest.raises(BridgeError, match="timed out"):
                client.roundtrip("info", {})
        finally:
            client.close()

    def test_error_response_surfaces(self, tmp_path):
        server = """
            import json, sys
            for line in sys.stdin:
                req = json.loads(line)
                sys.stdout.write(json.dumps(
                    {"id": req["id"], "error": "unknown method"}) + "\\n")
                sys.stdout.flush()
        """
        client = BridgeClient(stdio_endpoint(tmp_path, server), timeout=10)
        try:
            with pytest.raises(BridgeError, match="unknown method"):
                client.roundtrip("bogus", {})
        finally:
            client.close()

    def test_unreachable_tcp_is_bridge_error(self):
        with pytest.raises(BridgeError):
            BridgeClient("tcp:127.0.0.1:1", timeout=0.5)

    def test_bad_endpoint_is_validation_error(self):
        with pytest.raises(ValidationError):
            BridgeClient("carrier-pigeon:coop", timeout=1)


PROVIDER_SERVER = """
    import base64, json, sys
    import numpy as np

    DIM = 8

    def enc(arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        return {"shape": list(arr.shape), "dtype": "f32",
                "data": base64.b64encode(arr.tobytes()).decode()}

    def dec(doc):
        flat = np.frombuffer(base64.b64decode(doc["data"]), dtype="<f4")
        return flat.reshape(doc["shape"]).copy()

    def unit_from_text(text):
        v = np.array([float(len(w)) for w in text.split()][:DIM])
        v = np.pad(v, (0, DIM - len(v))) + 1.0
        return v / np.linalg.norm(v)

    for line in sys.stdin:
        req = json.loads(line)
        method, params = req["method"], req["params"]
        if method == "info":
            result = {"dim": DIM, "image_size": 4, "feature_layers": 2,
                      "variant": "mock"}
        elif method == "embed_text":
            result = {"embedding": enc(unit_from_text(params["text"]))}
        elif method == "embed_image":
            img = dec(params["image"])
            v = np.resize(img.mean(axis=(0, 1)), DIM) + 0.5
            result = {"embedding": enc(v / np.linalg.norm(v))}
        elif method == "image_vjp":
            img = dec(params["image"])
            if params.get("target") == "features":
                grad = np.zeros_like(img) + 0.25
            else:
                up = dec(params["upstream"])
                grad = np.zeros_like(img) + np.float32(up.sum()) * 0.01
            result = {"grad": enc(grad)}
        elif method == "features":
            img = dec(params["image"])
            result = {"features": [enc(img * 0.5), enc(img[:2, :2] * 2.0)]}
        else:
            sys.stdout.write(json.dumps(
                {"id": req["id"], "error": f"unknown method {method}"}) + "\\n")
            sys.stdout.flush()
            continue
        sys.stdout.write(json.dumps({"id": req["id"], "result": result}) + "\\n")
        sys.stdout.flush()
"""


class TestBridgeProvider:
    @pytest.fixture()
    def provider(self, tmp_path):
        p = BridgeProvider(stdio_endpoint(tmp_path, PROVIDER_SERVER), timeout=10)
        yield p
        p.close()

    def test_info_populates_caps(self, provider):
        assert provider.dim == 8
        assert provider.variant == "mock"
        assert {"text", "image", "image_vjp", "features"} <= provider.capabilities

    def test_text_deterministic_and_unit(self, provider):
        a = provider.embed_text("granite cliff face")
        b = provider.embed_text("granite cliff face")
        np.testing.assert_array_equal(a, b)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-5

    def test_image_roundtrip(self, provider):
        img = np.random.default_rng(0).uniform(size=(4, 4, 3))
        e = provider.embed_image(img)
        assert e.shape == (8,)

    def test_vjp_linearity_over_the_wire(self, provider):
        img = np.random.default_rng(1).uniform(size=(4, 4, 3))
        u = np.random.default_rng(2).standard_normal(8)
        g1 = provider.image_embed_vjp(img, u)
        g2 = provider.image_embed_vjp(img, 2.0 * u)
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-5)

    def test_feature_methods(self, provider):
        img = np.random.default_rng(3).uniform(size=(4, 4, 3)).astype(np.float32)
        feats = provider.features(img)
        assert len(feats) == 2
        np.testing.assert_allclose(feats[0], img * 0.5, atol=1e-7)
        grad = provider.features_vjp(img, [f * 0 for f in feats])
        assert grad.shape == img.shape


class TestTcpTransport:
    def test_tcp_roundtrip(self):
        server_sock = socket.socket()
        server_sock.bind(("127.0.0.1", 0))
        server_sock.listen(1)
        port = server_sock.getsockname()[1]

        def serve_once():
            conn, _ = server_sock.accept()
            buf = b""
            while b"\n" not in buf:
                buf += conn.recv(4096)
            req = json.loads(buf)
            conn.sendall(json.dumps(
                {"id": req["id"], "result": {"pong": req["params"]["n"]}}
            ).encode() + b"\n")
            conn.close()

        thread = threading.Thread(target=serve_once, daemon=True)
        thread.start()
        client = BridgeClient(f"tcp:127.0.0.1:{port}", timeout=5)
        try:
            assert client.roundtrip("info", {"n": 7}) == {"pong": 7}
        finally:
            client.close()
            server_sock.close()
