"""Client for the external encoder service (newline-delimited JSON).

Requests are {"id", "method", "params"}; responses echo the id and carry
either "result" or "error". Tensors travel as {"shape", "dtype": "f32",
"data": <base64 little-endian>}, which round-trips float32 bit-exactly.
One request is in flight at a time, but responses are still matched by id
so a pipelining server cannot confuse the client.
"""

from __future__ import annotations

import base64
import json
import os
import selectors
import shlex
import socket
import subprocess
import time

import numpy as np

from .embedding import EmbeddingProvider
from .errors import BridgeError, ValidationError


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "dtype": "f32",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_tensor(doc: dict) -> np.ndarray:
    if doc.get("dtype") != "f32":
        raise BridgeError(f"unsupported tensor dtype {doc.get('dtype')!r}")
    raw = base64.b64decode(doc["data"])
    flat = np.frombuffer(raw, dtype="<f4")
    shape = tuple(doc["shape"])
    if flat.size != int(np.prod(shape)):
        raise BridgeError("tensor payload size does not match shape")
    return flat.reshape(shape).copy()


class _StdioTransport:
    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        os.set_blocking(self.proc.stdout.fileno(), False)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = b""

    def send(self, line: bytes) -> None:
        try:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BridgeError(f"bridge process not accepting requests: {e}") from e

    def readline(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeError("timed out waiting for bridge response")
            if not self._sel.select(timeout=remaining):
                continue
            chunk = self.proc.stdout.read(65536)
            if chunk is None:
                continue
            if chunk == b"":
                raise BridgeError("bridge process closed its output")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        try:
            self.proc.stdin.close()
            self.proc.terminate()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise BridgeError(f"cannot reach bridge at {host}:{port}: {e}") from e
        self._buf = b""

    def send(self, line: bytes) -> None:
        try:
            self.sock.sendall(line)
        except OSError as e:
            raise BridgeError(f"bridge connection lost: {e}") from e

    def readline(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeError("timed out waiting for bridge response")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                raise BridgeError("timed out waiting for bridge response")
            except OSError as e:
                raise BridgeError(f"bridge connection lost: {e}") from e
            if chunk == b"":
                raise BridgeError("bridge closed the connection")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def open_transport(endpoint: str, timeout: float):
    kind, _, rest = endpoint.partition(":")
    if kind == "stdio":
        if not rest:
            raise ValidationError("stdio endpoint needs a command")
        return _StdioTransport(rest)
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValidationError(f"bad tcp endpoint {endpoint!r}")
        return _TcpTransport(host, int(port), timeout)
    raise ValidationError(f"unknown bridge endpoint {endpoint!r}")


class BridgeClient:
    """Issues protocol requests and matches responses by id."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.timeout = timeout
        self._transport = open_transport(endpoint, timeout)
        self._next_id = 0

    def roundtrip(self, method: str, params: dict) -> dict:
        self._next_id += 1
        rid = self._next_id
        line = json.dumps({"id": rid, "method": method, "params": params})
        self._transport.send(line.encode() + b"\n")
        deadline = time.monotonic() + self.timeout
        while True:
            raw = self._transport.readline(deadline)
            if not raw.strip():
                continue
            try:
                msg = json.loads(raw)
            except json.JSONDecodeError as e:
                raise BridgeError(f"bridge sent malformed JSON: {e}") from e
            if msg.get("id") != rid:
                continue  # stale or pipelined response for someone else
            if "error" in msg:
                raise BridgeError(f"bridge error: {msg['error']}")
            if "result" not in msg:
                raise BridgeError("bridge response missing result")
            return msg["result"]

    def close(self) -> None:
        self._transport.close()


class BridgeProvider(EmbeddingProvider):
    """Embedding provider backed by a remote encoder process."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.name = f"bridge:{endpoint}"
        self.client = BridgeClient(endpoint, timeout=timeout)
        info = self.client.roundtrip("info", {})
        self.dim = int(info["dim"])
        self.image_size = int(info.get("image_size", 0))
        self.feature_layers = int(info.get("feature_layers", 0))
        self.variant = info.get("variant", "unknown")
        caps = {"text", "image", "image_vjp"}
        if self.feature_layers:
            caps.add("features")
        self.capabilities = frozenset(caps)

    def embed_text(self, text: str) -> np.ndarray:
        result = self.client.roundtrip("embed_text", {"text": text})
        return decode_tensor(result["embedding"]).astype(np.float64)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        result = self.client.roundtrip("embed_image", {"image": encode_tensor(image)})
        return decode_tensor(result["embedding"]).astype(np.float64)

    def image_embed_vjp(self, image: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        result = self.client.roundtrip("image_vjp", {
            "image": encode_tensor(image),
            "upstream": encode_tensor(upstream),
            "target": "embedding",
        })
        return decode_tensor(result["grad"]).astype(np.float64)

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        result = self.client.roundtrip("features", {"image": encode_tensor(image)})
        return [decode_tensor(t).astype(np.float64) for t in result["features"]]

    def features_vjp(self, image: np.ndarray,
                     upstreams: list[np.ndarray]) -> np.ndarray:
        result = self.client.roundtrip("image_vjp", {
            "image": encode_tensor(image),
            "upstreams": [encode_tensor(u) for u in upstreams],
            "target": "features",
        })
        return decode_tensor(result["grad"]).astype(np.float64)

    def close(self) -> None:
        self.client.close()
