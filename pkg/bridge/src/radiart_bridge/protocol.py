"""Wire format: newline-delimited JSON with base64 little-endian f32 tensors.

Requests: {"id", "method", "params"}; responses: {"id", "result"} or
{"id", "error"}. Methods: info, embed_text, embed_image, image_vjp (with a
"target" of "embedding" or "features"), features.
"""

from __future__ import annotations

import base64

import numpy as np


class ProtocolError(ValueError):
    pass


def encode_tensor(arr) -> dict:
    arr = np.asarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "dtype": "f32",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_tensor(doc: dict) -> np.ndarray:
    if not isinstance(doc, dict) or doc.get("dtype") != "f32":
        raise ProtocolError(f"expected an f32 tensor, got {doc!r:.80}")
    flat = np.frombuffer(base64.b64decode(doc["data"]), dtype="<f4")
    shape = tuple(doc["shape"])
    if flat.size != int(np.prod(shape)):
        raise ProtocolError("tensor payload does not match declared shape")
    return flat.reshape(shape).copy()
