"""Long-running encoder service over stdio or TCP.

One JSON request per line in, one JSON response per line out; every response
carries the request id. Unknown methods and malformed payloads produce error
responses rather than killing the process.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys

from .backends import make_backend
from .protocol import ProtocolError, decode_tensor, encode_tensor


def handle_request(backend, request: dict) -> dict:
    rid = request.get("id")
    try:
        method = request["method"]
        params = request.get("params", {})
        if method == "info":
            result = backend.info()
        elif method == "embed_text":
            result = {"embedding": encode_tensor(backend.embed_text(params["text"]))}
        elif method == "embed_image":
            image = decode_tensor(params["image"])
            result = {"embedding": encode_tensor(backend.embed_image(image))}
        elif method == "image_vjp":
            image = decode_tensor(params["image"])
            if params.get("target") == "features":
                ups = [decode_tensor(u) for u in params["upstreams"]]
                grad = backend.features_vjp(image, ups)
            else:
                grad = backend.image_vjp(image, decode_tensor(params["upstream"]))
            result = {"grad": encode_tensor(grad)}
        elif method == "features":
            image = decode_tensor(params["image"])
            result = {"features": [encode_tensor(f)
                                   for f in backend.features(image)]}
        else:
            return {"id": rid, "error": f"unknown method {method!r}"}
        return {"id": rid, "result": result}
    except (KeyError, ValueError, ProtocolError) as e:
        return {"id": rid, "error": f"{type(e).__name__}: {e}"}


def _respond_line(backend, line: str) -> str:
    line = line.strip()
    if not line:
        return ""
    try:
        request = json.loads(line)
    except json.JSONDecodeError as e:
        return json.dumps({"id": None, "error": f"malformed JSON: {e}"}) + "\n"
    return json.dumps(handle_request(backend, request)) + "\n"


def serve_stdio(backend) -> None:
    for line in sys.stdin:
        out = _respond_line(backend, line)
        if out:
            sys.stdout.write(out)
            sys.stdout.flush()


def serve_tcp(backend, host: str, port: int) -> None:
    server = socket.socket()
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(4)
    print(f"listening on {host}:{server.getsockname()[1]}", file=sys.stderr)
    while True:
        conn, _ = server.accept()
        with conn, conn.makefile("rw", encoding="utf-8") as stream:
            for line in stream:
                out = _respond_line(backend, line)
                if out:
                    stream.write(out)
                    stream.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="radiart-bridge",
        description="encoder service speaking newline-delimited JSON")
    parser.add_argument("--backend", default="tiny",
                        help="tiny | clip | clip:<model-name>")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the tiny backend")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int,
                        help="serve over TCP instead of stdio")
    args = parser.parse_args(argv)
    try:
        backend = make_backend(args.backend, seed=args.seed)
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.port is not None:
        serve_tcp(backend, args.host, args.port)
    else:
        serve_stdio(backend)
    return 0


if __name__ == "__main__":
    sys.exit(main())
