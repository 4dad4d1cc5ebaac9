"""Newline-delimited JSON wire protocol for out-of-process cost-map predictors.

Framing: one JSON object per line over a byte stream (the stdio of a
spawned predictor process, or a TCP socket). Tensors travel as
{"shape": [c, h, w], "dtype": "f32le", "data": "<base64>"} with the
payload holding row-major little-endian float32 values.

Messages:
  handshake  {"type": "hello", "version": 1}            (both directions)
  request    {"type": "predict", "episode": int, "step": int,
              "target": int, "orientation_bin": int,
              "local": T, "global": T,
              "rays": {"depth": [f32...], "class": [int...]}}
  response   {"type": "costmap", "nav": T, "occ": T}    (shapes [1, 140, 140])
  error      {"type": "error", "message": str}
"""

from __future__ import annotations

import base64
import json
import os
import select
import socket
import subprocess

import numpy as np

PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    """Malformed, out-of-contract, or timed-out predictor traffic."""


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "f32le",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(obj: dict, expect_shape: tuple[int, ...] | None = None) -> np.ndarray:
    if not isinstance(obj, dict) or set(obj) < {"shape", "dtype", "data"}:
        raise ProtocolError("tensor message missing shape/dtype/data")
    if obj["dtype"] != "f32le":
        raise ProtocolError(f"unsupported tensor dtype {obj['dtype']!r}")
    shape = tuple(int(d) for d in obj["shape"])
    if expect_shape is not None and shape != tuple(expect_shape):
        raise ProtocolError(f"tensor shape {shape} != expected {tuple(expect_shape)}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
    except Exception as exc:
        raise ProtocolError(f"undecodable tensor payload: {exc}") from exc
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * count:
        raise ProtocolError(f"tensor payload is {len(raw)} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def hello_message() -> dict:
    return {"type": "hello", "version": PROTOCOL_VERSION}


class LineChannel:
    """One JSON message per line over a pair of byte streams."""

    def __init__(self, read_fd: int, write_fileobj):
        self._read_fd = read_fd
        self._write = write_fileobj
        self._buffer = b""

    def send(self, message: dict) -> None:
        data = (json.dumps(message, separators=(",", ":")) + "\n").encode("utf-8")
        try:
            self._write.write(data)
            self._write.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ConnectionError(f"stream closed while sending: {exc}") from exc

    def recv(self, timeout: float | None = None) -> dict:
        while b"\n" not in self._buffer:
            if timeout is not None:
                ready, _, _ = select.select([self._read_fd], [], [], timeout)
                if not ready:
                    raise ProtocolError(f"timed out after {timeout}s waiting for a message")
            chunk = os.read(self._read_fd, 1 << 16)
            if not chunk:
                raise ConnectionError("stream closed while receiving")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        try:
            message = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"undecodable message: {exc}") from exc
        if not isinstance(message, dict) or "type" not in message:
            raise ProtocolError("message is not an object with a 'type' field")
        return message


def channel_for_subprocess(proc: subprocess.Popen) -> LineChannel:
    return LineChannel(proc.stdout.fileno(), proc.stdin)


def channel_for_socket(sock: socket.socket) -> LineChannel:
    return LineChannel(sock.fileno(), sock.makefile("wb"))


def handshake(channel: LineChannel, timeout: float | None = 5.0) -> None:
    """Exchange hello messages; raises ProtocolError on version mismatch."""
    channel.send(hello_message())
    reply = channel.recv(timeout)
    if reply.get("type") != "hello":
        raise ProtocolError(f"expected hello, got {reply.get('type')!r}")
    if reply.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol version mismatch: peer {reply.get('version')!r}, "
            f"local {PROTOCOL_VERSION}"
        )
