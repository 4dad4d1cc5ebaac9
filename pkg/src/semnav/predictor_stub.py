"""Loopback predictor stub for protocol tests: `python -m semnav.predictor_stub`.

Speaks the full wire protocol and answers every request with constant
grids. The --malformed flag deliberately breaks the response in a chosen
way so clients' validation paths can be exercised.
"""

from __future__ import annotations

import argparse
import socket
import sys

import numpy as np

from . import protocol
from .mapping import LOCAL_SIZE


def _response(value: float, malformed: str | None) -> dict:
    shape = (1, LOCAL_SIZE, LOCAL_SIZE)
    nav = np.full(shape, value, dtype=np.float32)
    occ = np.zeros(shape, dtype=np.float32)
    if malformed == "shape":
        nav = nav[:, :, :-1]
    elif malformed == "range":
        nav = nav + 2.0
    elif malformed == "type":
        return {"type": "bogus"}
    return {"type": "costmap", "nav": protocol.encode_tensor(nav), "occ": protocol.encode_tensor(occ)}


def serve(channel: protocol.LineChannel, value: float, malformed: str | None) -> None:
    first = channel.recv(None)
    if first.get("type") != "hello" or first.get("version") != protocol.PROTOCOL_VERSION:
        channel.send({"type": "error", "message": "version mismatch"})
        return
    channel.send(protocol.hello_message())
    while True:
        try:
            message = channel.recv(None)
        except ConnectionError:
            return
        if message.get("type") != "predict":
            channel.send({"type": "error", "message": f"unexpected {message.get('type')!r}"})
            continue
        channel.send(_response(value, malformed))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--value", type=float, default=0.5, help="constant nav-cost value")
    parser.add_argument("--malformed", choices=("shape", "range", "type"), default=None)
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT",
                        help="serve one connection on a TCP port instead of stdio")
    args = parser.parse_args(argv)

    if args.tcp is not None:
        server = socket.create_server(("127.0.0.1", args.tcp))
        conn, _ = server.accept()
        channel = protocol.channel_for_socket(conn)
    else:
        channel = protocol.LineChannel(sys.stdin.fileno(), sys.stdout.buffer)
    try:
        serve(channel, args.value, args.malformed)
    except (ConnectionError, KeyboardInterrupt):
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
