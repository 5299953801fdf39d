#!/usr/bin/env python3
"""Interactive-style walkthrough: connect, get workers, factorize, fetch.

Mirrors the notebook flow: start a session against a gateway, request three
workers, load testlib, push a random 1000x1000 array, run a rank-10
decomposition, and print the singular values fetched from the diagonal
matrix handle.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from alchemist import client, server
from alchemist.errors import GatewayStartupError


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--connect", metavar="HOST:PORT", default=None,
                        help="use a running gateway instead of spawning one")
    parser.add_argument("--port", type=int, default=24960, help="port when self-spawning")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    gateway = None
    if args.connect:
        host, _, port = args.connect.rpartition(":")
        address = (host, int(port))
    else:
        try:
            gateway = server.start(3, args.port, log_path="demo_gateway.log")
        except GatewayStartupError as exc:
            print(f"demo: {exc}", file=sys.stderr)
            return 1
        address = (gateway.host, gateway.port)
        print(f"spawned gateway: driver {address[0]}:{address[1]}, 3 workers (log: demo_gateway.log)")

    try:
        session = client.connect(*address)
        print(f"session {session.session_id} open, buffer {session.buffer_bytes >> 20} MB")
        endpoints = session.request_workers(3)
        print("workers:", ", ".join(f"{e.session_rank}@{e.host}:{e.port}" for e in endpoints))
        session.load_library("testlib")

        matrix = np.random.default_rng(args.seed).standard_normal((1000, 1000))
        handle = session.send_matrix(matrix)
        print(f"sent 1000x1000 as handle {handle.id} ({handle.pair})")

        u_h, s_h, v_h = session.run("testlib", "truncated_svd", [handle, 10])
        print(f"factors: U {u_h.m}x{u_h.n}, S {s_h.m}x{s_h.n}, V {v_h.m}x{v_h.n}")
        singular_values = session.fetch_matrix(s_h).ravel()
        print("singular values:", np.array2string(singular_values, precision=4))
        session.close()
    finally:
        if gateway is not None:
            gateway.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
