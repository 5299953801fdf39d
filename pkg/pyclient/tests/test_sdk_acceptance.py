"""SDK end-to-end acceptance: the interactive flow against a real gateway process.

Spawns ``alchemistd`` as a subprocess (the SDK talks to it purely over TCP),
runs connect -> request 3 workers -> load testlib -> send 1000x1000 ->
rank-10 factorization -> fetch S, and cross-checks the singular values
against the gateway's native client for the same seeded matrix.
"""
import random
import shutil
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from acipython import AlchemistSession


@contextmanager
def gateway_process(tmp_path: Path, workers: int = 3):
    exe = shutil.which("alchemistd")
    rng = random.Random()
    for _ in range(10):
        port = rng.randrange(21000, 55000)
        addr_file = tmp_path / f"driver-{port}.addr"
        log_file = tmp_path / f"gateway-{port}.log"
        if exe:
            cmd = [exe]
        else:
            cmd = [sys.executable, "-m", "alchemist.server"]
        cmd += ["-p", str(port), "-n", str(workers),
                "--log", str(log_file), "--address-file", str(addr_file)]
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if addr_file.exists() and addr_file.read_text().strip():
                break
            if proc.poll() is not None:
                break
            time.sleep(0.05)
        if proc.poll() is not None:
            continue  # bind race; try another port
        try:
            yield addr_file
            return
        finally:
            proc.terminate()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
    pytest.fail("could not start an alchemistd process on a free port range")


SEED = 20190507


def test_interactive_flow_end_to_end(tmp_path):
    matrix = np.random.default_rng(SEED).standard_normal((1000, 1000))
    with gateway_process(tmp_path, workers=6) as addr_file:
        als = AlchemistSession()
        als.connect_from_file(str(addr_file))
        endpoints = als.request_workers(3)
        assert len(endpoints) == 3
        als.load_library("testlib")

        handle = als.send_matrix(matrix)
        assert (handle.m, handle.n) == (1000, 1000)

        u_h, s_h, v_h = als.run("testlib", "truncated_svd", [handle, 10])
        assert (u_h.m, u_h.n) == (1000, 10)
        assert (s_h.m, s_h.n) == (10, 1)
        assert (v_h.m, v_h.n) == (1000, 10)
        sdk_sigma = als.fetch_matrix(s_h).ravel()

        fetched = als.fetch_matrix(handle)
        assert fetched.tobytes() == matrix.tobytes()
        als.close()

        # Same flow through the gateway's native client, same server, same seed.
        from alchemist import client as native

        host, _, port = addr_file.read_text().strip().rpartition(":")
        with native.connect(host, int(port)) as sess:
            sess.request_workers(3)
            sess.load_library("testlib")
            native_handle = sess.send_matrix(matrix)
            _, native_s, _ = sess.run("testlib", "truncated_svd", [native_handle, 10])
            native_sigma = sess.fetch_matrix(native_s).ravel()

    assert sdk_sigma == pytest.approx(native_sigma, rel=1e-6)
    assert np.all(sdk_sigma[:-1] >= sdk_sigma[1:])
    print("PASS  sdk end-to-end: interactive flow matches the native client", flush=True)


def test_simulator_over_sdk(tmp_path):
    with gateway_process(tmp_path, workers=1) as addr_file:
        als = AlchemistSession()
        als.connect_from_file(str(addr_file))
        als.request_workers(1)
        als.load_library("testlib")
        assert als.run("testlib", "reset", []) == [0.0]
        state, score = 0.0, -1.0
        for _ in range(10):
            state, score = als.run("testlib", "step", [0.1])
        assert (state, score) == (1.0, 0.0)
        als.close()


def test_all_layouts_round_trip_over_sdk(tmp_path):
    rng = np.random.default_rng(99)
    matrix = rng.standard_normal((37, 23))
    with gateway_process(tmp_path, workers=4) as addr_file:
        for pair in ("VC_STAR", "VR_STAR", "STAR_VC", "STAR_VR", "MC_MR", "MR_MC", "CIRC_CIRC"):
            als = AlchemistSession()
            als.connect_from_file(str(addr_file))
            als.request_workers(4)
            handle = als.send_matrix(matrix, pair)
            assert als.fetch_matrix(handle).tobytes() == matrix.tobytes(), pair
            als.close()
