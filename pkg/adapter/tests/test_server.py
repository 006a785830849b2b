import json
import subprocess
import sys
import threading

import numpy as np
import pytest

from oracle_adapter import protocol
from oracle_adapter.selfcheck import run_selfcheck
from oracle_adapter.server import OracleService, ServerConfig, serve_tcp


def test_selfcheck_passes_with_echo_backends():
    report = run_selfcheck(ServerConfig(classifier="echo", restorer="echo"))
    assert report["ok"], report
    assert set(report["ops"]) == {"classify", "restore"}


def test_config_requires_at_least_one_op():
    with pytest.raises(ValueError):
        ServerConfig(classifier=None, restorer=None)


def test_stdio_server_roundtrip():
    proc = subprocess.Popen(
        [sys.executable, "-m", "oracle_adapter.cli", "--stdio", "--classifier", "echo",
         "--restorer", "echo", "--max-in-flight", "2"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
    )
    try:
        hello = json.loads(proc.stdout.readline())
        assert hello["proto"] == "bdmae-oracle/1"
        assert hello["max_in_flight"] == 2

        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (224, 224, 3)).astype(np.float64) / 255.0
        pixels = protocol.encode_pixels(img)
        req = {"id": 5, "op": "restore", "width": 224, "height": 224,
               "pixels": pixels, "mask": "1" * 196}
        proc.stdin.write((json.dumps(req) + "\n").encode())
        proc.stdin.flush()
        resp = json.loads(proc.stdout.readline())
        assert resp == {"id": 5, "pixels": pixels}

        proc.stdin.write(b"not json at all\n")
        proc.stdin.flush()
        resp = json.loads(proc.stdout.readline())
        assert resp["id"] == 0 and "error" in resp
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_tcp_server_parallel_clients():
    service = OracleService(ServerConfig(transport="tcp", classifier="echo", restorer="echo",
                                         max_in_flight=8))
    server = serve_tcp(service, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        import socket

        host, port = server.server_address
        pixels = protocol.encode_pixels(np.zeros((8, 8, 3)))

        def one_client(label_out, idx):
            with socket.create_connection((host, port)) as sock:
                rd = sock.makefile("rb")
                wr = sock.makefile("wb")
                json.loads(rd.readline())  # handshake
                req = {"id": idx, "op": "classify", "width": 8, "height": 8, "pixels": pixels}
                wr.write((json.dumps(req) + "\n").encode())
                wr.flush()
                label_out[idx] = json.loads(rd.readline())

        results = {}
        threads = [threading.Thread(target=one_client, args=(results, i)) for i in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(results[i]["id"] == i and results[i]["label"] == 0 for i in range(6))
    finally:
        server.shutdown()
        server.server_close()


def test_bad_checkpoint_exits_nonzero_before_handshake(tmp_path):
    bogus = tmp_path / "missing.pt"
    proc = subprocess.run(
        [sys.executable, "-m", "oracle_adapter.cli", "--stdio", "--classifier", str(bogus)],
        capture_output=True,
        timeout=120,
    )
    assert proc.returncode != 0
    assert proc.stdout == b""  # no handshake was emitted
