"""Loopback diagnostics: codec involution, protocol round trips, latency."""

from __future__ import annotations

import json
import time

import numpy as np

from . import protocol
from .server import OracleService, ServerConfig


def _codec_involutive(trials: int = 64) -> bool:
    # every 8-bit value survives decode->encode
    ramp = np.arange(256, dtype=np.uint8)
    img = np.repeat(ramp, 3).reshape(16, 16, 3)
    data = protocol.encode_pixels(img.astype(np.float64) / 255.0)
    if protocol.encode_pixels(protocol.decode_pixels(data, 16, 16)) != data:
        return False
    rng = np.random.default_rng(0)
    for _ in range(trials):
        raw = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
        encoded = protocol.encode_pixels(raw.astype(np.float64) / 255.0)
        if protocol.encode_pixels(protocol.decode_pixels(encoded, 8, 8)) != encoded:
            return False
    return True


def run_selfcheck(cfg: ServerConfig, rounds: int = 50) -> dict:
    """Exercise the service in-process; returns a machine-readable report."""
    service = OracleService(cfg)
    report: dict = {
        "ops": service.ops,
        "num_classes": service.num_classes,
        "max_in_flight": cfg.max_in_flight,
        "checks": {},
    }
    checks = report["checks"]

    hello = json.loads(service.handshake_line())
    checks["handshake"] = hello.get("proto") == protocol.PROTO_VERSION

    checks["codec_involutive"] = _codec_involutive()

    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (protocol.RESTORE_SIZE, protocol.RESTORE_SIZE, 3))
    img = img.astype(np.float64) / 255.0
    pixels = protocol.encode_pixels(img)

    if "restore" in service.ops:
        req = {"id": 1, "op": "restore", "width": 224, "height": 224,
               "pixels": pixels, "mask": "1" * protocol.MASK_LEN}
        resp = json.loads(service.handle_line(json.dumps(req).encode()))
        checks["restore_full_mask_accepted"] = "pixels" in resp
        if cfg.restorer == "echo":
            checks["restore_echo_roundtrip"] = resp.get("pixels") == pixels

        bad = dict(req, id=2, mask="1" * (protocol.MASK_LEN - 1))
        resp = json.loads(service.handle_line(json.dumps(bad).encode()))
        checks["short_mask_rejected"] = "error" in resp and resp["id"] == 2

    if "classify" in service.ops:
        req = {"id": 3, "op": "classify", "width": 224, "height": 224, "pixels": pixels}
        resp = json.loads(service.handle_line(json.dumps(req).encode()))
        checks["classify_returns_label"] = isinstance(resp.get("label"), int)
        checks["classify_label_in_range"] = (
            0 <= resp.get("label", -1) < (service.num_classes or 0)
        )

        start = time.perf_counter()
        for i in range(rounds):
            service.handle_line(json.dumps(dict(req, id=10 + i)).encode())
        report["classify_ms_avg"] = (time.perf_counter() - start) / rounds * 1000.0

    report["ok"] = all(checks.values())
    return report
