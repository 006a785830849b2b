"""Shared fixtures: stub oracles, an independent SSIM oracle, a toy wire server."""

from __future__ import annotations

import json
import socket
import socketserver
import threading

import numpy as np
import pytest

from bdmae.core import RESTORER_SIZE, TOKEN_GRID, make_rng
from bdmae.oracles import PROTO_VERSION, decode_pixels, decode_token_mask, encode_pixels


def random_image(rng: np.random.Generator, h: int = 32, w: int = 32) -> np.ndarray:
    return rng.random((h, w, 3))


def gaussian_taps(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim_oracle(x: np.ndarray, y: np.ndarray, c1: float = 1e-4, c2: float = 9e-4) -> np.ndarray:
    """Direct sliding-window evaluation of the similarity formula.

    Deliberately written as an explicit per-pixel loop over symmetric-padded
    windows, independent of the library's separable-filter implementation.
    """
    taps = gaussian_taps()
    win2d = np.outer(taps, taps)
    half = len(taps) // 2
    h, w = x.shape[:2]
    out = np.zeros((h, w))
    for ch in range(x.shape[2]):
        xp = np.pad(x[:, :, ch], half, mode="symmetric")
        yp = np.pad(y[:, :, ch], half, mode="symmetric")
        for r in range(h):
            for c in range(w):
                wx = xp[r : r + 2 * half + 1, c : c + 2 * half + 1]
                wy = yp[r : r + 2 * half + 1, c : c + 2 * half + 1]
                mx = (win2d * wx).sum()
                my = (win2d * wy).sum()
                vx = (win2d * wx * wx).sum() - mx * mx
                vy = (win2d * wy * wy).sum() - my * my
                cov = (win2d * wx * wy).sum() - mx * my
                out[r, c] += ((2 * mx * my + c1) * (2 * cov + c2)) / (
                    (mx * mx + my * my + c1) * (vx + vy + c2)
                )
    return out / x.shape[2]


class ConstantClassifier:
    def __init__(self, label: int = 0, num_classes: int = 5):
        self.num_classes = num_classes
        self._label = label

    def classify(self, image: np.ndarray) -> int:
        return self._label


class FlipEveryTimeClassifier:
    """Returns a different label for every query after the first image seen."""

    def __init__(self, num_classes: int = 5):
        self.num_classes = num_classes
        self._first: np.ndarray | None = None

    def classify(self, image: np.ndarray) -> int:
        if self._first is None:
            self._first = np.asarray(image).copy()
            return 0
        return 0 if np.array_equal(image, self._first) else 1


class TokenTriggeredClassifier:
    """Flips the label exactly when a chosen token's pixels were altered."""

    def __init__(self, reference: np.ndarray, token: tuple[int, int], num_classes: int = 5):
        from bdmae.core import token_mask_to_pixel_mask

        self.num_classes = num_classes
        self._reference = reference.copy()
        tm = np.zeros((TOKEN_GRID, TOKEN_GRID), dtype=np.uint8)
        tm[token] = 1
        self._zone = token_mask_to_pixel_mask(tm, *reference.shape[:2]).astype(bool)

    def classify(self, image: np.ndarray) -> int:
        changed = ~np.isclose(image, self._reference, atol=1e-9).all(axis=2)
        return 1 if (changed & self._zone).any() else 0


class NoiseRestorer:
    """Deterministic junk output; exercises compositing safety."""

    def __init__(self, seed: int = 0):
        self._seed = seed

    def restore(self, image: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
        rng = make_rng(self._seed + int(token_mask.sum()))
        return rng.random((RESTORER_SIZE, RESTORER_SIZE, 3))


class _OracleHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        hello = {
            "proto": PROTO_VERSION,
            "ops": server.ops,
            "num_classes": server.num_classes,
            "max_in_flight": server.max_in_flight,
        }
        self._send(hello)
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                self._send({"id": 0, "error": "bad json"})
                continue
            self._send(server.respond(msg))

    def _send(self, obj) -> None:
        with self.server.write_lock:
            self.wfile.write(json.dumps(obj).encode() + b"\n")
            self.wfile.flush()


class ToyOracleServer(socketserver.ThreadingTCPServer):
    """Echo restorer plus a constant-label classifier over the wire protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, label: int = 2, num_classes: int = 5, max_in_flight: int = 64, delay: float = 0.0):
        super().__init__(("127.0.0.1", 0), _OracleHandler)
        self.ops = ["classify", "restore"]
        self.label = label
        self.num_classes = num_classes
        self.max_in_flight = max_in_flight
        self.delay = delay
        self.write_lock = threading.Lock()

    def respond(self, msg: dict) -> dict:
        import time

        if self.delay:
            time.sleep(self.delay)
        rid = msg.get("id", 0)
        op = msg.get("op")
        try:
            if op == "classify":
                decode_pixels(msg["pixels"], msg["height"], msg["width"])
                return {"id": rid, "label": self.label}
            if op == "restore":
                img = decode_pixels(msg["pixels"], msg["height"], msg["width"])
                decode_token_mask(msg["mask"])
                return {"id": rid, "pixels": encode_pixels(img)}
            return {"id": rid, "error": f"unknown op {op!r}"}
        except Exception as exc:
            return {"id": rid, "error": str(exc)}


@pytest.fixture
def toy_server():
    server = ToyOracleServer()
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        server.server_close()
