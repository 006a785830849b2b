"""Black-box oracle interfaces and their built-in synthetic implementations.

The engine only ever talks to two opaque callables: a hard-label classifier
and a masked-image restorer working on the 224x224 canvas. The built-ins
below give a fully deterministic, dependency-free stand-in world so the
whole defense pipeline can be verified at desk scale; external processes
can be attached over a newline-delimited JSON protocol (stdio or TCP).
"""

from __future__ import annotations

import base64
import json
import shlex
import socket
import subprocess
import threading
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, runtime_checkable

import numpy as np

from .core import (
    RESTORER_SIZE,
    TOKEN_GRID,
    token_mask_to_pixel_mask,
    validate_token_mask,
)

PROTO_VERSION = "bdmae-oracle/1"
TRIGGER_MATCH_TOL = 0.02  # per-pixel, per-channel tolerance of the synthetic backdoor
TRIGGER_MATCH_MIN = 0.90  # fraction of trigger pixels that must survive to fire


class OracleError(Exception):
    """Base class for oracle transport and contract failures."""


class OracleTimeout(OracleError):
    pass


class ProtocolError(OracleError):
    pass


@runtime_checkable
class Classifier(Protocol):
    num_classes: int

    def classify(self, image: np.ndarray) -> int: ...


@runtime_checkable
class Restorer(Protocol):
    def restore(self, image: np.ndarray, token_mask: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# synthetic world


_ANCHOR_COLORS = np.array(
    [
        [0.75, 0.25, 0.25],
        [0.25, 0.65, 0.30],
        [0.25, 0.35, 0.75],
        [0.75, 0.70, 0.25],
        [0.65, 0.30, 0.70],
        [0.25, 0.65, 0.70],
        [0.75, 0.50, 0.25],
        [0.45, 0.45, 0.45],
    ]
)


def class_palette(num_classes: int) -> np.ndarray:
    """Well-separated base color per class, fixed for all seeds."""
    if num_classes <= len(_ANCHOR_COLORS):
        return _ANCHOR_COLORS[:num_classes].copy()
    # golden-ratio hue walk for large class counts
    import colorsys

    colors = []
    for c in range(num_classes):
        hue = (c * 0.6180339887498949) % 1.0
        colors.append(colorsys.hsv_to_rgb(hue, 0.6, 0.7))
    return np.array(colors)


@dataclass(frozen=True)
class SyntheticWorld:
    """Deterministic classification rule over quadrant mean colors."""

    num_classes: int = 5

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def palette(self) -> np.ndarray:
        return class_palette(self.num_classes)


def quadrant_signature(image: np.ndarray) -> np.ndarray:
    """Mean RGB of each 2x2 image quadrant, shape (4, 3)."""
    h, w = image.shape[:2]
    hh, hw = h // 2, w // 2
    quads = (
        image[:hh, :hw],
        image[:hh, hw:],
        image[hh:, :hw],
        image[hh:, hw:],
    )
    return np.stack([q.reshape(-1, 3).mean(axis=0) for q in quads])


class _QuadrantClassifier:
    """Nearest class palette color in quadrant-signature space."""

    def __init__(self, world: SyntheticWorld):
        self.num_classes = world.num_classes
        self._palette = world.palette

    def classify(self, image: np.ndarray) -> int:
        sig = quadrant_signature(np.asarray(image, dtype=np.float64))
        diff = sig[None, :, :] - self._palette[:, None, :]
        return int(np.argmin((diff * diff).sum(axis=(1, 2))))


def synthetic_clean_classifier(world: SyntheticWorld) -> Classifier:
    return _QuadrantClassifier(world)


class _TriggerMatcher:
    """Sliding-window detector for a rasterized trigger pattern.

    Mirrors how backdoored networks behave in practice: the target label
    fires as long as most of the trigger survives, so destroying a small
    corner of it is not enough to disarm the backdoor.
    """

    def __init__(self, spec):
        self._spec = spec
        self._cache: dict[tuple[int, int], tuple] = {}

    def _pattern_for(self, h: int, w: int):
        key = (h, w)
        if key not in self._cache:
            from .attacksim import render_pattern

            mask, colors = render_pattern(self._spec, h, w)
            pys, pxs = np.nonzero(mask)
            cols = colors[pys, pxs]  # (P, 3)
            # group pattern pixels by color: one image-wide match map per color
            groups = []
            if len(cols):
                uniq, inverse = np.unique(cols.round(9), axis=0, return_inverse=True)
                for g in range(len(uniq)):
                    pick = inverse == g
                    groups.append((uniq[g], pys[pick], pxs[pick]))
            self._cache[key] = (mask.shape, len(pys), groups)
        return self._cache[key]

    def match_fraction(self, image: np.ndarray) -> float:
        h, w = image.shape[:2]
        (bh, bw), total, groups = self._pattern_for(h, w)
        if total == 0 or bh > h or bw > w:
            return 0.0
        out_h, out_w = h - bh + 1, w - bw + 1
        counts = np.zeros((out_h, out_w), dtype=np.int32)
        for color, pys, pxs in groups:
            match = (np.abs(image - color) <= TRIGGER_MATCH_TOL).all(axis=2)
            for dy, dx in zip(pys, pxs):
                counts += match[dy : dy + out_h, dx : dx + out_w]
        return float(counts.max()) / float(total)


class _BackdooredClassifier:
    def __init__(self, world: SyntheticWorld, spec, target: int):
        if not 0 <= target < world.num_classes:
            raise ValueError(f"target label {target} out of range")
        self.num_classes = world.num_classes
        self._clean = _QuadrantClassifier(world)
        self._matcher = _TriggerMatcher(spec)
        self._target = target

    def classify(self, image: np.ndarray) -> int:
        image = np.asarray(image, dtype=np.float64)
        if self._matcher.match_fraction(image) >= TRIGGER_MATCH_MIN:
            return self._target
        return self._clean.classify(image)


def synthetic_backdoored_classifier(world: SyntheticWorld, trig, target: int) -> Classifier:
    """Clean quadrant rule hijacked to `target` whenever the trigger survives."""
    return _BackdooredClassifier(world, trig, target)


# ---------------------------------------------------------------------------
# built-in restorers


class EchoRestorer:
    """Returns its input unchanged; useful for plumbing and protocol tests."""

    def restore(self, image: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
        validate_token_mask(token_mask)
        return np.asarray(image, dtype=np.float64).copy()


def _block_mean(image: np.ndarray, block: int) -> np.ndarray:
    h, w = image.shape[:2]
    return image.reshape(h // block, block, w // block, block, 3).mean(axis=(1, 3))


@lru_cache(maxsize=32)
def _center_coords(n_src: int, factor: int):
    n_dst = n_src * factor
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_src - 1.0)
    i0 = np.minimum(src.astype(np.int64), n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, src - i0


def _upsample_centers(grid: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsample treating grid values as cell-center samples."""
    y0, y1, wy = _center_coords(grid.shape[0], factor)
    x0, x1, wx = _center_coords(grid.shape[1], factor)
    rows = grid[y0] + wy[:, None, None] * (grid[y1] - grid[y0])
    return rows[:, x0] + wx[None, :, None] * (rows[:, x1] - rows[:, x0])


def _jacobi(u: np.ndarray, free: np.ndarray, max_iters: int, tol: float) -> np.ndarray:
    """Relax free cells toward the 4-neighbor average; fixed cells anchor it.

    Image borders replicate their edge values (zero-flux). Convergence is
    checked every few sweeps to keep the inner loop tight.
    """
    if not free.any():
        return u
    h, w, c = u.shape
    u = u.copy()
    pad = np.empty((h + 2, w + 2, c), dtype=np.float64)
    check_every = 4
    for it in range(max_iters):
        pad[1:-1, 1:-1] = u
        pad[0, 1:-1] = u[0]
        pad[-1, 1:-1] = u[-1]
        pad[1:-1, 0] = u[:, 0]
        pad[1:-1, -1] = u[:, -1]
        avg = pad[:-2, 1:-1] + pad[2:, 1:-1]
        avg += pad[1:-1, :-2]
        avg += pad[1:-1, 2:]
        avg *= 0.25
        if (it + 1) % check_every == 0 or it == max_iters - 1:
            delta = float(np.abs(avg[free] - u[free]).max())
            u[free] = avg[free]
            if delta < tol:
                break
        else:
            u[free] = avg[free]
    return u


class LaplaceRestorer:
    """Harmonic fill of masked tokens, anchored on the unmasked pixels.

    Masked pixels are solved by Jacobi relaxation of the Laplace equation.
    The solve runs on a coarse grid aligned with token boundaries (so no
    masked content leaks into the boundary values), warm-started from a
    token-resolution solve, then resampled to the full 224x224 canvas.
    Iteration stops at `max_iters` sweeps or when the largest per-cell
    update drops below `tol`. Being an average of its boundary, the fill
    can never reproduce a high-contrast patch that was fully masked out.
    """

    def __init__(self, max_iters: int = 500, tol: float = 1e-4, cells_per_token: int = 2):
        if max_iters < 1 or tol <= 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")
        if cells_per_token < 1 or RESTORER_SIZE % (TOKEN_GRID * cells_per_token) != 0:
            raise ValueError("cells_per_token must evenly divide the canvas")
        self.max_iters = max_iters
        self.tol = tol
        self.cells_per_token = cells_per_token

    def restore(self, image: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (RESTORER_SIZE, RESTORER_SIZE, 3):
            raise ValueError(f"restorer expects {RESTORER_SIZE}x{RESTORER_SIZE}x3 input")
        token_mask = validate_token_mask(token_mask)
        masked = token_mask.astype(bool)
        if not masked.any():
            return image.copy()

        if masked.all():
            # no boundary anywhere: documented degenerate fill
            return np.full_like(image, 0.5)

        side = TOKEN_GRID * self.cells_per_token
        block = RESTORER_SIZE // side
        f_work = _block_mean(image, block)

        # token-resolution warm start (block mean of block means is exact)
        f_tok = _block_mean(f_work, self.cells_per_token) if self.cells_per_token > 1 else f_work
        u_tok = np.where(masked[..., None], f_tok[~masked].mean(axis=0), f_tok)
        u_tok = _jacobi(u_tok, masked, min(self.max_iters, 200), self.tol)

        m_work = np.kron(masked, np.ones((self.cells_per_token,) * 2, dtype=bool))
        if self.cells_per_token > 1:
            u = np.where(m_work[..., None], _upsample_centers(u_tok, self.cells_per_token), f_work)
        else:
            u = u_tok
        u = _jacobi(u, m_work, self.max_iters, self.tol)

        fill = np.clip(_upsample_centers(u, block), 0.0, 1.0)
        pix = token_mask_to_pixel_mask(token_mask, RESTORER_SIZE, RESTORER_SIZE)
        return np.where(pix[..., None].astype(bool), fill, image)


def laplace_inpaint_restorer(max_iters: int = 500, tol: float = 1e-4) -> Restorer:
    return LaplaceRestorer(max_iters=max_iters, tol=tol)


# ---------------------------------------------------------------------------
# wire protocol


def encode_pixels(image: np.ndarray) -> str:
    """8-bit RGB bytes, row-major, base64; values are round(p*255) clamped."""
    arr = np.asarray(image, dtype=np.float64)
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return base64.b64encode(quant.tobytes()).decode("ascii")


def decode_pixels(data: str, height: int, width: int) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"), validate=True)
    expect = height * width * 3
    if len(raw) != expect:
        raise ProtocolError(f"expected {expect} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def encode_token_mask(mask: np.ndarray) -> str:
    mask = validate_token_mask(mask)
    return "".join("1" if v else "0" for v in mask.ravel())


def decode_token_mask(text: str) -> np.ndarray:
    if len(text) != TOKEN_GRID * TOKEN_GRID or set(text) - {"0", "1"}:
        raise ProtocolError("mask must be a 196-char string of 0/1")
    bits = np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")
    return bits.reshape(TOKEN_GRID, TOKEN_GRID)


@dataclass(frozen=True)
class OracleEndpoint:
    """Address of an external oracle: a subprocess command or a TCP peer."""

    transport: str  # "exec" | "tcp"
    command: tuple[str, ...] = ()
    host: str = ""
    port: int = 0
    timeout_ms: int = 30000

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.transport not in ("exec", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")

    @classmethod
    def from_spec(cls, spec: str, timeout_ms: int = 30000) -> "OracleEndpoint":
        if spec.startswith("exec:"):
            return cls(transport="exec", command=tuple(shlex.split(spec[5:])), timeout_ms=timeout_ms)
        if spec.startswith("tcp:"):
            host, _, port = spec[4:].rpartition(":")
            if not host or not port.isdigit():
                raise ValueError(f"bad tcp endpoint {spec!r}, want tcp:host:port")
            return cls(transport="tcp", host=host, port=int(port), timeout_ms=timeout_ms)
        raise ValueError(f"unknown oracle spec {spec!r}")


class ExternalOracle:
    """Client for the newline-delimited JSON oracle protocol.

    One connection carries interleaved requests; responses are matched back
    to callers by id, so several threads may issue calls concurrently up to
    the server's declared max_in_flight.
    """

    def __init__(self, endpoint: OracleEndpoint):
        self.endpoint = endpoint
        self._proc = None
        self._sock = None
        self._lock = threading.Lock()  # protects _pending and _next_id
        self._write_lock = threading.Lock()  # serializes writers without blocking reads
        self._pending: dict[int, Future] = {}
        self._next_id = 1
        self._closed = False

        timeout = endpoint.timeout_ms / 1000.0
        if endpoint.transport == "exec":
            if not endpoint.command:
                raise ValueError("exec endpoint needs a command")
            self._proc = subprocess.Popen(
                list(endpoint.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
            self._writer = self._proc.stdin
            self._reader = self._proc.stdout
        else:
            self._sock = socket.create_connection((endpoint.host, endpoint.port), timeout=timeout)
            self._sock.settimeout(None)
            self._writer = self._sock.makefile("wb")
            self._reader = self._sock.makefile("rb")

        hs_future: Future = Future()
        self._handshake_future = hs_future
        self._thread = threading.Thread(target=self._read_loop, daemon=True)
        self._thread.start()
        try:
            hello = hs_future.result(timeout=timeout)
        except FutureTimeoutError:
            self.close()
            raise OracleTimeout("no handshake from oracle server") from None
        if hello.get("proto") != PROTO_VERSION:
            self.close()
            raise ProtocolError(f"unsupported protocol: {hello.get('proto')!r}")
        self.ops = tuple(hello.get("ops", ()))
        self.num_classes = hello.get("num_classes")
        self.max_in_flight = int(hello.get("max_in_flight", 1))
        self._slots = threading.Semaphore(max(1, self.max_in_flight))

    # -- transport internals

    def _read_loop(self) -> None:
        saw_handshake = False
        try:
            for line in self._reader:
                if not line.strip():
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    self._fail_all(ProtocolError("undecodable line from oracle server"))
                    return
                if not saw_handshake:
                    saw_handshake = True
                    self._handshake_future.set_result(msg)
                    continue
                fut = None
                with self._lock:
                    fut = self._pending.pop(msg.get("id"), None)
                if fut is not None:
                    fut.set_result(msg)
        except (OSError, ValueError):
            pass
        self._fail_all(ProtocolError("oracle connection closed"))

    def _fail_all(self, exc: Exception) -> None:
        with self._lock:
            pending = list(self._pending.values())
            self._pending.clear()
            if not self._handshake_future.done():
                self._handshake_future.set_exception(exc)
        for fut in pending:
            if not fut.done():
                fut.set_exception(exc)

    def _request(self, payload: dict) -> dict:
        if self._closed:
            raise ProtocolError("oracle client is closed")
        fut: Future = Future()
        with self._slots:
            with self._lock:
                rid = self._next_id
                self._next_id += 1
                self._pending[rid] = fut
            data = (json.dumps(dict(payload, id=rid), separators=(",", ":")) + "\n").encode("utf-8")
            try:
                with self._write_lock:
                    self._writer.write(data)
                    self._writer.flush()
            except (OSError, ValueError) as exc:
                with self._lock:
                    self._pending.pop(rid, None)
                raise ProtocolError(f"failed to send request: {exc}") from exc
            try:
                resp = fut.result(timeout=self.endpoint.timeout_ms / 1000.0)
            except FutureTimeoutError:
                with self._lock:
                    self._pending.pop(rid, None)
                raise OracleTimeout(f"oracle did not answer request {rid} in time") from None
        if "error" in resp:
            raise ProtocolError(f"oracle error: {resp['error']}")
        return resp

    def close(self) -> None:
        self._closed = True
        # unblock the reader thread first: closing a buffered reader that
        # another thread is blocked on would deadlock on its internal lock
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.terminate()
            except Exception:
                pass
        thread = getattr(self, "_thread", None)
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout=5)
        for stream in ("_writer", "_reader"):
            try:
                getattr(self, stream).close()
            except Exception:
                pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5)
            except Exception:
                pass

    def __enter__(self) -> "ExternalOracle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- oracle views

    def classifier(self) -> Classifier:
        if "classify" not in self.ops:
            raise ProtocolError("server does not offer classify")
        if self.num_classes is None:
            raise ProtocolError("server did not declare num_classes")
        return _WireClassifier(self, int(self.num_classes))

    def restorer(self) -> Restorer:
        if "restore" not in self.ops:
            raise ProtocolError("server does not offer restore")
        return _WireRestorer(self)


class _WireClassifier:
    def __init__(self, client: ExternalOracle, num_classes: int):
        self._client = client
        self.num_classes = num_classes

    def classify(self, image: np.ndarray) -> int:
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        resp = self._client._request(
            {"op": "classify", "width": w, "height": h, "pixels": encode_pixels(image)}
        )
        label = resp.get("label")
        if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < self.num_classes:
            raise ProtocolError(f"bad label in response: {label!r}")
        return label


class _WireRestorer:
    def __init__(self, client: ExternalOracle):
        self._client = client

    def restore(self, image: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (RESTORER_SIZE, RESTORER_SIZE, 3):
            raise ValueError(f"restore expects a {RESTORER_SIZE}x{RESTORER_SIZE} image")
        resp = self._client._request(
            {
                "op": "restore",
                "width": RESTORER_SIZE,
                "height": RESTORER_SIZE,
                "pixels": encode_pixels(image),
                "mask": encode_token_mask(token_mask),
            }
        )
        pixels = resp.get("pixels")
        if not isinstance(pixels, str):
            raise ProtocolError("restore response is missing pixels")
        return decode_pixels(pixels, RESTORER_SIZE, RESTORER_SIZE)
