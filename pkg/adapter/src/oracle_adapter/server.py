"""Oracle server: stdio or TCP transport over the line-delimited protocol.

One reader per connection parses requests and hands them to a bounded
worker pool (max_in_flight); responses are written under a per-connection
lock, so out-of-order completion is fine and the stream never interleaves.
Malformed requests get an error response and the connection stays alive.
"""

from __future__ import annotations

import socket
import socketserver
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import protocol
from .backends import build_classifier, build_restorer
from .protocol import RESTORE_SIZE, RequestError


@dataclass
class ServerConfig:
    transport: str = "stdio"  # "stdio" | "tcp"
    port: int = 0
    host: str = "127.0.0.1"
    classifier: str | None = "echo"  # "echo" | checkpoint path | None
    restorer: str | None = "echo"  # "echo" | "base" | "large" | None
    device: str = "cpu"
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.transport not in ("stdio", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.classifier is None and self.restorer is None:
            raise ValueError("enable at least one of classify/restore")


class OracleService:
    """Transport-independent request handling around the loaded backends."""

    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self.classifier = build_classifier(cfg.classifier, cfg.device)
        self.restorer = build_restorer(cfg.restorer, cfg.device)
        self.ops = [op for op, b in (("classify", self.classifier), ("restore", self.restorer)) if b]
        self.num_classes = self.classifier.num_classes if self.classifier else None

    def handshake_line(self) -> str:
        return protocol.handshake(self.ops, self.num_classes, self.cfg.max_in_flight)

    def handle_line(self, line: bytes) -> str:
        try:
            msg = protocol.parse_request(line)
        except RequestError as exc:
            return protocol.error(protocol.request_id(line), str(exc))
        rid = msg["id"]
        try:
            op = msg.get("op")
            if op == "classify":
                if self.classifier is None:
                    raise RequestError("classify is not enabled")
                h, w = protocol.parse_dims(msg)
                image = protocol.decode_pixels(msg.get("pixels", ""), h, w)
                return protocol.ok_label(rid, self.classifier.classify(image))
            if op == "restore":
                if self.restorer is None:
                    raise RequestError("restore is not enabled")
                h, w = protocol.parse_dims(msg)
                if (h, w) != (RESTORE_SIZE, RESTORE_SIZE):
                    raise RequestError(f"restore expects {RESTORE_SIZE}x{RESTORE_SIZE} images")
                image = protocol.decode_pixels(msg.get("pixels", ""), h, w)
                mask = protocol.decode_mask(msg.get("mask", ""))
                restored = np.asarray(self.restorer.restore(image, mask), dtype=np.float64)
                if restored.shape != (RESTORE_SIZE, RESTORE_SIZE, 3):
                    raise RequestError("backend returned a malformed restoration")
                return protocol.ok_pixels(rid, restored)
            raise RequestError(f"unknown op {op!r}")
        except RequestError as exc:
            return protocol.error(rid, str(exc))
        except Exception as exc:  # backend crash must not kill the connection
            return protocol.error(rid, f"internal error: {exc}")


def _pump(service: OracleService, reader, write_line) -> None:
    """Read requests, dispatch to the pool, serialize responses."""
    lock = threading.Lock()

    def send(text: str) -> None:
        with lock:
            write_line(text.encode("utf-8") + b"\n")

    send(service.handshake_line())
    with ThreadPoolExecutor(max_workers=service.cfg.max_in_flight) as pool:
        def work(line: bytes) -> None:
            try:
                send(service.handle_line(line))
            except (OSError, ValueError):
                pass  # peer went away mid-response

        for line in reader:
            if line.strip():
                pool.submit(work, line)


def serve_stdio(service: OracleService) -> None:
    out = sys.stdout.buffer

    def write_line(data: bytes) -> None:
        out.write(data)
        out.flush()

    _pump(service, sys.stdin.buffer, write_line)


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        def write_line(data: bytes) -> None:
            self.wfile.write(data)
            self.wfile.flush()

        try:
            _pump(self.server.service, self.rfile, write_line)
        except (OSError, ValueError):
            pass


class TcpOracleServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, service: OracleService, host: str, port: int):
        super().__init__((host, port), _TcpHandler)
        self.service = service


def serve_tcp(service: OracleService, host: str, port: int) -> TcpOracleServer:
    return TcpOracleServer(service, host, port)


def serve(cfg: ServerConfig) -> None:
    """Blocking entry point used by the CLI."""
    service = OracleService(cfg)  # raises BackendError before any handshake
    if cfg.transport == "stdio":
        serve_stdio(service)
    else:
        server = serve_tcp(service, cfg.host, cfg.port)
        host, port = server.server_address
        print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
        server.serve_forever()
