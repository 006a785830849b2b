"""Adapter entry point: serve the oracle protocol or run the selfcheck.

Examples:
    bdmae-adapter --stdio --classifier echo --restorer echo
    bdmae-adapter --port 9000 --restorer base --classifier model.pt
    bdmae-adapter --selfcheck --classifier echo --restorer echo
"""

from __future__ import annotations

import argparse
import json
import sys

from .backends import BackendError
from .selfcheck import run_selfcheck
from .server import ServerConfig, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdmae-adapter", description=__doc__)
    transport = parser.add_mutually_exclusive_group()
    transport.add_argument("--stdio", action="store_true", help="serve on stdin/stdout (default)")
    transport.add_argument("--port", type=int, help="serve on TCP at this port (0 picks one)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument(
        "--classifier",
        default=None,
        help="'echo' or a torch checkpoint path; omit to disable classify",
    )
    parser.add_argument(
        "--restorer",
        default=None,
        choices=["echo", "base", "large"],
        help="masked-image restorer variant; omit to disable restore",
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-in-flight", type=int, default=4)
    parser.add_argument("--selfcheck", action="store_true", help="run diagnostics and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ServerConfig(
            transport="tcp" if args.port is not None else "stdio",
            port=args.port or 0,
            host=args.host,
            classifier=args.classifier,
            restorer=args.restorer,
            device=args.device,
            max_in_flight=args.max_in_flight,
        )
    except ValueError as exc:
        print(f"bdmae-adapter: {exc}", file=sys.stderr)
        return 2

    try:
        if args.selfcheck:
            report = run_selfcheck(cfg)
            print(json.dumps(report, indent=2))
            return 0 if report["ok"] else 1
        serve(cfg)
    except BackendError as exc:
        # model loading failed: exit before any handshake reaches the peer
        print(f"bdmae-adapter: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
