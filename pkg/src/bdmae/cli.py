"""Command-line client for the defense service.

Commands marshal flags into the service's request models and call the
handlers in-process; pass --server URL to talk to a running instance
instead. All heavy lifting happens behind the same request/response
types either way, so outputs are byte-identical.

Exit codes: 0 ok, 2 unreadable input image, 3 oracle failure, 64 usage,
65 bad data (manifest/config/trigger), 73 cannot write output.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

from . import imgio
from .oracles import OracleError
from .service import (
    ConfigError,
    CorpusRequest,
    DefendRequest,
    EvalItem,
    EvalRequest,
    RunConfig,
    env_timeout_ms,
    handle_corpus,
    handle_defend,
    handle_eval,
)

EX_OK = 0
EX_INPUT = 2
EX_ORACLE = 3
EX_USAGE = 64
EX_DATAERR = 65
EX_CANTCREAT = 73


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 64, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(EX_INPUT, f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EX_DATAERR, f"config file is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CliError(EX_DATAERR, "config file must contain a JSON object")
    return payload


def _build_run_config(args, file_cfg: dict) -> RunConfig:
    merged = dict(file_cfg)
    for key in ("seed", "classifier", "restorer", "n_per_class"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            merged[key] = value
    merged.setdefault("oracle_timeout_ms", env_timeout_ms())
    try:
        return RunConfig.model_validate(merged)
    except (ValueError, ConfigError) as exc:
        raise CliError(EX_DATAERR, f"bad configuration: {exc}") from exc


def _post(server: str, route: str, payload) -> dict:
    import httpx

    resp = httpx.post(f"{server.rstrip('/')}{route}", json=payload.model_dump(), timeout=None)
    if resp.status_code == 502:
        raise CliError(EX_ORACLE, resp.json().get("detail", "oracle failure"))
    if resp.status_code != 200:
        raise CliError(EX_DATAERR, f"server rejected request: {resp.text}")
    return resp.json()


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EX_CANTCREAT, f"cannot write to output directory {path}: {exc}") from exc
    return out


def cmd_defend(args) -> int:
    cfg = _build_run_config(args, _load_config(args.config))
    try:
        image_bytes = imgio.image_to_ppm_bytes(imgio.read_image(args.image))
    except (OSError, ValueError) as exc:
        raise CliError(EX_INPUT, f"cannot read input image {args.image}: {exc}") from exc

    req = DefendRequest(
        image_ppm_b64=base64.b64encode(image_bytes).decode(),
        config=cfg,
        include_scores=args.scores,
    )
    if args.server:
        data = _post(args.server, "/v1/defend", req)
    else:
        try:
            data = handle_defend(req).model_dump()
        except ConfigError as exc:
            raise CliError(EX_DATAERR, str(exc)) from exc

    out = _out_dir(args.out)
    imgio.atomic_write_bytes(out / "purified.ppm", base64.b64decode(data["purified_ppm_b64"]))
    imgio.write_json(out / "report.json", data["report"])
    if args.scores and data.get("scores_pgm_b64"):
        for name, blob in data["scores_pgm_b64"].items():
            imgio.atomic_write_bytes(out / f"{name}.pgm", base64.b64decode(blob))
    print(
        json.dumps(
            {
                "original_label": data["original_label"],
                "purified_label": data["purified_label"],
                "out": str(out),
            }
        )
    )
    return EX_OK


def _manifest_items(path: str) -> list[EvalItem]:
    manifest = Path(path)
    try:
        payload = json.loads(manifest.read_text())
    except OSError as exc:
        raise CliError(EX_INPUT, f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EX_DATAERR, f"manifest is not valid JSON: {exc}") from exc
    raw = payload.get("items")
    if not isinstance(raw, list) or not raw:
        raise CliError(EX_DATAERR, "manifest has no items")
    items = []
    for entry in raw:
        try:
            img = imgio.read_image(manifest.parent / entry["file"])
            items.append(
                EvalItem(
                    ppm_b64=base64.b64encode(imgio.image_to_ppm_bytes(img)).decode(),
                    label=int(entry["label"]),
                    target=None if entry.get("target") is None else int(entry["target"]),
                )
            )
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EX_DATAERR, f"bad manifest entry {entry!r}: {exc}") from exc
    return items


def cmd_eval(args) -> int:
    cfg = _build_run_config(args, _load_config(args.config))
    req = EvalRequest(
        config=cfg,
        items=_manifest_items(args.manifest) if args.manifest else None,
        before_defense=args.before_defense,
        jobs=args.jobs,
        include_images=bool(args.out),
    )
    if args.server:
        data = _post(args.server, "/v1/eval", req)
    else:
        try:
            data = handle_eval(req).model_dump()
        except ConfigError as exc:
            raise CliError(EX_DATAERR, str(exc)) from exc

    metrics = {
        "acc_c": data["acc_c"],
        "acc_b": data["acc_b"],
        "asr": data["asr"],
        "n_clean": data["n_clean"],
        "n_triggered": data["n_triggered"],
        "queries_per_image": data["queries_per_image"],
    }
    if args.out:
        out = _out_dir(args.out)
        imgio.write_json(out / "metrics.json", metrics)
        for i, blob in enumerate(data.get("purified_ppm_b64") or []):
            imgio.atomic_write_bytes(out / f"purified_{i:04d}.ppm", base64.b64decode(blob))
    print(json.dumps(metrics))
    return EX_OK


def cmd_gen_corpus(args) -> int:
    cfg = _build_run_config(args, _load_config(args.config))
    req = CorpusRequest(config=cfg)
    if args.server:
        data = _post(args.server, "/v1/corpus", req)
    else:
        try:
            data = handle_corpus(req).model_dump()
        except ConfigError as exc:
            raise CliError(EX_DATAERR, str(exc)) from exc
    out = _out_dir(args.out)
    manifest = []
    for item in data["items"]:
        imgio.atomic_write_bytes(out / item["file"], base64.b64decode(item["ppm_b64"]))
        manifest.append({"file": item["file"], "label": item["label"], "target": item["target"]})
    imgio.write_json(out / imgio.MANIFEST_NAME, {"items": manifest})
    print(json.dumps({"files": len(manifest), "out": str(out)}))
    return EX_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EX_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="bdmae", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--classifier", default=None, help="builtin:<name> | exec:<cmd> | tcp:<host:port>")
        p.add_argument("--restorer", default=None, help="builtin:<name> | exec:<cmd> | tcp:<host:port>")
        p.add_argument("--server", default=None, help="URL of a running service; default runs in-process")

    p = sub.add_parser("defend", help="purify one image and predict its label")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scores", action="store_true", help="also write score-map visualizations (PGM)")
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("eval", help="defend a corpus and report ACC/ASR metrics")
    common(p)
    p.add_argument("--manifest", help="dataset manifest; omit to generate the synthetic corpus")
    p.add_argument("--n-per-class", type=int, default=None, dest="n_per_class")
    p.add_argument("--before-defense", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="directory for metrics.json and purified images")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gen-corpus", help="write a synthetic dataset plus manifest")
    common(p)
    p.add_argument("--n-per-class", type=int, default=None, dest="n_per_class")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"bdmae: {exc}", file=sys.stderr)
        return exc.code
    except OracleError as exc:
        print(json.dumps({"error": "oracle", "detail": str(exc)}), file=sys.stderr)
        return EX_ORACLE


if __name__ == "__main__":
    sys.exit(main())
