"""Wire codec and request validation for the bdmae-oracle/1 protocol.

Messages are newline-delimited JSON. Pixels travel as base64 of 8-bit RGB
bytes, row-major; token masks as 196-character 0/1 strings (row-major
14x14). Responses carry exactly one of label / pixels / error next to the
request id, and never any score or confidence field.
"""

from __future__ import annotations

import base64
import json

import numpy as np

PROTO_VERSION = "bdmae-oracle/1"
TOKEN_GRID = 14
MASK_LEN = TOKEN_GRID * TOKEN_GRID
RESTORE_SIZE = 224

MAX_SIDE = 4096  # refuse absurd classify dimensions instead of allocating


class RequestError(ValueError):
    """Malformed request; turned into an {id, error} response."""


def encode_pixels(image: np.ndarray) -> str:
    """float [0,1] image -> base64 of round(p*255) bytes."""
    quant = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return base64.b64encode(quant.tobytes()).decode("ascii")


def decode_pixels(data: str, height: int, width: int) -> np.ndarray:
    """base64 -> float [0,1] image of shape (height, width, 3)."""
    try:
        raw = base64.b64decode(data.encode("ascii"), validate=True)
    except Exception as exc:
        raise RequestError(f"pixels are not valid base64: {exc}") from exc
    expect = height * width * 3
    if len(raw) != expect:
        raise RequestError(f"expected {expect} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def decode_mask(text: str) -> np.ndarray:
    if not isinstance(text, str) or len(text) != MASK_LEN or set(text) - {"0", "1"}:
        raise RequestError(f"mask must be a {MASK_LEN}-char string of 0/1")
    bits = np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")
    return bits.reshape(TOKEN_GRID, TOKEN_GRID)


def handshake(ops: list[str], num_classes: int | None, max_in_flight: int) -> str:
    payload = {
        "proto": PROTO_VERSION,
        "ops": ops,
        "num_classes": num_classes,
        "max_in_flight": max_in_flight,
    }
    return json.dumps(payload, separators=(",", ":"))


def parse_request(line: bytes) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RequestError(f"bad json: {exc}") from exc
    if not isinstance(msg, dict):
        raise RequestError("request must be a JSON object")
    rid = msg.get("id")
    if isinstance(rid, bool) or not isinstance(rid, int) or rid < 0:
        raise RequestError("id must be a non-negative integer")
    return msg


def request_id(line: bytes) -> int:
    """Best-effort id extraction so error responses can still be matched."""
    try:
        msg = json.loads(line)
        rid = msg.get("id")
        if isinstance(rid, int) and not isinstance(rid, bool) and rid >= 0:
            return rid
    except Exception:
        pass
    return 0


def parse_dims(msg: dict) -> tuple[int, int]:
    h, w = msg.get("height"), msg.get("width")
    for v in (h, w):
        if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= MAX_SIDE:
            raise RequestError("height/width must be integers in [1, 4096]")
    return h, w


def ok_label(rid: int, label: int) -> str:
    return json.dumps({"id": rid, "label": int(label)}, separators=(",", ":"))


def ok_pixels(rid: int, image: np.ndarray) -> str:
    return json.dumps({"id": rid, "pixels": encode_pixels(image)}, separators=(",", ":"))


def error(rid: int, message: str) -> str:
    return json.dumps({"id": rid, "error": str(message)}, separators=(",", ":"))
