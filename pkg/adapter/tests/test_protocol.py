import base64
import json
import string

import numpy as np
import pytest

from oracle_adapter import protocol
from oracle_adapter.server import OracleService, ServerConfig

ALLOWED_RESPONSE_SHAPES = [{"id", "label"}, {"id", "pixels"}, {"id", "error"}]
FORBIDDEN_KEYS = {"confidence", "confidences", "logits", "probs", "probabilities", "score", "scores"}


def service() -> OracleService:
    return OracleService(ServerConfig(classifier="echo", restorer="echo"))


def test_codec_involutive_for_every_byte_value():
    ramp = np.arange(256, dtype=np.uint8)
    img = np.repeat(ramp, 3).reshape(16, 16, 3).astype(np.float64) / 255.0
    data = protocol.encode_pixels(img)
    again = protocol.encode_pixels(protocol.decode_pixels(data, 16, 16))
    assert again == data


def test_mask_decode_validates_length_and_alphabet():
    assert protocol.decode_mask("1" * 196).sum() == 196
    for bad in ("1" * 195, "1" * 197, "2" + "1" * 195, ""):
        with pytest.raises(protocol.RequestError):
            protocol.decode_mask(bad)


def test_restore_roundtrip_byte_identical():
    svc = service()
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (224, 224, 3)).astype(np.float64) / 255.0
    pixels = protocol.encode_pixels(img)
    req = {"id": 7, "op": "restore", "width": 224, "height": 224, "pixels": pixels, "mask": "0" * 196}
    resp = json.loads(svc.handle_line(json.dumps(req).encode()))
    assert resp == {"id": 7, "pixels": pixels}


def _fuzz_corpus(n: int) -> list[bytes]:
    rng = np.random.default_rng(42)
    printable = string.printable
    good_pixels = protocol.encode_pixels(rng.random((224, 224, 3)))
    small_pixels = protocol.encode_pixels(rng.random((8, 8, 3)))
    cases: list[bytes] = []
    for i in range(n):
        kind = i % 10
        rid = int(rng.integers(0, 2**53))
        if kind == 0:  # random junk
            length = int(rng.integers(1, 60))
            cases.append("".join(rng.choice(list(printable), length)).encode())
        elif kind == 1:  # truncated base64
            cases.append(json.dumps({"id": rid, "op": "restore", "width": 224, "height": 224,
                                     "pixels": good_pixels[: int(rng.integers(1, 50))],
                                     "mask": "0" * 196}).encode())
        elif kind == 2:  # wrong mask length
            cases.append(json.dumps({"id": rid, "op": "restore", "width": 224, "height": 224,
                                     "pixels": good_pixels,
                                     "mask": "0" * int(rng.integers(0, 300))}).encode())
        elif kind == 3:  # bad dims
            cases.append(json.dumps({"id": rid, "op": "restore", "width": int(rng.integers(-5, 2)),
                                     "height": 224, "pixels": good_pixels, "mask": "0" * 196}).encode())
        elif kind == 4:  # unknown op
            cases.append(json.dumps({"id": rid, "op": "reticulate", "x": 1}).encode())
        elif kind == 5:  # missing id
            cases.append(json.dumps({"op": "classify", "width": 8, "height": 8,
                                     "pixels": small_pixels}).encode())
        elif kind == 6:  # id of wrong type
            cases.append(json.dumps({"id": "seven", "op": "classify", "width": 8, "height": 8,
                                     "pixels": small_pixels}).encode())
        elif kind == 7:  # payload size mismatch
            cases.append(json.dumps({"id": rid, "op": "classify", "width": 16, "height": 16,
                                     "pixels": small_pixels}).encode())
        elif kind == 8:  # valid classify
            cases.append(json.dumps({"id": rid, "op": "classify", "width": 8, "height": 8,
                                     "pixels": small_pixels}).encode())
        else:  # non-object json
            cases.append(json.dumps([rid, "classify"]).encode())
    return cases


def test_fuzz_thousand_cases_no_crash_and_schema_clean():
    svc = service()
    for line in _fuzz_corpus(1000):
        resp = json.loads(svc.handle_line(line))
        keys = set(resp)
        assert keys in ALLOWED_RESPONSE_SHAPES, keys
        assert not (keys & FORBIDDEN_KEYS)
        assert isinstance(resp["id"], int)
        if "label" in resp:
            assert isinstance(resp["label"], int)


def test_error_responses_echo_request_id():
    svc = service()
    resp = json.loads(svc.handle_line(b'{"id": 12345, "op": "nope"}'))
    assert resp["id"] == 12345 and "error" in resp
    # unparseable id falls back to 0
    resp = json.loads(svc.handle_line(b"garbage"))
    assert resp["id"] == 0 and "error" in resp


def test_classify_never_exposes_confidences():
    svc = service()
    pixels = protocol.encode_pixels(np.zeros((8, 8, 3)))
    resp = json.loads(svc.handle_line(json.dumps(
        {"id": 1, "op": "classify", "width": 8, "height": 8, "pixels": pixels}).encode()))
    assert set(resp) == {"id", "label"}
