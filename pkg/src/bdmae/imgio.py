"""Raster IO: binary PPM images, 16-bit PGM score maps, dataset manifests.

PPM (P6, maxval 255) is the dependency-free interchange format; pixels are
round(p*255). Score maps go out as 16-bit PGM (P5) with values clipped to
[0, 1] first, which is a display convention only; the pipeline itself never
clips scores. PNG is supported when Pillow is importable. All writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def image_to_ppm_bytes(image: np.ndarray) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + quant.tobytes()


def _parse_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integers, skipping # comments."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(int(data[i:j]))
            i = j
    return tokens, i + 1  # header ends with exactly one whitespace byte


def ppm_bytes_to_image(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM (P6) file")
    (w, h, maxval), offset = _parse_header_tokens(data[2:], 3)
    offset += 2
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    body = data[offset : offset + h * w * 3]
    if len(body) != h * w * 3:
        raise ValueError("truncated PPM pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    atomic_write_bytes(Path(path), image_to_ppm_bytes(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return ppm_bytes_to_image(Path(path).read_bytes())


def score_map_to_pgm_bytes(scores: np.ndarray) -> bytes:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D score grid, got {arr.shape}")
    h, w = arr.shape
    quant = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(">u2")
    return b"P5\n%d %d\n65535\n" % (w, h) + quant.tobytes()


def write_pgm16(path: str | Path, scores: np.ndarray) -> None:
    atomic_write_bytes(Path(path), score_map_to_pgm_bytes(scores))


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write PPM natively; .png goes through Pillow when available."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        quant = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
        try:
            from PIL import Image
        except ImportError as exc:
            raise ValueError("PNG output requires Pillow; use .ppm instead") from exc
        import io

        buf = io.BytesIO()
        Image.fromarray(quant, mode="RGB").save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
        return
    write_ppm(path, image)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ValueError("PNG input requires Pillow; use .ppm instead") from exc
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
        return arr / 255.0
    return read_ppm(path)


def write_json(path: str | Path, payload: dict) -> None:
    atomic_write_bytes(Path(path), (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def export_dataset(dataset, out_dir: str | Path, image_format: str = "ppm") -> dict:
    """Write every image plus a manifest mapping files to labels/targets."""
    out = Path(out_dir)
    items = []
    for i, (img, label) in enumerate(dataset.clean):
        name = f"clean_{i:04d}.{image_format}"
        write_image(out / name, img)
        items.append({"file": name, "label": int(label), "target": None})
    for i, (img, label, target) in enumerate(dataset.triggered):
        name = f"triggered_{i:04d}.{image_format}"
        write_image(out / name, img)
        items.append({"file": name, "label": int(label), "target": int(target)})
    manifest = {"items": items}
    write_json(out / MANIFEST_NAME, manifest)
    return manifest


def import_dataset(manifest_path: str | Path):
    """Load a dataset exported by export_dataset (or hand-written manifests)."""
    from .attacksim import Dataset

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    payload = json.loads(manifest_path.read_text())
    items = payload.get("items")
    if not isinstance(items, list):
        raise ValueError("manifest must contain an 'items' list")
    ds = Dataset()
    for item in items:
        img = read_image(base / item["file"])
        label = int(item["label"])
        target = item.get("target")
        if target is None:
            ds.clean.append((img, label))
        else:
            ds.triggered.append((img, label, int(target)))
    return ds
