"""File formats: raw volumes with JSON sidecars, PPM and raw-rgba images.

Volumes are stored as little-endian float32 in x-fastest order; the sidecar
``<name>.json`` carries dims, world box and an optional value range used to
normalize to [0, 1] on load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, InvalidParameterError, MissingMetadataError
from .field import DensityVolume, TransferFunction
from .renderer import ImageRGBA

SCHEMA_VERSION = 1


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".raw", ".json") else p


def save_volume(volume: DensityVolume, path) -> Path:
    """Write ``<stem>.raw`` plus its JSON sidecar; returns the raw path."""
    stem = _stem(path)
    raw_path = stem.with_suffix(".raw")
    data = np.asarray(volume.values, dtype="<f4")
    raw_path.write_bytes(data.ravel(order="F").tobytes())
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "dims": list(volume.values.shape),
        "box_min": [float(c) for c in volume.box_min],
        "box_max": [float(c) for c in volume.box_max],
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return raw_path


def load_volume(path) -> DensityVolume:
    """Read a raw volume through its sidecar; normalizes if a range is given."""
    stem = _stem(path)
    raw_path = stem.with_suffix(".raw")
    meta_path = stem.with_suffix(".json")
    if not meta_path.exists():
        raise MissingMetadataError(f"sidecar not found: {meta_path}")
    if not raw_path.exists():
        raise CorruptFileError(f"raw data not found: {raw_path}")
    meta = json.loads(meta_path.read_text())
    for key in ("dims", "box_min", "box_max"):
        if key not in meta:
            raise MissingMetadataError(f"sidecar missing field {key!r}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise MissingMetadataError(f"invalid dims {dims} in sidecar")
    blob = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(blob) != expected:
        raise CorruptFileError(
            f"{raw_path}: expected {expected} bytes for dims {dims}, found {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4").reshape(dims, order="F").astype(np.float64)
    if "value_range" in meta and meta["value_range"] is not None:
        lo, hi = (float(v) for v in meta["value_range"])
        if hi <= lo:
            raise MissingMetadataError("value_range must be increasing")
        values = (values - lo) / (hi - lo)
    return DensityVolume(values, np.asarray(meta["box_min"]), np.asarray(meta["box_max"]))


def save_tf(tf: TransferFunction, path) -> Path:
    p = Path(path)
    p.write_text(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "texels": [[float(c) for c in row] for row in tf.texels],
    }, indent=2) + "\n")
    return p


def load_tf(path) -> TransferFunction:
    p = Path(path)
    if not p.exists():
        raise MissingMetadataError(f"transfer function file not found: {p}")
    meta = json.loads(p.read_text())
    if "texels" not in meta:
        raise MissingMetadataError("transfer function file missing 'texels'")
    return TransferFunction(np.asarray(meta["texels"], dtype=np.float64))


def save_image(img: ImageRGBA, path, fmt: str | None = None) -> Path:
    """Write an image as binary PPM (over white) or as a raw float32 dump.

    ``fmt`` is inferred from the extension when omitted: ``.ppm`` or
    ``.rgba``.
    """
    p = Path(path)
    if fmt is None:
        fmt = {"ppm": "ppm", "rgba": "raw-rgba"}.get(p.suffix.lstrip("."), None)
        if fmt is None:
            raise InvalidParameterError(f"cannot infer image format from {p.suffix!r}")
    if fmt == "ppm":
        data = img.data
        alpha = data[..., 3:4]
        rgb = data[..., :3] + (1.0 - alpha)  # premultiplied over white
        quant = np.round(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        p.write_bytes(header + quant.tobytes())
    elif fmt == "raw-rgba":
        p.write_bytes(np.asarray(img.data, dtype="<f4").tobytes())
    else:
        raise InvalidParameterError(f"unknown image format {fmt!r}")
    return p


def load_image_rgba(path, width: int, height: int) -> ImageRGBA:
    """Read back a raw-rgba dump written by :func:`save_image`."""
    blob = Path(path).read_bytes()
    expected = width * height * 4 * 4
    if len(blob) != expected:
        raise CorruptFileError(
            f"{path}: expected {expected} bytes for {width}x{height} rgba, found {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4").reshape(height, width, 4).astype(np.float64)
    return ImageRGBA(data)
