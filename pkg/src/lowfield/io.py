"""File formats: FMAP v1 field maps, SIGDAT v1 signals, CSV tables, 16-bit rasters.

Both binary formats pair a UTF-8 JSON header with a companion ``.raw``
file of little-endian float64 values.
"""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from ._validation import FormatError
from .fieldmap import FieldMap, Grid3

__all__ = [
    "write_fmap",
    "read_fmap",
    "write_sigdat",
    "read_sigdat",
    "write_csv",
    "read_csv",
    "write_pgm",
    "write_png",
    "read_raster",
    "canonical_hash",
]

_FMAP_KEYS = {
    "format": str, "version": int,
    "nx": int, "ny": int, "nz": int,
    "dx": float, "dy": float, "dz": float,
    "origin": list, "units": str, "label": str,
}
_SIGDAT_KEYS = {
    "format": str, "version": int,
    "n_shots": int, "n_echoes": int, "n_samples": int,
    "dwell": float, "protocol_hash": str,
}


def _companion(path):
    path = Path(path)
    return path.with_suffix(".raw")


def canonical_hash(obj):
    """sha256 of the canonical JSON encoding of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _read_header(path, keys, fmt):
    try:
        header = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a key/value object")
    for key, typ in keys.items():
        if key not in header:
            raise FormatError(f"{path}: missing header key {key!r}")
        val = header[key]
        if typ is float:
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        elif typ is int:
            ok = isinstance(val, int) and not isinstance(val, bool)
        else:
            ok = isinstance(val, typ)
        if not ok:
            raise FormatError(f"{path}: header key {key!r} has invalid value {val!r}")
    if header["format"] != fmt:
        raise FormatError(f"{path}: header key 'format' must be {fmt!r}, got {header['format']!r}")
    if header["version"] != 1:
        raise FormatError(f"{path}: header key 'version' must be 1, got {header['version']!r}")
    return header


def write_fmap(path, fmap, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = fmap.grid
    header = {
        "format": "FMAP", "version": 1,
        "nx": g.nx, "ny": g.ny, "nz": g.nz,
        "dx": g.dx, "dy": g.dy, "dz": g.dz,
        "origin": list(g.origin),
        "units": fmap.units, "label": fmap.label,
    }
    if extra:
        header.update(extra)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    np.asarray(fmap.values, dtype="<f8").tofile(_companion(path))
    return path


def read_fmap(path, return_header=False):
    header = _read_header(path, _FMAP_KEYS, "FMAP")
    if len(header["origin"]) != 3:
        raise FormatError(f"{path}: header key 'origin' must have 3 entries")
    try:
        grid = Grid3(header["nx"], header["ny"], header["nz"], header["dx"], header["dy"], header["dz"],
                     tuple(header["origin"]))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid ({exc})") from exc
    raw = _companion(path)
    if not raw.exists():
        raise FileNotFoundError(f"missing FMAP payload {raw}")
    values = np.fromfile(raw, dtype="<f8")
    if values.size != grid.size:
        raise FormatError(f"{raw}: payload has {values.size} values, header requires {grid.size}")
    fmap = FieldMap(grid, values, header["label"], header["units"])
    return (fmap, header) if return_header else fmap


def write_sigdat(path, samples, dwell, protocol_hash, extra=None):
    """Write a complex (n_shots, n_echoes, n_samples) array; samples fastest, shots slowest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = np.asarray(samples, dtype=complex)
    if samples.ndim != 3:
        raise ValueError("SIGDAT samples must be 3-D (n_shots, n_echoes, n_samples)")
    header = {
        "format": "SIGDAT", "version": 1,
        "n_shots": samples.shape[0], "n_echoes": samples.shape[1], "n_samples": samples.shape[2],
        "dwell": float(dwell), "protocol_hash": str(protocol_hash),
    }
    if extra:
        header.update(extra)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    np.ascontiguousarray(samples).astype("<c16").tofile(_companion(path))
    return path


def read_sigdat(path):
    """Return ``(samples, header)``."""
    header = _read_header(path, _SIGDAT_KEYS, "SIGDAT")
    shape = (header["n_shots"], header["n_echoes"], header["n_samples"])
    raw = _companion(path)
    if not raw.exists():
        raise FileNotFoundError(f"missing SIGDAT payload {raw}")
    data = np.fromfile(raw, dtype="<f8")
    if data.size != 2 * int(np.prod(shape)):
        raise FormatError(f"{raw}: payload has {data.size} floats, header requires {2 * int(np.prod(shape))}")
    samples = (data[0::2] + 1j * data[1::2]).reshape(shape)
    return samples, header


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _to_u16(image, window=None):
    img = np.asarray(image, dtype=float)
    finite = np.isfinite(img)
    if window is None:
        lo = float(img[finite].min()) if finite.any() else 0.0
        hi = float(img[finite].max()) if finite.any() else 1.0
    else:
        lo, hi = (float(v) for v in window)
    span = hi - lo if hi > lo else 1.0
    scaled = np.where(finite, (img - lo) / span, 0.0)
    out = np.clip(np.round(scaled * 65535), 0, 65535).astype(np.uint16)
    return out, (lo, hi)


def write_pgm(path, image, window=None):
    """Binary 16-bit PGM (P5, big-endian).  Returns the (low, high) window used."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data, win = _to_u16(image, window)
    h, w = data.shape
    with path.open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.astype(">u2").tobytes())
    return win


def write_png(path, image, window=None):
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data, win = _to_u16(image, window)
    Image.fromarray(data.astype(np.uint16)).save(path)
    return win


def read_raster(path):
    """Grayscale PGM/PNG as float array scaled to [0, 1] (rows, cols)."""
    from PIL import Image

    with Image.open(path) as im:
        wide = im.mode.startswith("I")
        if im.mode not in ("L",) and not wide:
            im = im.convert("L")
        arr = np.asarray(im).astype(float)
    return arr / (65535.0 if wide else 255.0)
