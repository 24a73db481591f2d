"""File formats: PNG / PPM images, a self-describing binary grid, CSV, JSON."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DepthMap, GradientField, TactileImage

GRID_MAGIC = b"TSGRID01"
_DTYPES = {b"f8": np.float64, b"f4": np.float32, b"i4": np.int32, b"u1": np.uint8}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def read_image(path) -> TactileImage:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return TactileImage(read_ppm(path))
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"))
    return TactileImage(a)


def write_image(path, image: TactileImage) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(path, image.to_uint8())
    else:
        Image.fromarray(image.to_uint8(), mode="RGB").save(path, format="PNG")


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: only binary P6 pixmaps are supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3)


def write_grid(path, array: np.ndarray) -> None:
    """Binary grid: magic, dtype code, rank, dims (uint32 LE), row-major payload."""
    a = np.asarray(array)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    if a.dtype not in _CODES:
        a = a.astype(np.float64)
    header = GRID_MAGIC + _CODES[a.dtype] + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def read_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise FormatError(f"{path}: not a grid file")
    code = raw[8:10]
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown element type {code!r}")
    (ndim,) = struct.unpack_from("<I", raw, 10)
    shape = struct.unpack_from(f"<{ndim}I", raw, 14)
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    data = np.frombuffer(raw, dtype=dtype, offset=14 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: payload size does not match header")
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_depth(path, depth: DepthMap) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        np.savetxt(path, depth.z, delimiter=",", fmt="%.9g")
    else:
        write_grid(path, depth.z)


def load_depth(path) -> DepthMap:
    path = Path(path)
    if path.suffix == ".csv":
        return DepthMap(np.loadtxt(path, delimiter=",", ndmin=2))
    return DepthMap(read_grid(path))


def save_gradients(path, grad: GradientField) -> None:
    path = Path(path)
    stacked = np.stack([grad.p, grad.q])
    if path.suffix == ".csv":
        h, w = grad.shape
        rows, cols = np.mgrid[0:h, 0:w]
        table = np.column_stack([rows.ravel(), cols.ravel(), grad.p.ravel(), grad.q.ravel()])
        np.savetxt(path, table, delimiter=",", header="row,col,p,q", comments="", fmt=["%d", "%d", "%.9g", "%.9g"])
    else:
        write_grid(path, stacked)


def load_gradients(path) -> GradientField:
    path = Path(path)
    if path.suffix == ".csv":
        t = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        h, w = int(t[:, 0].max()) + 1, int(t[:, 1].max()) + 1
        p = np.zeros((h, w))
        q = np.zeros((h, w))
        p[t[:, 0].astype(int), t[:, 1].astype(int)] = t[:, 2]
        q[t[:, 0].astype(int), t[:, 1].astype(int)] = t[:, 3]
        return GradientField(p, q)
    a = read_grid(path)
    if a.ndim != 3 or a.shape[0] != 2:
        raise FormatError(f"{path}: expected a (2, H, W) gradient grid")
    return GradientField(a[0], a[1])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
