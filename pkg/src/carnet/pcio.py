"""Point cloud frame ingestion and serialization.

Frames are voxelized colored clouds: unique integer coordinates in
lexicographic row order with an N x 3 attribute block, either RGB or YUV,
valued in [0, 2^bitdepth - 1].  PLY files (text or binary little-endian,
x/y/z plus red/green/blue) are the interchange format; color conversion is
BT.709 full-range with the half-peak chroma offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import lexsort_rows, pack_coords, unpack_keys

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_REQUIRED = ("x", "y", "z", "red", "green", "blue")


@dataclass
class PointCloudFrame:
    coords: np.ndarray
    attrs: np.ndarray
    colorspace: str = "rgb"
    bitdepth: int = 8
    source: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.attrs = np.asarray(self.attrs, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError("coords must be (N, 3)")
        if self.attrs.shape != (len(self.coords), 3):
            raise ValueError("attrs must be (N, 3) matching coords")
        if self.colorspace not in ("rgb", "yuv"):
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        order = lexsort_rows(self.coords)
        if not np.array_equal(order, np.arange(len(order))):
            self.coords = self.coords[order]
            self.attrs = self.attrs[order]
        keys = pack_coords(self.coords)
        if len(self.coords) and np.any(np.diff(keys) == 0):
            dup = self.coords[np.nonzero(np.diff(keys) == 0)[0][0] + 1]
            raise ValueError(f"duplicate point at {tuple(int(v) for v in dup)}")

    @property
    def num_points(self) -> int:
        return len(self.coords)

    @property
    def peak(self) -> float:
        return float(2**self.bitdepth - 1)

    def with_attrs(self, attrs, colorspace=None) -> "PointCloudFrame":
        return PointCloudFrame(
            self.coords,
            attrs,
            colorspace or self.colorspace,
            self.bitdepth,
            self.source,
        )


def _parse_header(f):
    def next_line():
        line = f.readline()
        if not line:
            raise ValueError("malformed header: unexpected end of file")
        return line.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise ValueError("not a ply file (missing 'ply' signature)")
    fmt = None
    elements = []  # (name, count, [(prop_name, prop_type), ...])
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ValueError(f"unsupported ply format {parts[1]!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ValueError("malformed header: property before element")
            if parts[1] == "list":
                raise ValueError("list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise ValueError(f"unknown property type {parts[1]!r}")
            elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "ply":
            raise ValueError("malformed header: repeated signature")
    if fmt is None:
        raise ValueError("malformed header: missing format line")
    return fmt, elements


def read_ply(path) -> PointCloudFrame:
    """Read a colored voxel cloud; text and binary little-endian accepted."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise ValueError("no vertex element")
        _, count, props = vertex
        names = [p[0] for p in props]
        for req in _REQUIRED:
            if req not in names:
                raise ValueError(f"missing required property {req!r}")
        extra = [e for e in elements if e[0] != "vertex" and e[1] > 0]
        if extra:
            raise ValueError(f"unsupported non-vertex element {extra[0][0]!r}")

        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + _PLY_TYPES[t]) for n, t in props])
            raw = f.read(dtype.itemsize * count)
            if len(raw) != dtype.itemsize * count:
                raise ValueError("truncated vertex data")
            table = np.frombuffer(raw, dtype=dtype)
        else:
            rows = []
            for _ in range(count):
                line = f.readline()
                if not line:
                    raise ValueError("truncated vertex data")
                fields = line.split()
                if len(fields) != len(props):
                    raise ValueError("vertex row width does not match header")
                rows.append([float(v) for v in fields])
            data = np.asarray(rows, dtype=np.float64).reshape(count, len(props))
            table = {n: data[:, i] for i, (n, _) in enumerate(props)}

    coords = np.stack(
        [np.asarray(table["x"]), np.asarray(table["y"]), np.asarray(table["z"])],
        axis=1,
    ).astype(np.float64)
    if not np.all(coords == np.round(coords)):
        raise ValueError("non-integer coordinates; voxelize the cloud first")
    attrs = np.stack(
        [np.asarray(table["red"]), np.asarray(table["green"]), np.asarray(table["blue"])],
        axis=1,
    ).astype(np.float64)
    return PointCloudFrame(coords.astype(np.int64), attrs, "rgb", source=str(path))


def write_ply(frame: PointCloudFrame, path, binary: bool = True):
    """Write an RGB frame; attributes are rounded to the integer code range."""
    if frame.colorspace != "rgb":
        raise ValueError("convert to rgb before writing")
    colors = np.clip(np.floor(frame.attrs + 0.5), 0, frame.peak).astype(np.uint8)
    coords = frame.coords.astype(np.int32)
    n = frame.num_points
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property int x",
        "property int y",
        "property int z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = np.dtype(
                [(k, "<i4") for k in "xyz"] + [(k, "u1") for k in ("red", "green", "blue")]
            )
            table = np.empty(n, dtype=dtype)
            for i, k in enumerate("xyz"):
                table[k] = coords[:, i]
            for i, k in enumerate(("red", "green", "blue")):
                table[k] = colors[:, i]
            f.write(table.tobytes())
        else:
            for i in range(n):
                row = (*coords[i], *colors[i])
                f.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


# BT.709 luma weights; chroma denominators put U/V back on the code range
_KR, _KG, _KB = 0.2126, 0.7152, 0.0722
_DU = 1.8556
_DV = 1.5748


def rgb_to_yuv(frame: PointCloudFrame) -> PointCloudFrame:
    if frame.colorspace != "rgb":
        raise ValueError("frame is not rgb")
    r, g, b = frame.attrs.T
    y = _KR * r + _KG * g + _KB * b
    offset = 2.0 ** (frame.bitdepth - 1)
    u = (b - y) / _DU + offset
    v = (r - y) / _DV + offset
    yuv = np.clip(np.stack([y, u, v], axis=1), 0.0, frame.peak)
    return frame.with_attrs(yuv, "yuv")


def yuv_to_rgb(frame: PointCloudFrame) -> PointCloudFrame:
    if frame.colorspace != "yuv":
        raise ValueError("frame is not yuv")
    y, u, v = frame.attrs.T
    offset = 2.0 ** (frame.bitdepth - 1)
    b = (u - offset) * _DU + y
    r = (v - offset) * _DV + y
    g = (y - _KR * r - _KB * b) / _KG
    rgb = np.clip(np.stack([r, g, b], axis=1), 0.0, frame.peak)
    return frame.with_attrs(rgb, "rgb")


def voxelize(points: np.ndarray, attrs: np.ndarray, bits: int = 8) -> PointCloudFrame:
    """Quantize raw coordinates to a 2^bits grid, averaging duplicates.

    Already-integral in-range coordinates pass through unchanged, which makes
    the operation idempotent.
    """
    if not 4 <= bits <= 16:
        raise ValueError("bits must be in [4, 16]")
    points = np.asarray(points, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty input")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    limit = 2**bits - 1
    integral = np.all(points == np.round(points))
    if integral and points.min() >= 0 and points.max() <= limit:
        grid = points.astype(np.int64)
    else:
        lo = points.min(axis=0)
        span = float((points - lo).max())
        scale = limit / span if span > 0 else 0.0
        grid = np.floor((points - lo) * scale + 0.5).astype(np.int64)

    keys = pack_coords(grid)
    uniq, inverse = np.unique(keys, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    merged = np.zeros((len(uniq), 3), dtype=np.float64)
    for ch in range(3):
        merged[:, ch] = np.bincount(inverse, weights=attrs[:, ch], minlength=len(uniq))
    merged /= counts[:, None]
    return PointCloudFrame(unpack_keys(uniq), merged, "rgb")
