"""Point cloud container, file I/O, normalisation and sampling."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMATS = ("xyz-text", "ply-ascii-subset", "raw-f32le", "pcf")
PCF_MAGIC = b"PCF1"


class CloudFormatError(ValueError):
    """Raised when a cloud file cannot be parsed under its declared format."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered, immutable set of finite 3D points (``N x 3``).

    The coordinate dtype is kept as given (float32 from binary files,
    float64 otherwise) so binary round trips stay bit-exact.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.dtype not in (np.float32, np.float64):
            pts = pts.astype(np.float64)
        pts = pts.reshape(-1, 3) if pts.ndim == 1 and pts.size % 3 == 0 else pts
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts = np.array(pts, copy=True, order="C")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (self.points.dtype == other.points.dtype
                and np.array_equal(self.points, other.points))

    def __hash__(self):
        return hash((self.points.dtype.str, self.points.tobytes()))

    def as_float64(self) -> np.ndarray:
        return self.points.astype(np.float64, copy=False)


def as_points(cloud) -> np.ndarray:
    """Coordinates of a PointCloud or array-like as an ``(N, 3)`` array."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


# ---------------------------------------------------------------------------
# I/O


def _parse_xyz(text: str, origin: str) -> np.ndarray:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise CloudFormatError(f"{origin}:{lineno}: expected 3 values, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError as exc:
            raise CloudFormatError(f"{origin}:{lineno}: {exc}") from None
        if not all(np.isfinite(rows[-1])):
            raise CloudFormatError(f"{origin}:{lineno}: non-finite coordinate")
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _parse_ply(text: str, origin: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{origin}:1: missing 'ply' magic")
    n_vertex = None
    props = []
    i = 1
    while True:
        if i >= len(lines):
            raise CloudFormatError(f"{origin}: missing end_header")
        tokens = lines[i].split()
        i += 1
        if not tokens or tokens[0] == "comment":
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise CloudFormatError(f"{origin}:{i}: only 'format ascii 1.0' is supported")
        elif key == "element":
            if tokens[1] != "vertex" or n_vertex is not None:
                raise CloudFormatError(f"{origin}:{i}: unsupported element '{tokens[1]}'")
            try:
                n_vertex = int(tokens[2])
            except (IndexError, ValueError):
                raise CloudFormatError(f"{origin}:{i}: bad vertex count") from None
        elif key == "property":
            if len(tokens) != 3 or tokens[1] not in ("float", "float32", "double", "float64"):
                raise CloudFormatError(f"{origin}:{i}: unsupported property '{' '.join(tokens[1:])}'")
            props.append(tokens[2])
        else:
            raise CloudFormatError(f"{origin}:{i}: unexpected header line")
    if n_vertex is None:
        raise CloudFormatError(f"{origin}: no vertex element")
    if props != ["x", "y", "z"]:
        raise CloudFormatError(f"{origin}: vertex properties must be exactly x, y, z")
    body = [ln for ln in lines[i:] if ln.strip()]
    if len(body) != n_vertex:
        raise CloudFormatError(f"{origin}: header declares {n_vertex} vertices, found {len(body)}")
    rows = []
    for k, ln in enumerate(body):
        fields = ln.split()
        try:
            if len(fields) != 3:
                raise ValueError(f"expected 3 values, got {len(fields)}")
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise CloudFormatError(f"{origin}:{i + k + 1}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise CloudFormatError(f"{origin}:{i + k + 1}: non-finite coordinate")
        rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _parse_f32(data: bytes, origin: str, offset: int = 0) -> np.ndarray:
    body = len(data) - offset
    if body % 12:
        raise CloudFormatError(f"{origin}: byte {len(data) - body % 12}: truncated point record")
    pts = np.frombuffer(data, dtype="<f4", offset=offset).reshape(-1, 3)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise CloudFormatError(f"{origin}: byte {offset + 12 * k}: non-finite coordinate")
    return pts.astype(np.float32)


def _parse_pcf(data: bytes, origin: str) -> np.ndarray:
    if len(data) < 12 or data[:4] != PCF_MAGIC:
        raise CloudFormatError(f"{origin}: byte 0: bad PCF1 header")
    (count,) = struct.unpack_from("<Q", data, 4)
    if len(data) - 12 != 12 * count:
        raise CloudFormatError(
            f"{origin}: byte 12: header declares {count} points, body holds {(len(data) - 12) / 12:g}")
    return _parse_f32(data, origin, offset=12)


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read a cloud; ``format`` defaults to a guess from the file extension."""
    path = Path(path)
    fmt = format or guess_format(path)
    if fmt in ("xyz-text", "ply-ascii-subset"):
        text = path.read_text(encoding="utf-8")
        pts = _parse_xyz(text, str(path)) if fmt == "xyz-text" else _parse_ply(text, str(path))
    elif fmt == "raw-f32le":
        pts = _parse_f32(path.read_bytes(), str(path))
    elif fmt == "pcf":
        pts = _parse_pcf(path.read_bytes(), str(path))
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")
    if pts.shape[0] == 0:
        raise CloudFormatError(f"{path}: file contains zero points")
    return PointCloud(pts)


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    path = Path(path)
    fmt = format or guess_format(path)
    pts = cloud.points
    if fmt == "xyz-text":
        body = "".join("%.17g %.17g %.17g\n" % tuple(p) for p in pts.astype(np.float64))
        path.write_text(body, encoding="utf-8")
    elif fmt == "ply-ascii-subset":
        header = ("ply\nformat ascii 1.0\nelement vertex %d\n"
                  "property float x\nproperty float y\nproperty float z\nend_header\n" % len(pts))
        body = "".join("%.17g %.17g %.17g\n" % tuple(p) for p in pts.astype(np.float64))
        path.write_text(header + body, encoding="utf-8")
    elif fmt == "raw-f32le":
        path.write_bytes(pts.astype("<f4").tobytes())
    elif fmt == "pcf":
        path.write_bytes(PCF_MAGIC + struct.pack("<Q", len(pts)) + pts.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")


def guess_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    return {
        ".xyz": "xyz-text", ".txt": "xyz-text", ".ply": "ply-ascii-subset",
        ".f32": "raw-f32le", ".bin": "raw-f32le", ".pcf": "pcf",
    }.get(ext, "xyz-text")


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0


def aabb(cloud) -> Aabb:
    pts = as_points(cloud).astype(np.float64, copy=False)
    if pts.shape[0] == 0:
        raise ValueError("aabb of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


@dataclass(frozen=True)
class NormalizeTransform:
    """``apply(p) = (p - center) * scale``; ``invert`` undoes it."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive and finite")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "NormalizeTransform":
        return cls(np.zeros(3), 1.0)

    def apply(self, points) -> np.ndarray:
        return (as_points(points).astype(np.float64) - self.center) * self.scale

    def invert(self, points) -> np.ndarray:
        return as_points(points).astype(np.float64) / self.scale + self.center


def normalize_to_unit(cloud) -> tuple[PointCloud, NormalizeTransform]:
    """Center on the AABB center and scale the longest side to 1.

    The result lies inside ``[-0.5, 0.5]^3``. Zero-extent clouds are rejected.
    """
    box = aabb(cloud)
    longest = float(box.extent.max())
    if not longest > 0:
        raise ValueError("degenerate cloud: all points coincide")
    tf = NormalizeTransform(box.center, 1.0 / longest)
    return PointCloud(tf.apply(cloud)), tf


def downsample_random(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Seeded subset of ``n`` distinct points, or padding by resampling.

    With fewer than ``n`` points, all inputs are kept (in permuted order) and
    the remainder is drawn with replacement.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = as_points(cloud)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    perm = rng.permutation(pts.shape[0])
    if pts.shape[0] >= n:
        return PointCloud(pts[perm[:n]])
    extra = rng.integers(0, pts.shape[0], size=n - pts.shape[0])
    return PointCloud(pts[np.concatenate([perm, extra])])


def farthest_point_sample(cloud, n: int) -> PointCloud:
    """Greedy farthest-point subset of size ``n``.

    The seed point is the lowest-index point among those farthest from the
    centroid; later picks break ties towards the lowest index as well.
    """
    pts = as_points(cloud)
    N = pts.shape[0]
    if not 1 <= n <= N:
        raise ValueError(f"n must lie in [1, {N}], got {n}")
    p64 = pts.astype(np.float64)
    d_centroid = ((p64 - p64.mean(axis=0)) ** 2).sum(axis=1)
    picked = np.empty(n, dtype=np.int64)
    picked[0] = int(np.argmax(d_centroid))
    min_d = ((p64 - p64[picked[0]]) ** 2).sum(axis=1)
    min_d[picked[0]] = -1.0
    for k in range(1, n):
        picked[k] = int(np.argmax(min_d))
        min_d = np.minimum(min_d, ((p64 - p64[picked[k]]) ** 2).sum(axis=1))
        # already chosen indices must never win again, even among duplicates
        min_d[picked[: k + 1]] = -1.0
    return PointCloud(pts[picked])
