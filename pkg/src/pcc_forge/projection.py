"""Six-face orthographic depth projection and depth-map file formats.

Face orientation table (viewer outside the unit cube looking along -axis
toward the origin; ``u`` grows to the right, ``v`` grows downward, row 0 is
the top of the image). Raw depth is measured from the face's near plane, so
the nearest surface has the smallest depth.

=====  ==========  =====  =====
face   raw depth   u      v
=====  ==========  =====  =====
+X     0.5 - x     +y     -z
-X     0.5 + x     -y     -z
+Y     0.5 - y     -x     -z
-Y     0.5 + y     +x     -z
+Z     0.5 - z     +x     -y
-Z     0.5 + z     -x     -y
=====  ==========  =====  =====

Consequences the tests rely on: opposite faces share a silhouette mirrored
in ``u``; rotating a cloud by +90 degrees about z sends the +X map to the +Y
map, +Y to -X, -X to -Y and -Y to +X unchanged, and rotates the +Z and -Z
images by a quarter turn (``np.rot90`` / ``np.rot90(k=-1)``).

Pixel mapping: ``col = floor((u + 0.5) * W)``, ``row = floor((v + 0.5) * H)``,
clamped to the image so points on the +0.5 boundary land in the last pixel.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import NormalizeTransform, PointCloud, as_points

DEFAULT_RESOLUTION = (224, 224)
PDM_MAGIC = b"PDM1"
_PDM_HEADER = struct.Struct("<4sIIIff")
NORMALIZED_TOL = 1e-9


class Face(enum.IntEnum):
    PX = 0
    NX = 1
    PY = 2
    NY = 3
    PZ = 4
    NZ = 5

    @property
    def label(self) -> str:
        return ("+X", "-X", "+Y", "-Y", "+Z", "-Z")[self]

    @property
    def slug(self) -> str:
        return ("px", "nx", "py", "ny", "pz", "nz")[self]

    @classmethod
    def parse(cls, text) -> "Face":
        if isinstance(text, (int, np.integer)):
            return cls(int(text))
        text = str(text).strip()
        for f in cls:
            if text in (f.label, f.slug, f.name, str(int(f))):
                return f
        raise ValueError(f"unknown face {text!r}")


# (view axis, near-plane sign, u axis, u sign, v axis, v sign)
FACE_TABLE = {
    Face.PX: (0, +1, 1, +1, 2, -1),
    Face.NX: (0, -1, 1, -1, 2, -1),
    Face.PY: (1, +1, 0, -1, 2, -1),
    Face.NY: (1, -1, 0, +1, 2, -1),
    Face.PZ: (2, +1, 0, +1, 1, -1),
    Face.NZ: (2, -1, 0, -1, 1, -1),
}


class MapFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DepthMap:
    """One face's normalised depth image.

    ``depth`` is float32 in ``[0, 1]`` on occupied pixels and 0 elsewhere;
    ``depth_min``/``depth_max`` are the raw depths that map to 0 and 1.
    """

    face: Face
    depth: np.ndarray
    occupancy: np.ndarray
    depth_min: float = 0.0
    depth_max: float = 0.0
    externally_inpainted: bool = False

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float32, copy=True)
        occ = np.array(self.occupancy, dtype=bool, copy=True)
        if depth.ndim != 2 or depth.shape != occ.shape:
            raise ValueError("depth and occupancy must be matching 2D grids")
        depth[~occ] = 0.0
        depth.setflags(write=False)
        occ.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "face", Face.parse(self.face))
        object.__setattr__(self, "depth_min", float(np.float32(self.depth_min)))
        object.__setattr__(self, "depth_max", float(np.float32(self.depth_max)))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    def same_as(self, other: "DepthMap") -> bool:
        """Bit-exact equality of face, grids and denormalisation pair."""
        return (self.face == other.face
                and self.depth.shape == other.depth.shape
                and self.depth.tobytes() == other.depth.tobytes()
                and np.array_equal(self.occupancy, other.occupancy)
                and np.float32(self.depth_min).tobytes() == np.float32(other.depth_min).tobytes()
                and np.float32(self.depth_max).tobytes() == np.float32(other.depth_max).tobytes())


@dataclass(frozen=True)
class DepthMapSet:
    maps: tuple
    transform: NormalizeTransform = field(default_factory=NormalizeTransform.identity)

    def __post_init__(self):
        maps = tuple(self.maps)
        if len(maps) != 6 or [m.face for m in maps] != list(Face):
            raise ValueError("a DepthMapSet holds exactly one map per face in +X,-X,+Y,-Y,+Z,-Z order")
        if len({m.resolution for m in maps}) != 1:
            raise ValueError("all six maps must share one resolution")
        object.__setattr__(self, "maps", maps)

    def __getitem__(self, face) -> DepthMap:
        return self.maps[Face.parse(face)]

    def __iter__(self):
        return iter(self.maps)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps[0].resolution


def _check_resolution(resolution) -> tuple[int, int]:
    if isinstance(resolution, (int, np.integer)):
        resolution = (int(resolution), int(resolution))
    H, W = (int(r) for r in resolution)
    if H < 2 or W < 2 or H % 2 or W % 2:
        raise ValueError(f"resolution must be even and >= 2 in both dimensions, got {H}x{W}")
    return H, W


def face_coordinates(points: np.ndarray, face: Face) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(u, v, raw_depth)`` of every point for one face."""
    axis, sign, ua, us, va, vs = FACE_TABLE[Face.parse(face)]
    depth = 0.5 - points[:, axis] if sign > 0 else 0.5 + points[:, axis]
    u = points[:, ua] if us > 0 else -points[:, ua]
    v = points[:, va] if vs > 0 else -points[:, va]
    return u, v, depth


def pixel_indices(u: np.ndarray, v: np.ndarray, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    col = np.clip(np.floor((u + 0.5) * W), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor((v + 0.5) * H), 0, H - 1).astype(np.int64)
    return row, col


def zbuffer(cloud, face, resolution) -> np.ndarray:
    """Raw (un-normalised) minimum depth per pixel; ``inf`` where empty."""
    H, W = _check_resolution(resolution)
    pts = np.asarray(as_points(cloud), dtype=np.float64)
    u, v, depth = face_coordinates(pts, Face.parse(face))
    row, col = pixel_indices(u, v, H, W)
    buf = np.full(H * W, np.inf)
    np.minimum.at(buf, row * W + col, depth)
    return buf.reshape(H, W)


def normalize_depth(raw: np.ndarray, face) -> DepthMap:
    """Min-max normalise a raw z-buffer over its occupied pixels."""
    occ = np.isfinite(raw)
    if not occ.any():
        return DepthMap(face, np.zeros(raw.shape, np.float32), occ)
    vals = raw[occ]
    dmin, dmax = float(vals.min()), float(vals.max())
    norm = np.zeros(raw.shape)
    if dmax > dmin:
        norm[occ] = (vals - dmin) / (dmax - dmin)
    return DepthMap(face, norm.astype(np.float32), occ, dmin, dmax)


def project(cloud, resolution=DEFAULT_RESOLUTION, transform: NormalizeTransform | None = None) -> DepthMapSet:
    """Project a cloud normalised to ``[-0.5, 0.5]^3`` onto the six faces."""
    H, W = _check_resolution(resolution)
    pts = np.asarray(as_points(cloud), dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError("cannot project an empty cloud")
    if np.abs(pts).max() > 0.5 + NORMALIZED_TOL:
        raise ValueError("cloud is not normalised to [-0.5, 0.5]^3; run normalize_to_unit first")
    maps = tuple(normalize_depth(zbuffer(pts, f, (H, W)), f) for f in Face)
    return DepthMapSet(maps, transform or NormalizeTransform.identity())


def unproject(dmap: DepthMap, transform: NormalizeTransform | None = None) -> PointCloud:
    """One point per occupied pixel, at the pixel centre and denormalised depth."""
    if not dmap.occupancy.any():
        raise ValueError("cannot unproject an empty map")
    H, W = dmap.resolution
    rows, cols = np.nonzero(dmap.occupancy)
    u = (cols + 0.5) / W - 0.5
    v = (rows + 0.5) / H - 0.5
    d = dmap.depth[rows, cols].astype(np.float64)
    raw = dmap.depth_min + d * (dmap.depth_max - dmap.depth_min)
    axis, sign, ua, us, va, vs = FACE_TABLE[dmap.face]
    pts = np.empty((rows.shape[0], 3))
    pts[:, axis] = 0.5 - raw if sign > 0 else raw - 0.5
    pts[:, ua] = u * us
    pts[:, va] = v * vs
    if transform is not None:
        pts = transform.invert(pts)
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# block partition


def split_blocks(dmap: DepthMap) -> tuple[DepthMap, DepthMap, DepthMap, DepthMap]:
    """Four quadrants in row-major order (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)."""
    H, W = dmap.resolution
    if H % 2 or W % 2:
        raise ValueError(f"block split needs even dimensions, got {H}x{W}")
    h, w = H // 2, W // 2
    out = []
    for b in range(4):
        r, c = divmod(b, 2)
        sl = (slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w))
        out.append(replace(dmap, depth=dmap.depth[sl], occupancy=dmap.occupancy[sl]))
    return tuple(out)


def join_blocks(blocks) -> DepthMap:
    b0, b1, b2, b3 = blocks
    depth = np.block([[b0.depth, b1.depth], [b2.depth, b3.depth]])
    occ = np.block([[b0.occupancy, b1.occupancy], [b2.occupancy, b3.occupancy]])
    return replace(b0, depth=depth, occupancy=occ)


def block_of_pixel(row, col, H: int, W: int):
    """Block id of pixel coordinates (vectorised)."""
    return (np.asarray(row) >= H // 2) * 2 + (np.asarray(col) >= W // 2)


# ---------------------------------------------------------------------------
# hole filling


def inpaint_naive(dmap: DepthMap, max_iters: int = 1000, epsilon: float = 1e-6) -> DepthMap:
    """Diffusion fill of unoccupied pixels from their occupied 4-neighbours.

    Each sweep sets every non-original pixel that touches at least one
    occupied pixel to the mean of those neighbours (Jacobi update, so the
    result does not depend on scan order). Original pixels are fixed.
    Stops when a sweep fills no new pixel and changes no value by more than
    ``epsilon``, or after ``max_iters`` sweeps.
    """
    if not dmap.occupancy.any():
        raise ValueError("cannot inpaint an empty map")
    fixed = dmap.occupancy
    occ = fixed.copy()
    val = np.where(fixed, dmap.depth.astype(np.float64), 0.0)
    free = ~fixed
    for _ in range(max_iters):
        if not free.any():
            break
        s = np.zeros_like(val)
        n = np.zeros(val.shape, dtype=np.int64)
        wv = np.where(occ, val, 0.0)
        wo = occ.astype(np.int64)
        s[1:, :] += wv[:-1, :]
        n[1:, :] += wo[:-1, :]
        s[:-1, :] += wv[1:, :]
        n[:-1, :] += wo[1:, :]
        s[:, 1:] += wv[:, :-1]
        n[:, 1:] += wo[:, :-1]
        s[:, :-1] += wv[:, 1:]
        n[:, :-1] += wo[:, 1:]
        update = free & (n > 0)
        new_val = val.copy()
        new_val[update] = s[update] / n[update]
        grown = update & ~occ
        was = update & occ
        change = float(np.abs(new_val[was] - val[was]).max()) if was.any() else 0.0
        val = np.clip(new_val, 0.0, 1.0)
        occ = occ | update
        if not grown.any() and change < epsilon:
            break
    return replace(dmap, depth=val.astype(np.float32), occupancy=occ)


# ---------------------------------------------------------------------------
# file formats


def _pgm_encode(dmap: DepthMap) -> np.ndarray:
    enc = 1 + np.rint(dmap.depth.astype(np.float64) * 65534.0)
    return np.where(dmap.occupancy, enc, 0).astype(">u2")


def save_map(dmap: DepthMap, path, format: str = "raw-f32le-map") -> None:
    path = Path(path)
    H, W = dmap.resolution
    if format == "raw-f32le-map":
        vals = np.where(dmap.occupancy, dmap.depth, np.float32(np.nan)).astype("<f4")
        header = _PDM_HEADER.pack(PDM_MAGIC, int(dmap.face), H, W, dmap.depth_min, dmap.depth_max)
        path.write_bytes(header + vals.tobytes())
    elif format == "pgm16":
        header = (f"P5\n# pcc-forge face={dmap.face.label} depth_min={dmap.depth_min!r} "
                  f"depth_max={dmap.depth_max!r}\n{W} {H}\n65535\n").encode("ascii")
        path.write_bytes(header + _pgm_encode(dmap).tobytes())
    else:
        raise ValueError(f"unknown map format {format!r}")


def _load_pdm(data: bytes, origin: str) -> DepthMap:
    if len(data) < _PDM_HEADER.size:
        raise MapFormatError(f"{origin}: truncated header")
    magic, face, H, W, dmin, dmax = _PDM_HEADER.unpack_from(data)
    if magic != PDM_MAGIC or face > 5:
        raise MapFormatError(f"{origin}: bad PDM1 header")
    if len(data) != _PDM_HEADER.size + 4 * H * W:
        raise MapFormatError(f"{origin}: expected {H}x{W} samples")
    vals = np.frombuffer(data, dtype="<f4", offset=_PDM_HEADER.size).reshape(H, W)
    occ = ~np.isnan(vals)
    if occ.any() and (vals[occ].min() < 0 or vals[occ].max() > 1):
        raise MapFormatError(f"{origin}: occupied depth outside [0, 1]")
    return DepthMap(Face(face), np.where(occ, vals, 0), occ, dmin, dmax)


_PGM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def _load_pgm(data: bytes, origin: str) -> DepthMap:
    pos = 2
    fields, comments = [], []
    while len(fields) < 3:
        m = _PGM_TOKEN.search(data, pos)
        if m is None:
            raise MapFormatError(f"{origin}: truncated PGM header")
        if m.group(1):
            comments.append(m.group(1).decode("ascii", "replace"))
        else:
            fields.append(int(m.group(2)))
        pos = m.end()
    pos += 1  # single whitespace byte after maxval
    W, H, maxval = fields
    if maxval != 65535:
        raise MapFormatError(f"{origin}: expected maxval 65535, got {maxval}")
    if len(data) - pos != 2 * H * W:
        raise MapFormatError(f"{origin}: expected {H}x{W} 16-bit samples")
    raw = np.frombuffer(data, dtype=">u2", offset=pos).reshape(H, W).astype(np.float64)
    meta = {}
    for c in comments:
        meta.update(dict(kv.split("=", 1) for kv in c[1:].split() if "=" in kv))
    occ = raw > 0
    depth = np.where(occ, (raw - 1) / 65534.0, 0.0)
    return DepthMap(Face.parse(meta.get("face", "+X")), depth, occ,
                    float(meta.get("depth_min", 0.0)), float(meta.get("depth_max", 0.0)))


def load_map(path) -> DepthMap:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == PDM_MAGIC:
        return _load_pdm(data, str(path))
    if data[:2] == b"P5":
        return _load_pgm(data, str(path))
    raise MapFormatError(f"{path}: unrecognised map format")


def load_inpainted(path, resolution=None) -> DepthMap:
    """Load an externally hole-filled map; every pixel must be occupied."""
    dmap = load_map(path)
    if resolution is not None and tuple(dmap.resolution) != tuple(_check_resolution(resolution)):
        raise MapFormatError(f"{path}: resolution {dmap.resolution} does not match {tuple(resolution)}")
    if not dmap.occupancy.all():
        raise MapFormatError(f"{path}: inpainted map has {dmap.depth.size - dmap.occupied_count} empty pixels")
    return replace(dmap, externally_inpainted=True)
