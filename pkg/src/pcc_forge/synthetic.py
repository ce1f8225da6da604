"""Seeded synthetic shapes for fixtures and the missing-octant study."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cloud import PointCloud, save_cloud
from .projection import FACE_TABLE, Face


def sphere(n: int, seed: int = 0, radius: float = 0.5) -> PointCloud:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    return PointCloud(radius * v / np.linalg.norm(v, axis=1, keepdims=True))


def _box_surface(rng, n: int, lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = faces % 3
    side = faces // 3
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def cube(n: int, seed: int = 0, half: float = 0.5) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(_box_surface(rng, n, [-half] * 3, [half] * 3))


OCTANT = (1, 1, 1)


def notched_cube_pair(n_partial: int, n_gt: int, seed: int, octant=OCTANT, jitter: float = 0.1):
    """Surface of a box with one octant removed, plus the complete box surface.

    The removed octant is ``sign(x), sign(y), sign(z) == octant``; the partial
    surface includes the three inner faces of the notch. Box half-extents are
    jittered per axis by up to ``jitter``.
    """
    rng = np.random.default_rng(seed)
    half = 0.5 * (1.0 - jitter * rng.random(3))
    sgn = np.asarray(octant, dtype=float)
    gt = _box_surface(rng, n_gt, -half, half)

    # Oversample the box 4x and drop the octant. The notch faces have the same
    # total area as the removed outer surface (1/8 of the box), so n/2 notch
    # samples keep the density uniform.
    box = _box_surface(rng, 4 * n_partial, -half, half)
    keep = ~np.all(np.sign(box) == sgn, axis=1)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    n_notch = n_partial // 2
    axis = rng.choice(3, size=n_notch, p=areas / areas.sum())
    notch = rng.random((n_notch, 3)) * half * sgn
    notch[np.arange(n_notch), axis] = 0.0
    pool = np.concatenate([box[keep], notch])
    pick = rng.choice(len(pool), size=n_partial, replace=len(pool) < n_partial)
    return PointCloud(pool[pick]), PointCloud(gt)


def octant_cells(octant=OCTANT) -> list[tuple[int, int]]:
    """``(face, block)`` cells whose image region covers the octant's projection.

    Every face sees an octant in exactly one quadrant, so this is six cells.
    """
    centre = 0.25 * np.asarray(octant, dtype=float)
    cells = []
    for face in Face:
        _, _, ua, us, va, vs = FACE_TABLE[face]
        u, v = us * centre[ua], vs * centre[va]
        cells.append((int(face), int(v > 0) * 2 + int(u > 0)))
    return cells


def write_octant_inputs(out_dir, count: int, seed: int, prefix: str = "cube",
                        n_partial: int = 2048, n_gt: int = 2048, category: str = "cabinet") -> Path:
    """Write ``count`` notched-cube pairs and an input manifest for ``build_corpus``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k in range(count):
        rid = f"{prefix}{k:03d}"
        partial, gt = notched_cube_pair(n_partial, n_gt, seed=seed * 100003 + k)
        save_cloud(partial, out_dir / f"{rid}.pcf", "pcf")
        save_cloud(gt, out_dir / f"{rid}_gt.pcf", "pcf")
        lines.append(json.dumps({"id": rid, "category": category,
                                 "cloud_path": f"{rid}.pcf", "gt_path": f"{rid}_gt.pcf"}))
    manifest = out_dir / "inputs.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
