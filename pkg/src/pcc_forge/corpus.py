"""Point-Text-Image triplet corpus construction and validation.

Each input cloud becomes one record: the normalised, resampled partial cloud,
a templated sentence naming its category, and six depth maps. Records live
under ``out_dir/{category}/{id}/`` and are listed in ``manifest.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .cloud import PointCloud, downsample_random, load_cloud, normalize_to_unit, save_cloud
from .projection import Face, load_map, project, save_map

TEXT_TEMPLATE = "There is {} point cloud projection map"

PCN_8 = ("airplane", "cabinet", "car", "chair", "lamp", "sofa", "table", "watercraft")
MVP_16 = PCN_8 + ("bed", "bench", "bookshelf", "bus", "guitar", "motorbike", "pistol", "skateboard")
BUILTIN_TABLES = {"pcn-8": PCN_8, "mvp-16": MVP_16}

MANIFEST_NAME = "manifest.jsonl"
FAILURES_NAME = "failures.jsonl"


class CorpusError(RuntimeError):
    pass


def generate_text(category: str) -> str:
    if not category:
        raise ValueError("category must be a non-empty name")
    return TEXT_TEMPLATE.format(category)


@dataclass(frozen=True)
class CategoryTable:
    name: str
    categories: tuple

    def __post_init__(self):
        cats = tuple(self.categories)
        for c in cats:
            if not c or c != c.lower() or c != c.strip():
                raise ValueError(f"category names must be lowercase and non-empty: {c!r}")
        if len(set(cats)) != len(cats):
            raise ValueError("category names must be unique")
        object.__setattr__(self, "categories", cats)

    def __contains__(self, name) -> bool:
        return name in self.categories

    @classmethod
    def builtin(cls, name: str) -> "CategoryTable":
        return cls(name, BUILTIN_TABLES[name])

    @classmethod
    def from_file(cls, path) -> "CategoryTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(f"file:{Path(path).name}", tuple(ln.strip() for ln in lines if ln.strip()))

    @classmethod
    def resolve(cls, spec, base_dir=None) -> "CategoryTable":
        """Built-in table name, ``file:<path>`` or a plain path."""
        if isinstance(spec, CategoryTable):
            return spec
        if spec in BUILTIN_TABLES:
            return cls.builtin(spec)
        path = Path(spec[5:] if str(spec).startswith("file:") else spec)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        if not path.is_file():
            raise FileNotFoundError(f"category table not found: {spec}")
        return cls.from_file(path)


@dataclass(frozen=True)
class InputRecord:
    id: str
    category: str
    cloud_path: str
    gt_path: str | None = None


@dataclass(frozen=True)
class TripletRecord:
    id: str
    category: str
    text: str
    cloud_path: str
    gt_cloud_path: str | None
    map_paths: dict
    resolution: tuple
    seed: int

    def to_json(self) -> str:
        doc = asdict(self)
        doc["resolution"] = list(self.resolution)
        return json.dumps(doc, sort_keys=False, ensure_ascii=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "TripletRecord":
        return cls(
            id=str(doc["id"]), category=str(doc["category"]), text=str(doc["text"]),
            cloud_path=str(doc["cloud_path"]), gt_cloud_path=doc.get("gt_cloud_path"),
            map_paths=dict(doc["map_paths"]), resolution=tuple(doc["resolution"]),
            seed=int(doc["seed"]),
        )

    def resolve(self, root) -> "ResolvedRecord":
        return ResolvedRecord(self, Path(root))


@dataclass(frozen=True)
class ResolvedRecord:
    """A record bound to the directory its relative paths are anchored at."""

    record: TripletRecord
    root: Path

    def path(self, rel) -> Path:
        return self.root / rel

    @property
    def id(self) -> str:
        return self.record.id

    def map_path(self, face) -> Path:
        return self.path(self.record.map_paths[Face.parse(face).label])

    def load_cloud(self) -> PointCloud:
        return load_cloud(self.path(self.record.cloud_path))

    def load_gt(self) -> PointCloud:
        if not self.record.gt_cloud_path:
            raise CorpusError(f"record {self.id} has no ground-truth cloud")
        return load_cloud(self.path(self.record.gt_cloud_path))

    def load_maps(self):
        return [load_map(self.map_path(f)) for f in Face]


@dataclass
class CorpusManifest:
    version: str
    category_table: str
    records: list
    config: dict

    def write(self, path) -> None:
        header = {"version": self.version, "category_table": self.category_table, "config": self.config}
        lines = [json.dumps(header)] + [r.to_json() for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise CorpusError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if "version" not in header:
            raise CorpusError(f"{path}: first line must be the manifest header")
        records = []
        for lineno, ln in enumerate(lines[1:], start=2):
            try:
                records.append(TripletRecord.from_dict(json.loads(ln)))
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad record ({exc})") from None
        return cls(header["version"], header.get("category_table", ""), records, header.get("config", {}))


def load_corpus(manifest_path) -> list[ResolvedRecord]:
    manifest_path = Path(manifest_path)
    man = CorpusManifest.read(manifest_path)
    return [r.resolve(manifest_path.parent) for r in man.records]


def record_seed(global_seed: int, record_id: str) -> int:
    """Stable 64-bit per-record seed, independent of input order."""
    digest = hashlib.blake2b(f"{global_seed}:{record_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def read_input_manifest(path) -> list[InputRecord]:
    """JSON Lines of ``{id, category, cloud_path, gt_path?}``; paths relative to the file."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            gt = doc.get("gt_path")
            out.append(InputRecord(str(doc["id"]), str(doc["category"]),
                                   str(path.parent / doc["cloud_path"]),
                                   str(path.parent / gt) if gt else None))
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"{path}:{lineno}: bad input record ({exc})") from None
    return out


def _build_one(inp: InputRecord, out_dir: Path, resolution, n_points: int, seed: int,
               table: CategoryTable) -> TripletRecord:
    if inp.category not in table:
        raise CorpusError(f"category {inp.category!r} is not in table {table.name}")
    if not inp.id or "/" in inp.id or inp.id in (".", ".."):
        raise CorpusError(f"invalid record id {inp.id!r}")
    cloud = load_cloud(inp.cloud_path)
    gt = load_cloud(inp.gt_path) if inp.gt_path else None
    rseed = record_seed(seed, inp.id)

    # the transform is fixed before resampling so the GT shares the frame
    _, transform = normalize_to_unit(cloud)
    normalized = PointCloud(np.clip(transform.apply(cloud), -0.5, 0.5))
    partial = downsample_random(normalized, n_points, rseed)
    maps = project(partial, resolution, transform)

    rel = Path(inp.category) / inp.id
    rec_dir = out_dir / rel
    rec_dir.mkdir(parents=True, exist_ok=True)
    save_cloud(partial, rec_dir / "partial.pcf", "pcf")
    gt_rel = None
    if gt is not None:
        save_cloud(PointCloud(transform.apply(gt)), rec_dir / "gt.pcf", "pcf")
        gt_rel = (rel / "gt.pcf").as_posix()
    map_paths = {}
    for face in Face:
        save_map(maps[face], rec_dir / f"face_{int(face)}.pdm", "raw-f32le-map")
        save_map(maps[face], rec_dir / f"face_{int(face)}.pgm", "pgm16")
        map_paths[face.label] = (rel / f"face_{int(face)}.pdm").as_posix()
    return TripletRecord(
        id=inp.id, category=inp.category, text=generate_text(inp.category),
        cloud_path=(rel / "partial.pcf").as_posix(), gt_cloud_path=gt_rel,
        map_paths=map_paths, resolution=tuple(maps.resolution), seed=rseed,
    )


def build_corpus(inputs, out_dir, resolution=(224, 224), n_points: int = 2048, seed: int = 0,
                 categories="pcn-8", threads: int = 1, extra_config: dict | None = None) -> CorpusManifest:
    """Normalise, resample and project every input cloud into a triplet corpus.

    Per-record failures are collected into ``failures.jsonl``; the build only
    raises when every record failed. Output bytes do not depend on
    ``threads``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(inputs, (str, Path)):
        inputs = read_input_manifest(inputs)
    inputs = list(inputs)
    ids = [i.id for i in inputs]
    if len(set(ids)) != len(ids):
        raise CorpusError("input ids must be unique")
    table = CategoryTable.resolve(categories)

    def job(inp):
        try:
            return _build_one(inp, out_dir, resolution, n_points, seed, table), None
        except (OSError, ValueError, CorpusError) as exc:
            return None, {"id": inp.id, "error": f"{type(exc).__name__}: {exc}"}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, inputs))
    else:
        results = [job(i) for i in inputs]
    records = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]

    config = {"resolution": list(resolution if not isinstance(resolution, int) else (resolution, resolution)),
              "n_points": n_points, "seed": seed}
    config.update(extra_config or {})
    manifest = CorpusManifest(FORMAT_VERSION, table.name, records, config)
    fail_path = out_dir / FAILURES_NAME
    if failures:
        fail_path.write_text("".join(json.dumps(f) + "\n" for f in failures), encoding="utf-8")
    elif fail_path.exists():
        fail_path.unlink()
    if inputs and not records:
        raise CorpusError(f"all {len(inputs)} records failed; see {fail_path}")
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    record_id: str
    kind: str
    message: str


@dataclass
class ValidationReport:
    records: int
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps({"records": self.records, "ok": self.ok,
                           "violations": [asdict(v) for v in self.violations]}, indent=2) + "\n"


def _check_map(path: Path, face: Face, resolution) -> list[tuple[str, str]]:
    try:
        m = load_map(path)
    except (OSError, ValueError) as exc:
        return [("bad-map", f"{path.name}: {exc}")]
    problems = []
    if m.face != face:
        problems.append(("face-mismatch", f"{path.name} holds face {m.face.label}, expected {face.label}"))
    if tuple(m.resolution) != tuple(resolution):
        problems.append(("resolution-mismatch", f"{path.name} is {m.resolution}, record says {tuple(resolution)}"))
    vals = m.depth[m.occupancy]
    if vals.size:
        distinct = np.unique(vals)
        if distinct.size >= 2 and (distinct[0] != 0.0 or distinct[-1] != 1.0):
            problems.append(("normalization", f"{path.name}: occupied depth spans [{distinct[0]}, {distinct[-1]}]"))
        if distinct.size == 1 and distinct[0] != 0.0:
            problems.append(("normalization", f"{path.name}: single-depth map not at 0"))
    return problems


def validate_corpus(manifest_path, categories=None) -> ValidationReport:
    manifest_path = Path(manifest_path)
    man = CorpusManifest.read(manifest_path)
    root = manifest_path.parent
    violations = []

    def add(rid, kind, msg):
        violations.append(Violation(rid, kind, msg))

    if man.version != FORMAT_VERSION:
        add("", "version", f"manifest version {man.version!r}, expected {FORMAT_VERSION!r}")
    table = None
    try:
        table = CategoryTable.resolve(categories or man.category_table, base_dir=root)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        add("", "category-table", str(exc))

    seen = set()
    for rec in man.records:
        rid = rec.id
        if rid in seen:
            add(rid, "duplicate-id", "record id appears more than once")
        seen.add(rid)
        if table is not None and rec.category not in table:
            add(rid, "unknown-category", f"{rec.category!r} not in {table.name}")
        if rec.category and rec.text != generate_text(rec.category):
            add(rid, "text-mismatch", f"text {rec.text!r} != {generate_text(rec.category)!r}")
        for label, rel in (("cloud", rec.cloud_path), ("gt", rec.gt_cloud_path)):
            if rel is None:
                continue
            p = root / rel
            if not p.is_file():
                add(rid, "missing-file", f"{label} file {rel} does not exist")
                continue
            try:
                load_cloud(p)
            except (OSError, ValueError) as exc:
                add(rid, "bad-cloud", f"{rel}: {exc}")
        if sorted(rec.map_paths) != sorted(f.label for f in Face):
            add(rid, "map-count", f"expected six maps keyed by face, got {sorted(rec.map_paths)}")
            continue
        for face in Face:
            rel = rec.map_paths[face.label]
            p = root / rel
            if not p.is_file():
                add(rid, "missing-file", f"map {rel} does not exist")
                continue
            for kind, msg in _check_map(p, face, rec.resolution):
                add(rid, kind, msg)
    return ValidationReport(len(man.records), violations)
