"""``pcc-forge`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Flags override values from ``--config`` (an INI file with ``key = value``
lines under sections), which override the built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or config; reported with exit code 2."""


@dataclass(frozen=True)
class Config:
    resolution: tuple = (224, 224)
    n_points: int = 2048
    dim: int = 512
    seed: int = 0
    encoder_seed: int | None = None
    params_seed: int | None = None
    threads: int = 1
    categories: str = "pcn-8"
    encoder_dir: str | None = None
    f1_threshold: float = 0.01
    cd_half_sum: bool = True
    quiet: bool = False

    def validate(self) -> "Config":
        H, W = self.resolution
        if H < 2 or W < 2 or H % 2 or W % 2:
            raise UsageError(f"resolution must be even and >= 2 in both axes, got {H}x{W}")
        if self.n_points < 1:
            raise UsageError("n_points must be positive")
        if self.dim < 1:
            raise UsageError("dim must be positive")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        if not 0 < self.f1_threshold < float("inf"):
            raise UsageError("f1_threshold must be positive and finite")
        if not self.cd_half_sum:
            raise UsageError("only the half-sum Chamfer convention is implemented")
        for name in ("seed", "encoder_seed", "params_seed"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise UsageError(f"{name} must be non-negative")
        return self

    @property
    def effective_encoder_seed(self) -> int:
        return self.seed if self.encoder_seed is None else self.encoder_seed

    @property
    def effective_params_seed(self) -> int:
        return self.seed if self.params_seed is None else self.params_seed

    def metadata(self, include_threads: bool = False) -> dict:
        """Config echo for output files. Thread count is left out of outputs
        that are promised to be identical for any thread count."""
        doc = asdict(self)
        doc["resolution"] = list(self.resolution)
        doc["encoder_seed"] = self.effective_encoder_seed
        doc["params_seed"] = self.effective_params_seed
        del doc["quiet"]
        if not include_threads:
            del doc["threads"]
        doc["tool_version"] = __version__
        doc["format_version"] = FORMAT_VERSION
        return doc


def parse_resolution(text) -> tuple:
    s = str(text).lower().strip()
    try:
        if "x" in s:
            h, w = s.split("x", 1)
            return int(h), int(w)
        return int(s), int(s)
    except ValueError:
        raise UsageError(f"bad resolution {text!r}; use N or HxW") from None


def parse_size(text: str) -> int:
    s = text.strip().lower()
    try:
        if s.endswith("k"):
            return int(float(s[:-1]) * 1024)
        return int(s)
    except ValueError:
        raise UsageError(f"bad size {text!r}") from None


_CONFIG_KEYS = {
    # (section, key): (field, parser)
    ("general", "seed"): ("seed", int),
    ("general", "threads"): ("threads", int),
    ("general", "quiet"): ("quiet", "bool"),
    ("corpus", "resolution"): ("resolution", parse_resolution),
    ("corpus", "n_points"): ("n_points", int),
    ("corpus", "categories"): ("categories", str),
    ("fusion", "dim"): ("dim", int),
    ("fusion", "encoder_seed"): ("encoder_seed", int),
    ("fusion", "params_seed"): ("params_seed", int),
    ("fusion", "encoder_dir"): ("encoder_dir", str),
    ("metrics", "f1_threshold"): ("f1_threshold", float),
    ("metrics", "cd_half_sum"): ("cd_half_sum", "bool"),
}


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key in parser[section]:
            spec = _CONFIG_KEYS.get((section, key))
            if spec is None:
                raise UsageError(f"{path}: unknown config key [{section}] {key}")
            field, conv = spec
            try:
                if conv == "bool":
                    values[field] = parser.getboolean(section, key)
                else:
                    values[field] = conv(parser.get(section, key).strip().strip('"'))
            except ValueError as exc:
                raise UsageError(f"{path}: [{section}] {key}: {exc}") from None
    return values


def default_threads() -> int:
    env = os.environ.get("PCC_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PCC_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def build_config(args) -> Config:
    values = {"threads": default_threads()}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    flag_map = {"seed": "seed", "threads": "threads", "dim": "dim", "quiet": "quiet",
                "categories": "categories", "n_points": "n_points", "encoder_dir": "encoder_dir",
                "f1_threshold": "f1_threshold"}
    for attr, field in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None and v is not False:
            values[field] = v
    if getattr(args, "res", None) is not None:
        values["resolution"] = parse_resolution(args.res)
    return Config(**values).validate()


def emit(cfg: Config, doc) -> None:
    if not cfg.quiet:
        print(doc if isinstance(doc, str) else json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# commands


def cmd_project(args, cfg: Config) -> int:
    from .cloud import PointCloud, load_cloud, normalize_to_unit
    from .projection import Face, project, save_map

    cloud = load_cloud(args.input)
    _, transform = normalize_to_unit(cloud)
    normalized = PointCloud(np.clip(transform.apply(cloud), -0.5, 0.5))
    maps = project(normalized, cfg.resolution, transform)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = []
    total = cfg.resolution[0] * cfg.resolution[1]
    for face in Face:
        m = maps[face]
        save_map(m, out / f"face_{face.slug}.pdm", "raw-f32le-map")
        save_map(m, out / f"face_{face.slug}.pgm", "pgm16")
        stats.append({"face": face.label, "occupied": m.occupied_count,
                      "occupancy": m.occupied_count / total})
    emit(cfg, {"input": str(args.input), "points": len(cloud), "out": str(out),
               "transform": {"center": transform.center.tolist(), "scale": float(transform.scale)},
               "faces": stats, "config": cfg.metadata()})
    return EXIT_OK


def cmd_build_corpus(args, cfg: Config) -> int:
    from .corpus import CategoryTable, build_corpus, validate_corpus, MANIFEST_NAME

    try:
        table = CategoryTable.resolve(cfg.categories)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    manifest = build_corpus(args.inputs, args.out, cfg.resolution, cfg.n_points, cfg.seed,
                            table, cfg.threads, extra_config={"cli": cfg.metadata()})
    path = Path(args.out) / MANIFEST_NAME
    report = validate_corpus(path, table)
    emit(cfg, {"manifest": str(path), "records": len(manifest.records),
               "violations": len(report.violations), "config": cfg.metadata()})
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_validate(args, cfg: Config) -> int:
    from .corpus import validate_corpus

    # without --categories the table named in the manifest header is used
    report = validate_corpus(args.manifest, args.categories)
    emit(cfg, report.to_json().rstrip("\n"))
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_eval(args, cfg: Config) -> int:
    from .metrics import evaluate_pairs

    report = evaluate_pairs(args.pairs, threads=cfg.threads, threshold=cfg.f1_threshold,
                            metadata={"config": cfg.metadata()})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    emit(cfg, report.to_table().rstrip("\n"))
    if report.failures:
        print(f"{len(report.failures)} pair(s) failed; see report failures", file=sys.stderr)
    return EXIT_OK if report.pairs and not report.failures else EXIT_FAIL


def _encoder(cfg: Config):
    from .fusion import EncoderHandle

    if cfg.encoder_dir:
        return EncoderHandle.from_directory(cfg.encoder_dir, cfg.dim)
    return EncoderHandle.stub(cfg.effective_encoder_seed, cfg.dim)


def _params(args, cfg: Config):
    from .fusion import FusionParams, init_params

    if args.params:
        params = FusionParams.load(args.params)
        if params.dim != cfg.dim:
            raise UsageError(f"parameter bundle has dim {params.dim}, config says {cfg.dim}")
        return params
    return init_params(cfg.effective_params_seed, dim=cfg.dim, point_dim=cfg.dim, out_dim=cfg.dim)


def _weights(spec):
    from .fusion import BlockWeights

    if spec in (None, "all-ones"):
        return BlockWeights.ones()
    return BlockWeights.load(spec)


def cmd_fuse_demo(args, cfg: Config) -> int:
    from .cloud import PointCloud, save_cloud
    from .corpus import load_corpus
    from .fusion import forward
    from .metrics import chamfer_l1

    records = load_corpus(args.manifest)
    params = _params(args, cfg)
    encoder = _encoder(cfg)
    weights = _weights(args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for rec in records:
        pred, state = forward(rec, params, encoder, weights=weights,
                              position_aware=not args.no_position_aware, n_out=args.n_out)
        save_cloud(pred, out / f"{rec.id}.pcf", "pcf")
        if args.dump_state:
            np.savez(out / f"{rec.id}.state.npz", **state.as_dict())
        row = {"id": rec.id, "points": len(pred)}
        if rec.record.gt_cloud_path:
            row["cd_l1_to_gt"] = chamfer_l1(PointCloud(pred.points.astype(np.float32)), rec.load_gt())
        summary.append(row)
    doc = {"records": summary, "position_aware": not args.no_position_aware,
           "weights": args.weights or "all-ones", "n_out": args.n_out, "config": cfg.metadata()}
    (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    emit(cfg, doc)
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .fusion.gradcheck import OPS, grad_check

    ops = args.op or list(OPS)
    unknown = [o for o in ops if o not in OPS]
    if unknown:
        raise UsageError(f"unknown op(s) {', '.join(unknown)}; choose from {', '.join(OPS)}")
    failed = 0
    for op in ops:
        r = grad_check(op, h=args.h, seed=cfg.seed, dim=args.check_dim, corrupt=args.corrupt)
        failed += not r.passed
        if not cfg.quiet:
            status = "PASS" if r.passed else "FAIL"
            print(f"{status} {op:<18} rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
                  f"at {r.group}{list(r.index)} ({r.checked} entries)")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train_weights(args, cfg: Config) -> int:
    from .corpus import load_corpus
    from .fusion import train_block_weights

    records = load_corpus(args.manifest)
    result = train_block_weights(records, _params(args, cfg), _encoder(cfg), iters=args.iters,
                                 step=args.step, seed=cfg.seed, n_out=args.n_out,
                                 gradient=args.gradient, inpaint_iters=args.inpaint_iters)
    result.weights.save(args.out)
    if args.trace:
        Path(args.trace).write_text(result.trace_csv(), encoding="utf-8")
    emit(cfg, {"weights": str(args.out), "iters": args.iters, "step": args.step,
               "gradient": args.gradient, "w": result.weights.w.tolist(), "config": cfg.metadata()})
    return EXIT_OK


def _time_runs(fn, runs: int) -> list[float]:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def cmd_bench(args, cfg: Config) -> int:
    from .metrics import chamfer_l1
    from .metrics.bruteforce import brute_chamfer_l1

    sizes = [parse_size(s) for s in args.sizes.split(",") if s.strip()]
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs positive sizes")
    rows = []
    for n in sizes:
        rng = np.random.default_rng([cfg.seed, n])
        P, Q = rng.random((n, 3)) - 0.5, rng.random((n, 3)) - 0.5
        chamfer_l1(P[:8], Q[:8])  # JIT warm-up outside the timed region
        tree = _time_runs(lambda: chamfer_l1(P, Q), args.runs)
        row = {"size": n, "runs": args.runs, "tree_mean_ms": 1e3 * statistics.fmean(tree),
               "tree_std_ms": 1e3 * (statistics.stdev(tree) if len(tree) > 1 else 0.0)}
        if not args.no_brute:
            brute = _time_runs(lambda: brute_chamfer_l1(P, Q), args.brute_runs)
            row["brute_mean_ms"] = 1e3 * statistics.fmean(brute)
            row["speedup"] = row["brute_mean_ms"] / row["tree_mean_ms"]
        rows.append(row)
    if not cfg.quiet:
        print(f"{'size':>8} {'tree ms':>10} {'std ms':>8} {'brute ms':>10} {'speedup':>8}")
        for r in rows:
            brute = f"{r['brute_mean_ms']:10.1f} {r['speedup']:8.1f}" if "speedup" in r else f"{'-':>10} {'-':>8}"
            print(f"{r['size']:>8} {r['tree_mean_ms']:10.2f} {r['tree_std_ms']:8.2f} {brute}")
    if args.json:
        Path(args.json).write_text(json.dumps({"rows": rows, "config": cfg.metadata(True)}, indent=2) + "\n",
                                   encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS lets the same flags appear before or after the subcommand
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="INI config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker threads (default: $PCC_THREADS, else CPU count)")
    g.add_argument("--res", default=argparse.SUPPRESS, help="map resolution, N or HxW")
    g.add_argument("--dim", type=int, default=argparse.SUPPRESS, help="embedding dimension")
    g.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcc-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p)
        p.set_defaults(func=fn)
        return p

    p = add("project", cmd_project, "project one cloud onto the six cube faces")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("build-corpus", cmd_build_corpus, "build a text/map/cloud corpus")
    p.add_argument("inputs", help="input manifest (JSONL: id, category, cloud_path, gt_path)")
    p.add_argument("--out", required=True)
    p.add_argument("--categories", default=None, help="pcn-8, mvp-16 or a file with one name per line")
    p.add_argument("--n-points", dest="n_points", type=int, default=None)

    p = add("validate", cmd_validate, "check a corpus manifest")
    p.add_argument("manifest")
    p.add_argument("--categories", default=None)

    p = add("eval", cmd_eval, "compute completion metrics over a pair manifest")
    p.add_argument("pairs")
    p.add_argument("--out", default=None, help="directory for report.json and report.txt")
    p.add_argument("--threshold", dest="f1_threshold", type=float, default=None)

    p = add("fuse-demo", cmd_fuse_demo, "run the fusion forward pass over a corpus")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None, help="parameter bundle (default: seeded init)")
    p.add_argument("--weights", default=None, help="'all-ones' or a BW24 file")
    p.add_argument("--no-position-aware", action="store_true")
    p.add_argument("--n-out", type=int, default=2048)
    p.add_argument("--encoder-dir", dest="encoder_dir", default=None)
    p.add_argument("--dump-state", action="store_true", help="write FusionState .npz per record")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every fusion gradient")
    p.add_argument("--op", action="append", default=None, help="op to check (repeatable)")
    p.add_argument("--corrupt", action="store_true", help="negative control: perturb one analytic entry")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--check-dim", type=int, default=6, help="feature size of the random test inputs")

    p = add("train-weights", cmd_train_weights, "learn the 24 block weights")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="BW24 output file")
    p.add_argument("--trace", default=None, help="loss trace CSV")
    p.add_argument("--params", default=None)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--n-out", type=int, default=256)
    p.add_argument("--gradient", choices=("analytic", "fd"), default="analytic")
    p.add_argument("--inpaint-iters", type=int, default=1000)
    p.add_argument("--encoder-dir", dest="encoder_dir", default=None)

    p = add("bench", cmd_bench, "time tree Chamfer against brute force")
    p.add_argument("--sizes", default="1k,2k,16k")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--brute-runs", type=int, default=1)
    p.add_argument("--no-brute", action="store_true")
    p.add_argument("--json", default=None, help="also write rows as JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    try:
        cfg = build_config(args)
        for name in ("iters", "n_out", "runs", "brute_runs", "check_dim", "inpaint_iters"):
            v = getattr(args, name, None)
            if v is not None and v < (0 if name in ("iters", "inpaint_iters") else 1):
                raise UsageError(f"--{name.replace('_', '-')} out of range: {v}")
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"pcc-forge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAIL
    except Exception as exc:  # every runtime failure maps to exit 1
        print(f"pcc-forge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
