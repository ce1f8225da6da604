import json

import numpy as np
import pytest

from pcc_forge.cli import Config, UsageError, main, parse_resolution, parse_size, read_config_file
from pcc_forge.cloud import load_cloud
from pcc_forge.fusion import BlockWeights
from pcc_forge.synthetic import sphere
from test_corpus import tree_bytes
from test_metrics import write_pairs


@pytest.fixture
def cloud_file(tmp_path):
    from pcc_forge.cloud import save_cloud
    save_cloud(sphere(400, seed=2, radius=3.0), tmp_path / "s.xyz")
    return tmp_path / "s.xyz"


class TestHelpers:
    def test_resolution(self):
        assert parse_resolution("224") == (224, 224)
        assert parse_resolution("16x32") == (16, 32)
        with pytest.raises(UsageError):
            parse_resolution("big")

    def test_size(self):
        assert parse_size("16k") == 16384
        assert parse_size("500") == 500

    def test_validate(self):
        with pytest.raises(UsageError):
            Config(resolution=(223, 223)).validate()
        with pytest.raises(UsageError):
            Config(cd_half_sum=False).validate()

    def test_metadata_excludes_threads(self):
        meta = Config(threads=8).metadata()
        assert "threads" not in meta and "tool_version" in meta
        assert Config(threads=8).metadata(True)["threads"] == 8


class TestProject:
    def test_twelve_files(self, tmp_path, cloud_file):
        assert main(["project", "--in", str(cloud_file), "--out", str(tmp_path / "o"), "--res", "32", "--quiet"]) == 0
        names = sorted(p.name for p in (tmp_path / "o").iterdir())
        assert len(names) == 12
        assert "face_px.pdm" in names and "face_nz.pgm" in names

    def test_odd_resolution(self, tmp_path, cloud_file, capsys):
        assert main(["project", "--in", str(cloud_file), "--out", str(tmp_path / "o"), "--res", "223"]) == 2
        assert "even" in capsys.readouterr().err

    def test_rerun_identical(self, tmp_path, cloud_file):
        for d in ("a", "b"):
            main(["--quiet", "project", "--in", str(cloud_file), "--out", str(tmp_path / d), "--res", "16"])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_missing_input(self, tmp_path):
        assert main(["project", "--in", str(tmp_path / "nope.xyz"), "--out", str(tmp_path / "o")]) == 1

    def test_unknown_flag(self, tmp_path, cloud_file):
        with pytest.raises(SystemExit) as exc:
            main(["project", "--in", str(cloud_file), "--out", str(tmp_path), "--bogus"])
        assert exc.value.code == 2


class TestCorpusCommands:
    def test_build_twice_identical(self, tmp_path, two_cloud_inputs):
        for d, threads in (("a", "1"), ("b", "8")):
            rc = main(["build-corpus", str(two_cloud_inputs), "--out", str(tmp_path / d), "--seed", "7",
                       "--res", "8", "--n-points", "64", "--threads", threads, "--quiet"])
            assert rc == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_header_echoes_config(self, tmp_path, two_cloud_inputs):
        main(["build-corpus", str(two_cloud_inputs), "--out", str(tmp_path / "a"), "--seed", "7",
              "--res", "8", "--n-points", "64", "--quiet"])
        header = json.loads((tmp_path / "a" / "manifest.jsonl").read_text().splitlines()[0])
        assert header["config"]["cli"]["seed"] == 7

    def test_missing_table(self, tmp_path, two_cloud_inputs):
        rc = main(["build-corpus", str(two_cloud_inputs), "--out", str(tmp_path / "a"),
                   "--categories", str(tmp_path / "none.txt")])
        assert rc == 2

    def test_validate(self, tmp_path, two_cloud_inputs, capsys):
        main(["build-corpus", str(two_cloud_inputs), "--out", str(tmp_path / "a"), "--res", "8",
              "--n-points", "64", "--quiet"])
        capsys.readouterr()
        assert main(["validate", str(tmp_path / "a" / "manifest.jsonl")]) == 0
        assert json.loads(capsys.readouterr().out)["violations"] == []
        next((tmp_path / "a").rglob("face_*.pdm")).unlink()
        assert main(["validate", str(tmp_path / "a" / "manifest.jsonl"), "--quiet"]) == 1


class TestEval:
    def test_identical_pairs(self, tmp_path, rng, capsys):
        P = rng.random((40, 3))
        path = write_pairs(tmp_path, [("a", "car", P, P)])
        assert main(["eval", str(path), "--out", str(tmp_path / "r")]) == 0
        rep = json.loads((tmp_path / "r" / "report.json").read_text())
        assert rep["overall"]["cd_l1"] == 0.0 and rep["overall"]["f1"] == 1.0
        assert "1.000" in capsys.readouterr().out

    def test_thread_invariant_bytes(self, tmp_path, rng):
        pairs = [(f"p{k}", "car", rng.random((30, 3)), rng.random((30, 3))) for k in range(6)]
        path = write_pairs(tmp_path, pairs)
        main(["eval", str(path), "--out", str(tmp_path / "a"), "--threads", "1", "--quiet"])
        main(["eval", str(path), "--out", str(tmp_path / "b"), "--threads", "8", "--quiet"])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_no_pairs_fails(self, tmp_path):
        (tmp_path / "p.jsonl").write_text(json.dumps({"id": "x", "category": "car", "pred_path": "a.xyz",
                                                      "gt_path": "b.xyz"}) + "\n")
        assert main(["eval", str(tmp_path / "p.jsonl"), "--quiet"]) == 1


class TestFusionCommands:
    ARGS = ["--dim", "16", "--seed", "3", "--quiet"]

    def test_fuse_demo_identity(self, tmp_path, small_corpus):
        base = ["fuse-demo", str(small_corpus), "--n-out", "32"] + self.ARGS
        assert main(base + ["--out", str(tmp_path / "a"), "--weights", "all-ones", "--dump-state"]) == 0
        assert main(base + ["--out", str(tmp_path / "b"), "--no-position-aware"]) == 0
        for p in (tmp_path / "a").glob("*.pcf"):
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
        assert len(load_cloud(p)) == 32
        state = np.load(next((tmp_path / "a").glob("*.state.npz")))
        assert state["F_c"].shape == (7, 16)

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == out.count("\n") and "FAIL" not in out
        assert main(["gradcheck", "--op", "linear", "--corrupt"]) == 1
        assert main(["gradcheck", "--op", "linear"]) == 0
        assert main(["gradcheck", "--op", "nope"]) == 2

    def test_train_zero_iters(self, tmp_path, small_corpus):
        assert main(["train-weights", str(small_corpus), "--out", str(tmp_path / "w.bw24"),
                     "--iters", "0"] + self.ARGS) == 0
        assert np.array_equal(BlockWeights.load(tmp_path / "w.bw24").w, np.ones((6, 4)))

    def test_train_deterministic(self, tmp_path, small_corpus):
        for name in ("a", "b"):
            rc = main(["train-weights", str(small_corpus), "--out", str(tmp_path / f"{name}.bw24"),
                       "--trace", str(tmp_path / f"{name}.csv"), "--iters", "3", "--n-out", "32",
                       "--step", "50"] + self.ARGS)
            assert rc == 0
        assert (tmp_path / "a.bw24").read_bytes() == (tmp_path / "b.bw24").read_bytes()
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
        assert len((tmp_path / "a.csv").read_text().splitlines()) == 4

    def test_bench_rows(self, tmp_path, capsys):
        assert main(["bench", "--sizes", "64,128", "--runs", "2", "--json", str(tmp_path / "b.json")]) == 0
        rows = json.loads((tmp_path / "b.json").read_text())["rows"]
        assert [r["size"] for r in rows] == [64, 128]
        assert all("speedup" in r for r in rows)


class TestConfig:
    def test_file_and_flag_precedence(self, tmp_path, cloud_file):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[corpus]\nresolution = 8\n[general]\nseed = 4\n")
        assert read_config_file(cfg) == {"resolution": (8, 8), "seed": 4}
        main(["project", "--in", str(cloud_file), "--out", str(tmp_path / "a"), "--config", str(cfg), "--quiet"])
        assert (tmp_path / "a" / "face_px.pdm").stat().st_size == 24 + 8 * 8 * 4
        main(["project", "--in", str(cloud_file), "--out", str(tmp_path / "b"), "--config", str(cfg),
              "--res", "4", "--quiet"])
        assert (tmp_path / "b" / "face_px.pdm").stat().st_size == 24 + 4 * 4 * 4

    def test_unknown_key(self, tmp_path, cloud_file):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[corpus]\ncolour = red\n")
        assert main(["project", "--in", str(cloud_file), "--out", str(tmp_path), "--config", str(cfg)]) == 2

    def test_env_threads(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("PCC_THREADS", "3")
        assert main(["bench", "--sizes", "16", "--runs", "1", "--no-brute", "--json", str(tmp_path / "a.json"),
                     "--quiet"]) == 0
        assert json.loads((tmp_path / "a.json").read_text())["config"]["threads"] == 3
        monkeypatch.setenv("PCC_THREADS", "many")
        assert main(["bench", "--sizes", "16", "--runs", "1", "--no-brute"]) == 2
