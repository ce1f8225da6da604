import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from pcc_forge.cloud import PointCloud, save_cloud
from pcc_forge.metrics import (
    NnIndex,
    PairSpec,
    build_index,
    chamfer_l1,
    chamfer_l2,
    evaluate_pairs,
    f1_score,
    fidelity,
    mmd,
    nearest,
)

small = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
               elements=st.floats(-2, 2, allow_nan=False))


class TestIndex:
    def test_single_point(self):
        idx = build_index(PointCloud([[1.0, 2.0, 3.0]]))
        assert len(idx) == 1
        assert nearest(idx, [0, 0, 0]) == (0, math.sqrt(14))

    def test_empty(self):
        with pytest.raises(ValueError):
            NnIndex(np.zeros((0, 3)))

    def test_matches_brute_force(self, rng):
        pts = rng.random((2048, 3))
        q = rng.random((1000, 3)) * 1.4 - 0.2
        i, d2 = NnIndex(pts).query(q)
        bi, bd2 = oracles.nn_brute(q, pts)
        npt.assert_array_equal(i, bi)
        npt.assert_array_equal(d2, bd2)

    def test_far_query(self, rng):
        pts = rng.random((300, 3))
        q = np.array([[50.0, -20.0, 7.0]])
        assert NnIndex(pts).query(q)[0][0] == oracles.nn_brute(q, pts)[0][0]

    def test_exact_hit(self, rng):
        pts = rng.random((100, 3))
        assert nearest(build_index(pts), pts[37]) == (37, 0.0)

    def test_duplicates_lowest_index(self):
        pts = np.array([[1, 1, 1], [0, 0, 0], [0, 0, 0], [0, 0, 0], [5, 5, 5]] * 4, float)
        idx, d = nearest(build_index(pts), [0, 0, 0])
        assert (idx, d) == (1, 0.0)

    def test_equidistant_lower_index(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        assert nearest(build_index(pts), [0, 0, 0])[0] == 0
        assert nearest(build_index(pts[::-1].copy()), [0, 0, 0])[0] == 0

    def test_grid_ties(self):
        g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        q = g[:-1] + 0.5
        i, d2 = NnIndex(g).query(q)
        bi, bd2 = oracles.nn_brute(q, g)
        npt.assert_array_equal(i, bi)
        npt.assert_array_equal(d2, bd2)

    @given(small, small)
    def test_property_brute_force(self, a, b):
        i, d2 = NnIndex(b).query(a)
        bi, bd2 = oracles.nn_brute(a, b)
        npt.assert_array_equal(i, bi)
        npt.assert_array_equal(d2, bd2)


class TestChamfer:
    def test_identity(self, rng):
        P = rng.random((100, 3))
        assert chamfer_l1(P, P) == 0.0
        assert chamfer_l2(P, P) == 0.0

    def test_hand_values(self):
        assert chamfer_l1([[0, 0, 0]], [[1, 0, 0]]) == 1.0
        assert chamfer_l2([[0, 0, 0]], [[1, 0, 0]]) == 1.0
        assert chamfer_l2([[0, 0, 0]], [[2, 0, 0]]) == 4.0

    def test_small_random(self, rng):
        P, Q = rng.random((3, 3)), rng.random((4, 3))
        assert abs(chamfer_l1(P, Q) - oracles.chamfer_l1(P, Q)) <= 1e-12
        assert abs(chamfer_l2(P, Q) - oracles.chamfer_l2(P, Q)) <= 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            chamfer_l1(np.zeros((0, 3)), [[0, 0, 0]])

    @given(small, small)
    def test_symmetry_bit_exact(self, P, Q):
        assert chamfer_l1(P, Q) == chamfer_l1(Q, P)
        assert chamfer_l2(P, Q) == chamfer_l2(Q, P)

    @given(small, small, st.sampled_from([0.5, 2.0, 10.0]))
    def test_scaling(self, P, Q, s):
        base1, base2 = chamfer_l1(P, Q), chamfer_l2(P, Q)
        assert abs(chamfer_l1(s * P, s * Q) - s * base1) <= 1e-9 * max(s * base1, 1e-300)
        assert abs(chamfer_l2(s * P, s * Q) - s * s * base2) <= 1e-9 * max(s * s * base2, 1e-300)

    def test_float32_input_accumulates_in_double(self, rng):
        P = rng.random((50, 3)).astype(np.float32)
        Q = rng.random((60, 3)).astype(np.float32)
        assert abs(chamfer_l1(P, Q) - oracles.chamfer_l1(P.astype(float), Q.astype(float))) <= 1e-12


class TestF1:
    def test_identity(self, rng):
        P = rng.random((50, 3))
        for t in (1e-9, 0.01, 1.0):
            assert f1_score(P, P, t) == 1.0

    def test_far_apart(self):
        assert f1_score([[0, 0, 0]], [[1, 0, 0]], 0.01) == 0.0

    def test_bad_threshold(self):
        for t in (0.0, -1.0, float("nan"), float("inf")):
            with pytest.raises(ValueError):
                f1_score([[0, 0, 0]], [[1, 0, 0]], t)

    def test_oracle_and_monotone(self, rng):
        P, Q = rng.random((200, 3)), rng.random((150, 3))
        prev = -1.0
        for t in np.linspace(0.005, 0.3, 25):
            v = f1_score(P, Q, t)
            assert v == pytest.approx(oracles.f1(P, Q, t), abs=1e-12)
            assert v >= prev
            prev = v

    def test_strict_threshold(self):
        # a distance exactly at the threshold does not count
        assert f1_score([[0, 0, 0]], [[0.5, 0, 0]], 0.5) == 0.0


class TestFidelity:
    def test_subset(self, rng):
        O = rng.random((40, 3))
        assert fidelity(O[:10], O) == 0.0

    def test_hand(self):
        assert fidelity([[0, 0, 0]], [[3, 4, 0]]) == 5.0

    def test_oracle(self, rng):
        P, O = rng.random((80, 3)), rng.random((90, 3))
        assert abs(fidelity(P, O) - oracles.fidelity(P, O)) <= 1e-12


class TestMmd:
    def test_member(self, rng):
        refs = [rng.random((30, 3)) for _ in range(4)]
        assert mmd(refs[2], refs) == (0.0, 2)

    def test_single(self, rng):
        O, R = rng.random((20, 3)), rng.random((25, 3))
        assert mmd(O, [R]) == (chamfer_l2(O, R), 0)

    def test_five_refs(self, rng):
        O = rng.random((30, 3))
        refs = [rng.random((30, 3)) + 0.1 * k for k in range(5)]
        vals = [oracles.chamfer_l2(O, R) for R in refs]
        v, i = mmd(O, refs)
        assert i == int(np.argmin(vals))
        assert abs(v - min(vals)) <= 1e-12

    def test_tie_lowest(self, rng):
        O, R = rng.random((10, 3)), rng.random((10, 3))
        assert mmd(O, [R, R.copy()])[1] == 0

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            mmd(rng.random((3, 3)), [])


def write_pairs(tmp, pairs):
    """pairs: list of (id, category, pred array, gt array)."""
    lines = []
    for pid, cat, pred, gt in pairs:
        save_cloud(PointCloud(pred), tmp / f"{pid}_pred.xyz")
        save_cloud(PointCloud(gt), tmp / f"{pid}_gt.xyz")
        lines.append(json.dumps({"id": pid, "category": cat, "pred_path": f"{pid}_pred.xyz",
                                 "gt_path": f"{pid}_gt.xyz"}))
    (tmp / "pairs.jsonl").write_text("\n".join(lines) + "\n")
    return tmp / "pairs.jsonl"


class TestReport:
    def test_identical_pairs(self, tmp_path, rng):
        P = rng.random((30, 3))
        path = write_pairs(tmp_path, [("a", "car", P, P), ("b", "car", P, P)])
        rep = evaluate_pairs(path)
        assert rep.overall["cd_l1"] == 0.0 and rep.overall["f1"] == 1.0
        assert "1.000" in rep.to_table()

    def test_category_means(self, tmp_path, rng):
        pairs = [(f"p{k}", "car" if k % 2 else "lamp", rng.random((20, 3)), rng.random((25, 3)))
                 for k in range(8)]
        rep = evaluate_pairs(write_pairs(tmp_path, pairs), threads=3)
        for cat in ("car", "lamp"):
            members = [p for p in pairs if p[1] == cat]
            want = sum(oracles.chamfer_l1(p[2], p[3]) for p in members) / len(members)
            assert abs(rep.per_category[cat]["cd_l1"] - want) <= 1e-12
            assert rep.per_category[cat]["count"] == 4
        assert list(rep.per_category) == ["lamp", "car"]

    def test_thread_invariance(self, tmp_path, rng):
        pairs = [(f"p{k}", "car", rng.random((40, 3)), rng.random((35, 3))) for k in range(10)]
        path = write_pairs(tmp_path, pairs)
        a = evaluate_pairs(path, threads=1)
        b = evaluate_pairs(path, threads=8)
        assert a.to_json() == b.to_json()
        assert a.to_table() == b.to_table()

    def test_failures_reported(self, tmp_path, rng):
        path = write_pairs(tmp_path, [("a", "car", rng.random((5, 3)), rng.random((5, 3)))])
        with open(path, "a") as fh:
            fh.write(json.dumps({"id": "gone", "category": "car", "pred_path": "x.xyz", "gt_path": "y.xyz"}) + "\n")
        rep = evaluate_pairs(path)
        assert [f["id"] for f in rep.failures] == ["gone"]
        assert rep.overall["count"] == 1

    def test_fidelity_uses_input(self, tmp_path, rng):
        pred, gt = rng.random((20, 3)), rng.random((20, 3))
        save_cloud(PointCloud(pred), tmp_path / "p.xyz")
        save_cloud(PointCloud(gt), tmp_path / "g.xyz")
        save_cloud(PointCloud(pred[:5]), tmp_path / "i.xyz")
        spec = PairSpec("x", "car", str(tmp_path / "p.xyz"), str(tmp_path / "g.xyz"), str(tmp_path / "i.xyz"))
        assert evaluate_pairs([spec]).pairs[0]["fidelity"] == 0.0

    def test_table_scaling(self, tmp_path):
        path = write_pairs(tmp_path, [("a", "car", np.zeros((1, 3)), np.array([[0.002, 0, 0]]))])
        table = evaluate_pairs(path).to_table()
        assert "2.00" in table.splitlines()[1]
        assert table.splitlines()[0].split()[:3] == ["Metric", "Ave", "car"]


class TestDenseOracle:
    def test_matches_double_loop(self, rng):
        g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        for P, Q in ((rng.random((300, 3)), rng.random((257, 3))), (g[:-1] + 0.5, g), (g, g[::-1].copy())):
            npt.assert_array_equal(oracles.nn_sq_dense(P, Q), oracles.nn_brute(P, Q)[1])
