import json

import numpy as np
import pytest
from hypothesis import settings

from pcc_forge.cloud import save_cloud
from pcc_forge.corpus import MANIFEST_NAME, build_corpus, load_corpus
from pcc_forge.synthetic import cube, sphere, write_octant_inputs

settings.register_profile("pcc", max_examples=40, deadline=None)
settings.load_profile("pcc")


def write_inputs(tmp, clouds):
    """clouds: list of (id, category, PointCloud, gt or None) -> inputs.jsonl path."""
    tmp.mkdir(parents=True, exist_ok=True)
    lines = []
    for rid, cat, cloud, gt in clouds:
        save_cloud(cloud, tmp / f"{rid}.pcf", "pcf")
        doc = {"id": rid, "category": cat, "cloud_path": f"{rid}.pcf"}
        if gt is not None:
            save_cloud(gt, tmp / f"{rid}_gt.pcf", "pcf")
            doc["gt_path"] = f"{rid}_gt.pcf"
        lines.append(json.dumps(doc))
    path = tmp / "inputs.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_cloud_inputs(tmp_path):
    return write_inputs(tmp_path / "in", [
        ("s0", "airplane", sphere(600, seed=1), sphere(800, seed=2)),
        ("c0", "car", cube(600, seed=3), cube(800, seed=4)),
    ])


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Four notched cubes at 16x16, shared by the fusion and CLI tests."""
    root = tmp_path_factory.mktemp("corpus")
    inputs = write_octant_inputs(root / "in", 4, seed=3, n_partial=512, n_gt=512)
    build_corpus(inputs, root / "out", resolution=(16, 16), n_points=512, seed=5)
    return root / "out" / MANIFEST_NAME


@pytest.fixture(scope="session")
def small_records(small_corpus):
    return load_corpus(small_corpus)
