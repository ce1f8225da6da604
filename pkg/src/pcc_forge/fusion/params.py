"""Parameter containers for the fusion graph and their binary files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .. import FORMAT_VERSION

N_FACES = 6
N_BLOCKS = 4
BW_MAGIC = b"BW24"
BUNDLE_MAGIC = b"PCCP"


class AttentionParams(NamedTuple):
    """Query/key/value/output projections of one attention block (``D x D``)."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray

    @property
    def dim(self) -> int:
        return self.Wq.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.dim)


@dataclass
class BlockWeights:
    """The 24 per-(face, block) scalars, face-major."""

    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).reshape(N_FACES, N_BLOCKS)
        if not np.isfinite(w).all():
            raise ValueError("block weights must be finite")
        self.w = w

    @classmethod
    def ones(cls) -> "BlockWeights":
        return cls(np.ones((N_FACES, N_BLOCKS)))

    def to_bytes(self) -> bytes:
        return BW_MAGIC + self.w.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockWeights":
        if len(data) != 4 + 24 * 8 or data[:4] != BW_MAGIC:
            raise ValueError("not a BW24 block-weight file")
        return cls(np.frombuffer(data, dtype="<f8", offset=4))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BlockWeights":
        return cls.from_bytes(Path(path).read_bytes())


class FusionParams:
    """Named float64 arrays for every learned matrix in the fusion graph."""

    ATTENTION_GROUPS = ("local", "fuse", "clip")

    def __init__(self, arrays: dict):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name) -> bool:
        return name in self.arrays

    def attention(self, group: str) -> AttentionParams:
        a = self.arrays
        return AttentionParams(a[f"{group}.Wq"], a[f"{group}.Wk"], a[f"{group}.Wv"], a[f"{group}.Wo"])

    @property
    def dim(self) -> int:
        return self.arrays["local.Wq"].shape[0]

    @property
    def point_dim(self) -> int:
        return self.arrays["point.W"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.arrays["final.W"].shape[0]

    def copy(self) -> "FusionParams":
        return FusionParams({k: v.copy() for k, v in self.arrays.items()})

    def to_bytes(self) -> bytes:
        ver = FORMAT_VERSION.encode("ascii")
        out = [BUNDLE_MAGIC, struct.pack("<H", len(ver)), ver, struct.pack("<I", len(self.arrays))]
        for name, arr in self.arrays.items():
            key = name.encode("utf-8")
            out.append(struct.pack("<H", len(key)) + key)
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FusionParams":
        if data[:4] != BUNDLE_MAGIC:
            raise ValueError("not a parameter bundle")
        pos = 4
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        version = data[pos:pos + n].decode("ascii")
        pos += n
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported bundle version {version!r}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
        if pos != len(data):
            raise ValueError("trailing bytes in parameter bundle")
        return cls(arrays)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FusionParams":
        return cls.from_bytes(Path(path).read_bytes())


def init_params(seed: int = 0, dim: int = 512, point_dim: int = 512, out_dim: int = 512,
                hidden: int = 64) -> FusionParams:
    """Seeded initialisation with ``N(0, 1/fan_in)`` entries."""
    rng = np.random.default_rng([seed, 0x5EED])

    def normal(rows, cols, fan_in=None):
        return rng.standard_normal((rows, cols)) / np.sqrt(fan_in or cols)

    a = {}
    for g in FusionParams.ATTENTION_GROUPS:
        for m in ("Wq", "Wk", "Wv", "Wo"):
            a[f"{g}.{m}"] = normal(dim, dim)
    a["text.W"] = normal(dim, dim)
    a["text.b"] = rng.standard_normal(dim) * 0.1
    a["point.W"] = normal(point_dim, 3, fan_in=1)
    a["point.b"] = rng.standard_normal(point_dim) * 0.1
    if point_dim != dim:
        a["point.proj"] = normal(dim, point_dim)
    a["final.W"] = normal(out_dim, point_dim + dim)
    a["final.b"] = np.zeros(out_dim)
    # grid columns get unit scale so the decoder spreads points out
    w1 = np.empty((hidden, 2 + out_dim))
    w1[:, :2] = rng.standard_normal((hidden, 2)) * 2.0
    w1[:, 2:] = normal(hidden, out_dim)
    a["dec.W1"] = w1
    a["dec.b1"] = rng.standard_normal(hidden) * 0.1
    a["dec.W2"] = normal(3, hidden)
    a["dec.b2"] = np.zeros(3)
    return FusionParams(a)
