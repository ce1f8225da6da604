"""Pluggable image/text encoders standing in for a vision-language model.

``stub`` encoders are seeded fixed random projections, so every embedding is a
pure function of (input, seed, dim). ``file`` encoders read precomputed
embeddings named ``{record_id}.{face}.emb`` (partial maps, face slugs
``px nx py ny pz nz``), ``{record_id}.{face}.global.emb`` (inpainted maps)
and ``{record_id}.text.emb``.

Stub image tokens: the map is encoded pixel-wise as ``1 - depth / 2`` on
occupied pixels and 0 elsewhere (near surfaces bright, empty pixels black),
each 2x2 block is flattened, and token ``b`` is
``normalize(R @ block_b + c_b)`` with one shared projection ``R`` and a bias
row ``c_b`` per block. The pooled embedding is the normalised token mean.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..projection import DepthMap, Face
from .params import N_BLOCKS

EMB_MAGIC = b"EMB1"
TEXT_BYTES = 256


class EncoderError(RuntimeError):
    pass


def l2_normalize(x: np.ndarray, axis=-1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise EncoderError("cannot normalise a zero vector")
    return x / n


@lru_cache(maxsize=8)
def _image_projection(seed: int, dim: int, block_h: int, block_w: int):
    rng = np.random.default_rng([seed, 1, dim, block_h, block_w])
    n = block_h * block_w
    R = rng.standard_normal((dim, n)) / np.sqrt(n)
    C = rng.standard_normal((N_BLOCKS, dim)) / np.sqrt(dim)
    R.setflags(write=False)
    C.setflags(write=False)
    return R, C


@lru_cache(maxsize=8)
def _text_projection(seed: int, dim: int):
    rng = np.random.default_rng([seed, 2, dim])
    R = rng.standard_normal((dim, TEXT_BYTES)) / np.sqrt(TEXT_BYTES)
    c = rng.standard_normal(dim) / np.sqrt(dim)
    R.setflags(write=False)
    c.setflags(write=False)
    return R, c


def map_intensity(dmap: DepthMap) -> np.ndarray:
    return np.where(dmap.occupancy, 1.0 - 0.5 * dmap.depth.astype(np.float64), 0.0)


def block_vectors(dmap: DepthMap) -> np.ndarray:
    """``(4, h*w)`` flattened quadrants, row-major block order."""
    H, W = dmap.resolution
    img = map_intensity(dmap)
    h, w = H // 2, W // 2
    return np.stack([img[r * h:(r + 1) * h, c * w:(c + 1) * w].ravel()
                     for r in range(2) for c in range(2)])


def read_embedding(path) -> tuple[np.ndarray, np.ndarray | None]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != EMB_MAGIC:
        raise EncoderError(f"{path}: not an EMB1 file")
    dim, n_tok = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * dim * (1 + n_tok):
        raise EncoderError(f"{path}: size does not match dim={dim}, tokens={n_tok}")
    vals = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64).reshape(1 + n_tok, dim)
    return vals[0], (vals[1:] if n_tok else None)


def write_embedding(path, pooled, tokens=None) -> None:
    pooled = np.asarray(pooled, dtype="<f4").ravel()
    tok = np.zeros((0, pooled.shape[0]), "<f4") if tokens is None else np.asarray(tokens, "<f4")
    header = EMB_MAGIC + struct.pack("<II", pooled.shape[0], tok.shape[0])
    Path(path).write_bytes(header + pooled.tobytes() + tok.tobytes())


@dataclass(frozen=True)
class EncoderHandle:
    kind: str = "stub"
    dim: int = 512
    seed: int = 0
    directory: str | None = None
    resolution: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("stub", "file"):
            raise ValueError(f"encoder kind must be 'stub' or 'file', not {self.kind!r}")
        if self.kind == "file" and not self.directory:
            raise ValueError("file encoder needs a directory")
        if self.dim < 1:
            raise ValueError("embedding dim must be positive")

    @classmethod
    def stub(cls, seed: int = 0, dim: int = 512, resolution=None) -> "EncoderHandle":
        return cls("stub", dim, seed, None, tuple(resolution) if resolution else None)

    @classmethod
    def from_directory(cls, directory, dim: int = 512) -> "EncoderHandle":
        return cls("file", dim, 0, str(directory))

    def _load(self, name: str, need_tokens: bool):
        path = Path(self.directory) / name
        if not path.is_file():
            raise EncoderError(f"missing embedding file {path}")
        pooled, tokens = read_embedding(path)
        if pooled.shape[0] != self.dim:
            raise EncoderError(f"{path}: dim {pooled.shape[0]} != encoder dim {self.dim}")
        if need_tokens and (tokens is None or tokens.shape[0] != N_BLOCKS):
            raise EncoderError(f"{path}: expected {N_BLOCKS} block tokens")
        return l2_normalize(pooled), (None if tokens is None else l2_normalize(tokens))


def encode_image(handle: EncoderHandle, dmap: DepthMap, record_id: str | None = None,
                 variant: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Pooled embedding and ``(4, D)`` block tokens of one depth map.

    ``variant="global"`` selects the inpainted-map files of a file encoder.
    """
    if handle.kind == "file":
        if record_id is None:
            raise EncoderError("file encoder needs the record id")
        suffix = f".{variant}" if variant else ""
        return handle._load(f"{record_id}.{Face.parse(dmap.face).slug}{suffix}.emb", need_tokens=True)
    if handle.resolution is not None and tuple(dmap.resolution) != tuple(handle.resolution):
        raise EncoderError(f"map resolution {dmap.resolution} != encoder resolution {handle.resolution}")
    H, W = dmap.resolution
    if H % 2 or W % 2:
        raise EncoderError("map dimensions must be even")
    R, C = _image_projection(handle.seed, handle.dim, H // 2, W // 2)
    tokens = l2_normalize(block_vectors(dmap) @ R.T + C)
    pooled = l2_normalize(tokens.sum(axis=0) / N_BLOCKS)
    return pooled, tokens


def text_vector(text: str) -> np.ndarray:
    raw = text.encode("utf-8")[:TEXT_BYTES]
    x = np.zeros(TEXT_BYTES)
    x[:len(raw)] = np.frombuffer(raw, dtype=np.uint8) / 255.0
    return x


def encode_text(handle: EncoderHandle, text: str, record_id: str | None = None) -> np.ndarray:
    if not text:
        raise EncoderError("text must be non-empty")
    if handle.kind == "file":
        if record_id is None:
            raise EncoderError("file encoder needs the record id")
        return handle._load(f"{record_id}.text.emb", need_tokens=False)[0]
    R, c = _text_projection(handle.seed, handle.dim)
    return l2_normalize(R @ text_vector(text) + c)
