"""Discrete speech units: a seeded k-means codebook over clean audio
features and nearest-centroid quantization at four codes per video
frame.

Codebook file layout: magic b"VSCB" | version u32 | V u32 | A u32 |
seed i64 | centroids float64 little-endian (V x A, row-major).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

UNITS_PER_FRAME = 4
CODEBOOK_MAGIC = b"VSCB"
CODEBOOK_VERSION = 1


@dataclass
class UnitSequence:
    codes: np.ndarray  # int64, length 4 * T
    codebook_size: int


@dataclass
class Codebook:
    centroids: np.ndarray  # (V, A)
    seed: int

    @property
    def size(self):
        return self.centroids.shape[0]


def build_codebook(features, size=64, seed=0, iters=25):
    """Lloyd's k-means with seeded distinct initialization.

    features: (n, A) clean audio feature rows pooled across the corpus.
    Empty clusters are reseeded to the point farthest from its current
    centroid, keeping every centroid distinct and the whole procedure
    reproducible from the seed.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < size:
        raise ShapeError(f"need at least {size} feature rows, got {n}")
    rng = np.random.default_rng(seed)
    centroids = features[rng.choice(n, size=size, replace=False)].copy()
    for _ in range(iters):
        codes = _nearest(features, centroids)
        dists = ((features - centroids[codes]) ** 2).sum(axis=1)
        for k in range(size):
            members = codes == k
            if members.any():
                centroids[k] = features[members].mean(axis=0)
            else:
                centroids[k] = features[int(np.argmax(dists))]
                dists[int(np.argmax(dists))] = 0.0
    return Codebook(centroids=centroids, seed=seed)


def _nearest(features, centroids):
    # argmin breaks ties toward the lowest index
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def quantize(audio_feats, codebook, num_frames=None):
    """Map audio feature rows to nearest-centroid codes.

    audio_feats: (4T, A) at exactly four rows per video frame; pass
    ``num_frames`` to enforce the rate contract.
    """
    audio_feats = np.asarray(audio_feats, dtype=np.float64)
    if audio_feats.ndim != 2 or audio_feats.shape[1] != codebook.centroids.shape[1]:
        raise ShapeError(
            f"audio features {audio_feats.shape} do not match codebook "
            f"dimension {codebook.centroids.shape[1]}")
    if audio_feats.shape[0] % UNITS_PER_FRAME != 0:
        raise ShapeError(
            f"audio rows ({audio_feats.shape[0]}) must be a multiple of "
            f"{UNITS_PER_FRAME}")
    if num_frames is not None and audio_feats.shape[0] != UNITS_PER_FRAME * num_frames:
        raise ShapeError(
            f"expected {UNITS_PER_FRAME * num_frames} audio rows for "
            f"{num_frames} frames, got {audio_feats.shape[0]}")
    codes = _nearest(audio_feats, codebook.centroids).astype(np.int64)
    return UnitSequence(codes=codes, codebook_size=codebook.size)


def save_codebook(path, codebook):
    v, a = codebook.centroids.shape
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<IIIq", CODEBOOK_VERSION, v, a, codebook.seed))
        f.write(np.ascontiguousarray(codebook.centroids, dtype="<f8").tobytes())


def load_codebook(path):
    with open(path, "rb") as f:
        if f.read(4) != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: not a codebook file")
        version, v, a, seed = struct.unpack("<IIIq", f.read(20))
        if version != CODEBOOK_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        cents = np.frombuffer(f.read(), dtype="<f8").reshape(v, a)
    return Codebook(centroids=cents.copy(), seed=seed)
