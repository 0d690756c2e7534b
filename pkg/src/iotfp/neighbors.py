"""Neighbouring-probability matrix: thresholded cosine similarity between
the embeddings of a device's frequent packet sizes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingTable
from .trace import K, Trace

DEFAULT_LAMBDA = 0.4
DEFAULT_MIN_FREQ = 10


class EmptyModelError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborProbMatrix:
    sizes: tuple[int, ...]
    matrix: np.ndarray
    lam: float = DEFAULT_LAMBDA
    min_freq: int = DEFAULT_MIN_FREQ
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.sizes)})

    def index(self, p: int) -> int | None:
        return self._index.get(p)

    def __contains__(self, p: int) -> bool:
        return p in self._index

    def __len__(self) -> int:
        return len(self.sizes)

    def column_lookup(self, keys) -> np.ndarray:
        """Dense (K+1) x len(keys) array: row p holds P(key_j | p), zero when p is unseen."""
        out = np.zeros((K + 1, len(keys)))
        for j, x in enumerate(keys):
            jx = self._index.get(x)
            if jx is not None:
                out[list(self.sizes), j] = self.matrix[:, jx]
        return out

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "min_freq": self.min_freq,
                "sizes": list(self.sizes), "matrix": self.matrix.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NeighborProbMatrix":
        sizes = tuple(int(p) for p in doc["sizes"])
        n = len(sizes)
        mat = np.asarray(doc["matrix"], dtype=np.float64).reshape(n, n)
        return cls(sizes, mat, float(doc["lambda"]), int(doc["min_freq"]))


def truncate_similarity(sim: np.ndarray, lam: float) -> np.ndarray:
    out = np.where(sim >= lam, sim, 0.0)
    np.fill_diagonal(out, 1.0)
    return np.clip(out, 0.0, 1.0)


def build_matrix(table: EmbeddingTable, device: Trace, lam: float = DEFAULT_LAMBDA,
                 min_freq: int = DEFAULT_MIN_FREQ) -> NeighborProbMatrix:
    """Cosine similarity over sizes seen at least ``min_freq`` times, cut below ``lam``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if len(device) == 0:
        raise EmptyModelError("device trace is empty")
    counts = np.bincount(device.dir_sizes, minlength=K + 1)
    sizes = np.flatnonzero(counts >= max(min_freq, 1))
    emb = table.rows(sizes)
    norms = np.linalg.norm(emb, axis=1)
    keep = norms > 0
    sizes, emb, norms = sizes[keep], emb[keep], norms[keep]
    if len(sizes) == 0:
        raise EmptyModelError(f"no packet size occurs at least {min_freq} times")
    unit = emb / norms[:, None]
    sim = unit @ unit.T
    sim = (sim + sim.T) / 2  # exact symmetry
    return NeighborProbMatrix(tuple(int(p) for p in sizes), truncate_similarity(sim, lam),
                              lam, min_freq)


def neighbor_prob(m: NeighborProbMatrix, p_i: int, x_j: int) -> float:
    """P(neighbour = x_j | observed p_i); 0 when either size is outside the vocabulary."""
    i, j = m.index(p_i), m.index(x_j)
    if i is None or j is None:
        return 0.0
    return float(m.matrix[i, j])
