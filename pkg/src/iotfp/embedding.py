"""Skip-gram embedding of directional packet sizes with negative sampling.

Packets that share a burst are pulled together; packets drawn from the
background unigram distribution are pushed away. One table serves both the
center and the context role.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .trace import K, Trace

FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    c: int = 3
    k: int = 5
    d: int = 32
    learning_rate: float = 0.025
    epochs: int = 20
    rng_seed: int = 0
    t_b_us: int = 1_000_000

    def __post_init__(self):
        if self.c < 1 or self.k < 1 or self.d < 2:
            raise ConfigurationError(f"need c>=1, k>=1, d>=2: {self}")
        if self.learning_rate < 0 or self.epochs < 0 or self.t_b_us <= 0:
            raise ConfigurationError(f"invalid schedule: {self}")


class EmbeddingTable:
    """K x d lookup table; ``row(p)`` is the embedding of directional size ``p``."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != K:
            raise ConfigurationError(f"expected a {K} x d matrix, got {matrix.shape}")
        self.matrix = matrix

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def row(self, p: int) -> np.ndarray:
        return self.matrix[p - 1]

    def rows(self, ps: Sequence[int]) -> np.ndarray:
        return self.matrix[np.asarray(ps, dtype=np.int64) - 1]

    def cosine(self, p: int, q: int) -> float:
        a, b = self.row(p), self.row(q)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 0.0
        return float(a @ b / (na * nb))

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.matrix.copy())

    def to_dict(self, cfg: TrainingConfig | None = None) -> dict:
        return {
            "version": FORMAT_VERSION,
            "K": K,
            "d": self.d,
            "cfg": asdict(cfg) if cfg is not None else None,
            "matrix": self.matrix.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EmbeddingTable":
        if doc.get("version") != FORMAT_VERSION or doc.get("K") != K:
            raise ConfigurationError(f"unsupported embedding record {doc.get('version')!r}")
        d = int(doc["d"])
        return cls(np.asarray(doc["matrix"], dtype=np.float64).reshape(K, d))


def init_table(d: int, rng: np.random.Generator) -> EmbeddingTable:
    return EmbeddingTable(rng.uniform(-0.5 / d, 0.5 / d, size=(K, d)))


class UnigramSampler:
    """Raw unigram distribution over directional sizes seen in the background."""

    def __init__(self, freq: np.ndarray):
        freq = np.asarray(freq, dtype=np.int64)
        if freq.shape != (K + 1,):
            raise ConfigurationError(f"freq must have length {K + 1} (index = size)")
        if freq.sum() <= 0:
            raise ConfigurationError("sampler needs at least one background packet")
        self.freq = freq
        self.support = np.flatnonzero(freq)
        self._weights = freq[self.support].astype(np.float64)
        self.total = int(freq.sum())
        self._full_cdf = np.cumsum(self._weights)
        self._cdf_cache: dict[tuple, np.ndarray] = {}

    def prob(self, p: int) -> float:
        return self.freq[p] / self.total if 0 < p <= K else 0.0

    def _cdf(self, excluded: Iterable[int]) -> np.ndarray:
        key = tuple(sorted(set(int(p) for p in excluded)))
        if not key:
            return self._full_cdf
        cdf = self._cdf_cache.get(key)
        if cdf is None:
            weights = np.where(np.isin(self.support, key), 0.0, self._weights)
            cdf = np.cumsum(weights)
            if len(self._cdf_cache) < 100_000:
                self._cdf_cache[key] = cdf
        return cdf

    def draw(self, excluded: Iterable[int], n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` sizes from the distribution renormalized without ``excluded``."""
        cdf = self._cdf(excluded)
        if cdf[-1] <= 0:
            raise SamplingError("no background packet size left after exclusion")
        u = rng.random(n) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        return self.support[np.minimum(idx, len(cdf) - 1)]


def build_sampler(background: Trace) -> UnigramSampler:
    if len(background) == 0:
        raise ConfigurationError("background trace is empty")
    return UnigramSampler(np.bincount(background.dir_sizes, minlength=K + 1))


def sample_negatives(sampler: UnigramSampler, relevant: Iterable[int], k: int,
                     rng: np.random.Generator) -> list[int]:
    """Draw ``k`` irrelevant packets, never one of ``relevant``."""
    return sampler.draw(relevant, k, rng).tolist()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _as_neg_matrix(relevants: Sequence[int], negatives) -> np.ndarray:
    neg = np.asarray(negatives, dtype=np.int64)
    if neg.ndim == 1:
        neg = neg.reshape(len(relevants), -1)
    if neg.shape[0] != len(relevants):
        raise ConfigurationError("need one row of negatives per relevant packet")
    return neg


def skipgram_loss(matrix: np.ndarray, center: int, relevants: Sequence[int],
                  negatives) -> float:
    """Negative-sampling loss for one center packet.

    ``negatives[i]`` holds the k irrelevant packets drawn for ``relevants[i]``;
    each positive term is repeated once per paired negative.
    """
    neg = _as_neg_matrix(relevants, negatives)
    e_t = matrix[center - 1]
    s_pos = matrix[np.asarray(relevants) - 1] @ e_t
    s_neg = matrix[neg - 1] @ e_t
    k = neg.shape[1]
    # -log sigma(x) = log(1 + exp(-x))
    return float(k * np.logaddexp(0.0, -s_pos).sum() + np.logaddexp(0.0, s_neg).sum())


def skipgram_grad(matrix: np.ndarray, center: int, relevants: Sequence[int],
                  negatives) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`skipgram_loss`.

    Returns ``(rows, grads)``: 0-based row indices (with repeats) and the
    matching gradient contributions, to be scattered with ``np.add.at``.
    """
    neg = _as_neg_matrix(relevants, negatives)
    n_rel, k = neg.shape
    others = np.concatenate((np.asarray(relevants, dtype=np.int64), neg.ravel())) - 1
    e_t = matrix[center - 1]
    e_o = matrix[others]
    sig = _sigmoid(e_o @ e_t)
    # d/ds of -log sigma(s) is sigma(s) - 1; of -log sigma(-s) is sigma(s)
    coef = sig
    coef[:n_rel] = k * (sig[:n_rel] - 1.0)
    rows = np.empty(len(others) + 1, dtype=np.int64)
    rows[0] = center - 1
    rows[1:] = others
    grads = np.empty((len(rows), matrix.shape[1]))
    grads[0] = coef @ e_o
    np.multiply(coef[:, None], e_t, out=grads[1:])
    return rows, grads


def _apply_step(matrix: np.ndarray, center: int, relevants, negatives, lr: float) -> None:
    rows, grads = skipgram_grad(matrix, center, relevants, negatives)
    np.subtract.at(matrix, rows, lr * grads)


def skipgram_step(table: EmbeddingTable, center: int, relevants: Sequence[int],
                  negatives, lr: float) -> EmbeddingTable:
    """One SGD step on the loss of ``center``; returns a new table."""
    for p in (center, *relevants, *np.ravel(negatives)):
        if not 1 <= p <= K:
            raise ConfigurationError(f"packet index {p} outside [1, {K}]")
    out = table.copy()
    if lr:
        _apply_step(out.matrix, center, relevants, negatives, lr)
        if not np.isfinite(out.matrix).all():
            raise FloatingPointError("embedding diverged")
    return out


def split_bursts(timestamps: np.ndarray, t_b_us: int) -> list[slice]:
    """Slices of maximal runs whose consecutive gaps are at most ``t_b_us``."""
    if len(timestamps) == 0:
        return []
    breaks = np.flatnonzero(np.diff(timestamps) > t_b_us) + 1
    edges = np.concatenate(([0], breaks, [len(timestamps)]))
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _contexts(bursts: list[np.ndarray], c: int):
    """Yield (center, relevants, window) for every packet with a burst neighbour."""
    for burst in bursts:
        n = len(burst)
        if n < 2:
            continue
        for t in range(n):
            lo, hi = max(0, t - c), min(n, t + c + 1)
            rel = np.concatenate((burst[lo:t], burst[t + 1:hi]))
            yield int(burst[t]), rel, burst[lo:hi]


def train_embedding(device: Trace, background: Trace,
                    cfg: TrainingConfig = TrainingConfig()) -> EmbeddingTable:
    """Train the packet-size embedding on a device's own traffic.

    Context windows never cross a burst boundary (gap > ``cfg.t_b_us``).
    The learning rate decays linearly to 1e-4 of its start value.
    """
    if len(device) == 0:
        raise ConfigurationError("device trace is empty")
    sampler = build_sampler(background)
    rng = np.random.default_rng(cfg.rng_seed)
    table = init_table(cfg.d, rng)
    if cfg.epochs == 0:
        return table

    sizes = device.dir_sizes
    bursts = [sizes[s] for s in split_bursts(device.timestamps, cfg.t_b_us)]
    contexts = list(_contexts(bursts, cfg.c))
    window_sets = {(ctr, w.tobytes()): frozenset(w.tolist()) for ctr, _, w in contexts}
    total = max(1, cfg.epochs * len(contexts))
    matrix = table.matrix
    step = 0
    for _ in range(cfg.epochs):
        for center, rel, window in contexts:
            lr = cfg.learning_rate * max(1e-4, 1.0 - step / total)
            neg = sampler.draw(window, len(rel) * cfg.k, rng)
            if not window_sets[center, window.tobytes()].isdisjoint(neg.tolist()):
                raise SamplingError("negative sample collided with a relevant packet")
            _apply_step(matrix, center, rel, neg.reshape(len(rel), cfg.k), lr)
            step += 1
    if not np.isfinite(matrix).all():
        raise FloatingPointError("embedding diverged")
    return table
