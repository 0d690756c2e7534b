"""Per-device fingerprint model: training pipeline and model file I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .compiler import quantize_array
from .embedding import EmbeddingTable, TrainingConfig, train_embedding
from .features import DEFAULT_TW_US, assign_windows, window_features, window_labels
from .harness import EvalReport, confusion, split_indices
from .keypackets import (DEFAULT_N_KEYS, ExtractionConfig, KeyPacket, KeyPacketSet,
                         extract_key_packets, select_top_n)
from .neighbors import (DEFAULT_LAMBDA, DEFAULT_MIN_FREQ, EmptyModelError,
                        NeighborProbMatrix, build_matrix)
from .trace import Trace
from .tree import MAX_LEAVES, DecisionTree, train_tree

log = logging.getLogger(__name__)

MODEL_FORMAT = "iotfp-device-model"
MODEL_VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    embedding: TrainingConfig = TrainingConfig()
    extraction: ExtractionConfig = ExtractionConfig()
    lam: float = DEFAULT_LAMBDA
    min_freq: int = DEFAULT_MIN_FREQ
    n_keys: int = DEFAULT_N_KEYS
    t_w_us: int = DEFAULT_TW_US
    max_leaves: int = MAX_LEAVES
    split_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        doc = dict(doc)
        return cls(embedding=TrainingConfig(**doc.pop("embedding")),
                   extraction=ExtractionConfig(**doc.pop("extraction")), **doc)


@dataclass
class DeviceFingerprintModel:
    device_id: str
    key_packets: list[int]
    key_set: KeyPacketSet
    matrix: NeighborProbMatrix
    tree: DecisionTree
    qtree: DecisionTree | None
    t_w_us: int
    params: ModelParams = field(default_factory=ModelParams)
    embedding: EmbeddingTable | None = None
    shortfall: bool = False

    def __post_init__(self):
        for t in (self.tree, self.qtree):
            if t is None:
                continue
            if t.n_features != len(self.key_packets):
                raise ModelFileError("tree dimension differs from the key packet count")
            if t.n_leaves > MAX_LEAVES:
                raise ModelFileError(f"tree exceeds {MAX_LEAVES} leaves")

    @property
    def n_dims(self) -> int:
        return len(self.key_packets)

    def prob_lookup(self) -> np.ndarray:
        """(K+1) x N float contributions of each directional size."""
        return self.matrix.column_lookup(self.key_packets)

    def quantized_lookup(self) -> np.ndarray:
        return quantize_array(self.prob_lookup())

    def features(self, trace: Trace, windows=None):
        """(windows, float features, quantized features) over ``trace``."""
        if windows is None:
            windows = assign_windows(trace.timestamps, trace.hosts, self.t_w_us)
        return (windows, window_features(trace, windows, self.prob_lookup()),
                window_features(trace, windows, self.quantized_lookup()))

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "device_id": self.device_id,
            "t_w_us": self.t_w_us,
            "params": self.params.to_dict(),
            "key_packets": list(self.key_packets),
            "shortfall": self.shortfall,
            "key_set": [e.to_dict() for e in self.key_set],
            "matrix": self.matrix.to_dict(),
            "tree": {"n_features": self.tree.n_features, "nodes": self.tree.to_nodes()},
            "qtree": (None if self.qtree is None else
                      {"n_features": self.qtree.n_features, "nodes": self.qtree.to_nodes()}),
            "embedding": None if self.embedding is None else self.embedding.to_dict(self.params.embedding),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DeviceFingerprintModel":
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise ModelFileError(f"not a v{MODEL_VERSION} model file")
        try:
            def tree(d):
                return None if d is None else DecisionTree.from_nodes(d["nodes"], int(d["n_features"]))
            return cls(
                device_id=doc["device_id"],
                key_packets=[int(p) for p in doc["key_packets"]],
                key_set=KeyPacketSet(KeyPacket.from_dict(e) for e in doc["key_set"]),
                matrix=NeighborProbMatrix.from_dict(doc["matrix"]),
                tree=tree(doc["tree"]),
                qtree=tree(doc["qtree"]),
                t_w_us=int(doc["t_w_us"]),
                params=ModelParams.from_dict(doc["params"]),
                embedding=None if doc["embedding"] is None else EmbeddingTable.from_dict(doc["embedding"]),
                shortfall=bool(doc["shortfall"]),
            )
        except (KeyError, TypeError) as exc:
            raise ModelFileError(f"model file is missing {exc}") from exc

    def save(self, path: str | Path) -> None:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DeviceFingerprintModel":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)


@dataclass
class TrainingSummary:
    device_id: str
    vocab_size: int
    n_keys: int
    shortfall: bool
    leaves: int
    q_leaves: int
    n_windows: int
    train: EvalReport
    val: EvalReport
    test: EvalReport
    split: list[np.ndarray] = field(repr=False, default_factory=list)

    def lines(self) -> list[str]:
        out = [f"device={self.device_id} vocab={self.vocab_size} keys={self.n_keys}"
               f"{' (shortfall)' if self.shortfall else ''} leaves={self.leaves} "
               f"quantized_leaves={self.q_leaves} windows={self.n_windows}"]
        for name, rep in (("train", self.train), ("val", self.val), ("test", self.test)):
            out.append(f"  {name}: {rep.summary()}")
        return out


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def _remap_keys(keys: KeyPacketSet, size_map: Callable[[int], int]) -> KeyPacketSet:
    best: dict[int, KeyPacket] = {}
    for e in keys:
        p = size_map(e.size)
        if p not in best or e.period_us < best[p].period_us:
            best[p] = replace(e, size=p)
    return KeyPacketSet(best[p] for p in sorted(best))


def train_device_model(device_id: str, device: Trace, background: Trace, windows_trace: Trace,
                       params: ModelParams = ModelParams(), key_trace: Trace | None = None,
                       size_map: Callable[[int], int] | None = None,
                       ) -> tuple[DeviceFingerprintModel, TrainingSummary]:
    """Build a device model end to end.

    ``device`` is the device's own traffic as the monitor sees it and feeds
    the embedding and probability matrix. Key packets come from
    ``key_trace`` (default ``device``), which must still carry per-server
    tuples; ``size_map`` translates its sizes into the monitored view (e.g.
    a VPN's size overhead). Trees are fit on the labelled windows of
    ``windows_trace`` using the training part of a seeded 4:3:3 split.
    """
    emb = _stage("embedding", train_embedding, device, background, params.embedding)
    matrix = _stage("neighbor_matrix", build_matrix, emb, device, params.lam, params.min_freq)
    keys = _stage("key_packets", extract_key_packets, key_trace if key_trace is not None else device,
                  params.extraction)
    if size_map is not None:
        keys = _remap_keys(keys, size_map)
    usable = KeyPacketSet(e for e in keys if e.size in matrix)
    if len(usable) < len(keys):
        log.info("%s: %d key packets fall outside the frequent vocabulary", device_id,
                 len(keys) - len(usable))
    top = _stage("key_packets", select_top_n, usable, params.n_keys)

    lookup = matrix.column_lookup(top.sizes)
    qlookup = quantize_array(lookup)
    windows = assign_windows(windows_trace.timestamps, windows_trace.hosts, params.t_w_us)
    if len(windows) == 0:
        raise StageError("features", EmptyModelError("no windows to train on"))
    feats = window_features(windows_trace, windows, lookup)
    qfeats = window_features(windows_trace, windows, qlookup)
    y = window_labels(windows_trace, windows, device_id)
    split = split_indices(len(windows), (4, 3, 3), params.split_seed)
    train_idx = split[0]
    tree = _stage("tree", train_tree, feats[train_idx], y[train_idx], params.max_leaves)
    qtree = _stage("tree", train_tree, qfeats[train_idx], y[train_idx], params.max_leaves)
    model = DeviceFingerprintModel(device_id, list(top.sizes), usable, matrix, tree, qtree,
                                   params.t_w_us, params, emb, top.shortfall)
    pred = qtree.predict_many(qfeats) if len(qfeats) else np.zeros(0, dtype=np.int64)
    reports = [confusion(y[idx], pred[idx], device_id) for idx in split]
    summary = TrainingSummary(device_id, len(matrix), len(top.sizes), top.shortfall,
                              tree.n_leaves, qtree.n_leaves, len(windows), *reports, split=split)
    return model, summary
