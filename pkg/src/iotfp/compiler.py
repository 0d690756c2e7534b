"""Compile a device model into switch-style match-action tables.

Four tables, in pipeline order: direction (exact on ingress direction),
probability (exact on directional size, 8-bit probabilities per key packet),
stateful update (32-bit register accumulation), and inference (one range
rule per decision-tree leaf, gated on the window timeout flag).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .trace import MTU, K
from .tree import MAX_LEAVES, DecisionTree

if TYPE_CHECKING:
    from .model import DeviceFingerprintModel

PROB_SCALE = 255
REG_WIDTH = 32
REG_MAX = (1 << REG_WIDTH) - 1
DEFAULT_IP_SIZE = 65536
RULES_VERSION = 1


class CompileError(ValueError):
    pass


def quantize_prob(p: float) -> int:
    """Scale a probability to [0, 255] and round down."""
    if not 0.0 <= p <= 1.0:
        raise CompileError(f"probability {p} outside [0, 1]")
    return int(math.floor(p * PROB_SCALE))


def quantize_array(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise CompileError("probabilities must lie in [0, 1]")
    return np.floor(probs * PROB_SCALE).astype(np.int64)


@dataclass(frozen=True)
class DirectionRule:
    direction: int
    offset: int


@dataclass(frozen=True)
class InferenceRule:
    priority: int
    ranges: tuple[tuple[int, int], ...]
    label: int
    timeout_match: int = 1

    def matches(self, v: Sequence[int]) -> bool:
        return all(lo <= x <= hi for (lo, hi), x in zip(self.ranges, v))


@dataclass(frozen=True)
class RegisterSpec:
    width: int = REG_WIDTH
    dims: int = 0
    ip_slots: int = DEFAULT_IP_SIZE


@dataclass
class CompiledTableSet:
    device_id: str
    key_packets: tuple[int, ...]
    t_w_us: int
    direction_rules: tuple[DirectionRule, ...]
    prob_rows: dict[int, tuple[int, ...]]
    inference_rules: tuple[InferenceRule, ...]
    register_spec: RegisterSpec
    _lo: np.ndarray = field(init=False, repr=False, compare=False)
    _hi: np.ndarray = field(init=False, repr=False, compare=False)
    _labels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.n_dims
        if len(self.inference_rules) > MAX_LEAVES:
            raise CompileError(f"{len(self.inference_rules)} inference rules exceed the "
                               f"single-stage bound of {MAX_LEAVES}")
        rules = sorted(self.inference_rules, key=lambda r: r.priority)
        self._lo = np.array([[lo for lo, _ in r.ranges] for r in rules], dtype=np.int64).reshape(-1, n)
        self._hi = np.array([[hi for _, hi in r.ranges] for r in rules], dtype=np.int64).reshape(-1, n)
        self._labels = np.array([r.label for r in rules], dtype=np.int64)

    @property
    def n_dims(self) -> int:
        return self.register_spec.dims

    @property
    def default_row(self) -> tuple[int, ...]:
        return (0,) * self.n_dims

    def prob_row(self, dir_size: int) -> tuple[int, ...]:
        return self.prob_rows.get(dir_size, self.default_row)

    def lookup_inference(self, v: Sequence[int]) -> int:
        """Label of the matching range rule; a table miss yields 0."""
        v = np.asarray(v, dtype=np.int64)
        hit = np.flatnonzero(((self._lo <= v) & (v <= self._hi)).all(axis=1))
        return int(self._labels[hit[0]]) if hit.size else 0

    def lookup_many(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=np.int64)
        out = np.zeros(len(V), dtype=np.int64)
        for lo, hi, label in zip(self._lo, self._hi, self._labels):
            m = ((lo <= V) & (V <= hi)).all(axis=1)
            out[m] = label
        return out

    def prob_lookup_array(self) -> np.ndarray:
        """(K+1) x N integer array of probability rows, zero on a miss."""
        arr = np.zeros((K + 1, self.n_dims), dtype=np.int64)
        for p, row in self.prob_rows.items():
            arr[p] = row
        return arr

    def rule_counts(self) -> dict[str, int]:
        return {"directional_packet_size": len(self.direction_rules),
                "packet_size_to_prob": len(self.prob_rows),
                "stateful_update": 1,
                "inference": len(self.inference_rules)}


def compile_probability_table(matrix, key_packets: Sequence[int]) -> tuple[dict[int, tuple[int, ...]], tuple[int, ...]]:
    """One row per vocabulary size: floor(255 * P(key_j | size)); the default row is all zeros."""
    cols = [matrix.index(x) for x in key_packets]
    rows: dict[int, tuple[int, ...]] = {}
    for i, p in enumerate(matrix.sizes):
        probs = [matrix.matrix[i, j] if j is not None else 0.0 for j in cols]
        rows[p] = tuple(int(q) for q in quantize_array(np.clip(probs, 0.0, 1.0)))
    return dict(sorted(rows.items())), (0,) * len(key_packets)


def tree_to_rules(tree: DecisionTree) -> list[InferenceRule]:
    """One inclusive range rule per root-to-leaf path.

    Features are non-negative integers, so ``v <= t`` on the left branch is
    ``v <= floor(t)`` and the right branch starts at ``floor(t) + 1``.
    """
    n = tree.n_features
    rules: list[InferenceRule] = []
    stack = [(tree.root, [(0, REG_MAX)] * n)]
    while stack:
        node, ranges = stack.pop()
        if node.is_leaf:
            rules.append(InferenceRule(len(rules), tuple(ranges), node.label))
            continue
        cut = math.floor(node.threshold)
        j = node.feature
        left = list(ranges)
        left[j] = (left[j][0], min(left[j][1], max(cut, -1)))
        right = list(ranges)
        right[j] = (max(right[j][0], cut + 1), right[j][1])
        stack.append((node.right, right))
        stack.append((node.left, left))
    if len(rules) > MAX_LEAVES:
        raise CompileError(f"tree has {len(rules)} leaves; a single stage holds {MAX_LEAVES}")
    return rules


def compile_model(model: "DeviceFingerprintModel", ip_size: int = DEFAULT_IP_SIZE) -> CompiledTableSet:
    if model.qtree is None:
        raise CompileError("model has no quantized tree")
    if model.qtree.n_features != len(model.key_packets):
        raise CompileError("tree dimension does not match the key packet count")
    prob_rows, _ = compile_probability_table(model.matrix, model.key_packets)
    return CompiledTableSet(
        device_id=model.device_id,
        key_packets=tuple(model.key_packets),
        t_w_us=model.t_w_us,
        direction_rules=(DirectionRule(0, 0), DirectionRule(1, MTU)),
        prob_rows=prob_rows,
        inference_rules=tuple(tree_to_rules(model.qtree)),
        register_spec=RegisterSpec(REG_WIDTH, len(model.key_packets), ip_size),
    )


compile = compile_model  # noqa: A001  - mirrors the operation name


# -- rule file ------------------------------------------------------------

_ID_RE = re.compile(r"^[A-Za-z0-9_.:@+-]+$")


def export_rules(tables: CompiledTableSet) -> str:
    if not _ID_RE.match(tables.device_id):
        raise CompileError(f"device id {tables.device_id!r} must not contain spaces or '='")
    n = tables.n_dims
    spec = tables.register_spec
    lines = [f"# compiled match-action tables v{RULES_VERSION}",
             f"meta device_id={tables.device_id} dims={n} t_w_us={tables.t_w_us} "
             f"ip_slots={spec.ip_slots} reg_width={spec.width} "
             f"keys={','.join(map(str, tables.key_packets)) or '-'}"]
    for i, d in enumerate(tables.direction_rules):
        lines.append(f"table=directional_packet_size priority={i} "
                     f"match=direction:{d.direction}..{d.direction} action=set_dir_size({d.offset})")
    for p, row in tables.prob_rows.items():
        lines.append(f"table=packet_size_to_prob priority=0 match=dir_size:{p}..{p} "
                     f"action=set_meta_prob({','.join(map(str, row))})")
    lines.append(f"table=packet_size_to_prob priority=default match=* "
                 f"action=set_meta_prob({','.join(['0'] * n)})")
    lines.append(f"table=stateful_update priority=0 match=* "
                 f"action=update_registers({spec.width},{n},{spec.ip_slots})")
    for r in tables.inference_rules:
        fields = [f"timeout:{r.timeout_match}..{r.timeout_match}"]
        fields += [f"v_{j}:{lo}..{hi}" for j, (lo, hi) in enumerate(r.ranges)]
        lines.append(f"table=inference priority={r.priority} match={','.join(fields)} "
                     f"action=set_label({r.label})")
    return "\n".join(lines) + "\n"


def _parse_tokens(line: str) -> dict[str, str]:
    out = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise CompileError(f"malformed token {tok!r}")
        out[key] = val
    return out


def _parse_action(text: str) -> tuple[str, list[int]]:
    m = re.fullmatch(r"([A-Za-z_]+)\(([-0-9,]*)\)", text)
    if not m:
        raise CompileError(f"malformed action {text!r}")
    args = [int(a) for a in m.group(2).split(",") if a != ""]
    return m.group(1), args


def _parse_match(text: str) -> dict[str, tuple[int, int]]:
    if text == "*":
        return {}
    out = {}
    for part in text.split(","):
        name, _, rng = part.partition(":")
        lo, sep, hi = rng.partition("..")
        if not sep:
            raise CompileError(f"malformed match field {part!r}")
        out[name] = (int(lo), int(hi))
    return out


def import_rules(text: str) -> CompiledTableSet:
    meta = None
    directions: list[DirectionRule] = []
    prob_rows: dict[int, tuple[int, ...]] = {}
    rules: list[InferenceRule] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("meta "):
                meta = _parse_tokens(line[5:])
                continue
            tok = _parse_tokens(line)
            table = tok["table"]
            action, args = _parse_action(tok["action"])
            match = _parse_match(tok["match"])
            if table == "directional_packet_size":
                lo, hi = match["direction"]
                directions.append(DirectionRule(lo, args[0]))
            elif table == "packet_size_to_prob":
                if tok["priority"] != "default":
                    lo, hi = match["dir_size"]
                    if lo != hi:
                        raise CompileError("probability table is exact-match")
                    prob_rows[lo] = tuple(args)
            elif table == "stateful_update":
                pass
            elif table == "inference":
                timeout = match.pop("timeout")
                dims = sorted(match, key=lambda f: int(f.split("_")[1]))
                rules.append(InferenceRule(int(tok["priority"]),
                                           tuple(match[f] for f in dims), args[0], timeout[0]))
            else:
                raise CompileError(f"unknown table {table!r}")
        except (KeyError, IndexError, ValueError) as exc:
            raise CompileError(f"rule line {lineno}: {exc}") from exc
    if meta is None:
        raise CompileError("rule file has no meta line")
    n = int(meta["dims"])
    if any(len(r) != n for r in prob_rows.values()) or any(len(r.ranges) != n for r in rules):
        raise CompileError("rule dimensions disagree with the meta line")
    keys = () if meta["keys"] == "-" else tuple(int(k) for k in meta["keys"].split(","))
    return CompiledTableSet(
        device_id=meta["device_id"], key_packets=keys, t_w_us=int(meta["t_w_us"]),
        direction_rules=tuple(directions), prob_rows=dict(sorted(prob_rows.items())),
        inference_rules=tuple(sorted(rules, key=lambda r: r.priority)),
        register_spec=RegisterSpec(int(meta["reg_width"]), n, int(meta["ip_slots"])))


def write_rules(tables: CompiledTableSet, path: str | Path) -> None:
    Path(path).write_text(export_rules(tables), encoding="utf-8")


def read_rules(path: str | Path) -> CompiledTableSet:
    return import_rules(Path(path).read_text(encoding="utf-8"))
