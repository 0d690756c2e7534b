"""Key-packet extraction: packet sizes that recur in periodic bursts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .neighbors import EmptyModelError
from .trace import Direction, PacketRecord, Trace

DestTuple = tuple[int, int, int]  # (server ip, server port, proto number)

DEFAULT_N_KEYS = 16


@dataclass(frozen=True)
class ExtractionConfig:
    t_b_us: int = 1_000_000
    eta: float = 0.2
    min_bursts: int = 5

    def __post_init__(self):
        if self.t_b_us <= 0 or not 0 < self.eta < 1:
            raise ValueError(f"invalid extraction config {self}")


@dataclass(frozen=True)
class Burst:
    ts: int
    pkts: tuple[int, ...]


@dataclass(frozen=True)
class KeyPacket:
    size: int
    period_us: float
    cv: float
    dest_tuple: DestTuple

    def to_dict(self) -> dict:
        return {"size": self.size, "period_us": self.period_us, "cv": self.cv,
                "dest_tuple": list(self.dest_tuple)}

    @classmethod
    def from_dict(cls, doc: dict) -> "KeyPacket":
        return cls(int(doc["size"]), float(doc["period_us"]), float(doc["cv"]),
                   tuple(int(x) for x in doc["dest_tuple"]))


class KeyPacketSet(tuple):
    """Key packets ordered by size, one entry per size."""

    def sizes(self) -> list[int]:
        return [e.size for e in self]


class TopKeys(NamedTuple):
    sizes: list[int]
    shortfall: bool


def server_tuple(r: PacketRecord) -> DestTuple:
    """Remote endpoint of a packet, identical for both directions of a dialogue."""
    if r.direction == Direction.WAN_TO_LAN:
        return (r.src_ip, r.src_port, int(r.proto))
    return (r.dst_ip, r.dst_port, int(r.proto))


def split_by_destination(trace: Trace) -> dict[DestTuple, Trace]:
    groups: dict[DestTuple, list[PacketRecord]] = {}
    for r in trace:
        groups.setdefault(server_tuple(r), []).append(r)
    return {key: Trace(groups[key], trace.epoch_us) for key in sorted(groups)}


def extract_bursts(sub: Trace, t_b_us: int) -> list[Burst]:
    """Cut a time-ordered trace wherever the inter-packet gap exceeds ``t_b_us``."""
    if t_b_us <= 0:
        raise ValueError("t_b_us must be positive")
    bursts: list[Burst] = []
    start = None
    pkts: list[int] = []
    prev = None
    for r in sub:
        if prev is None or r.timestamp_us - prev > t_b_us:
            if prev is not None:
                bursts.append(Burst(start, tuple(pkts)))
            start, pkts = r.timestamp_us, []
        pkts.append(r.dir_size)
        prev = r.timestamp_us
    if prev is not None:
        bursts.append(Burst(start, tuple(pkts)))
    return bursts


def burst_periodicity(bursts: list[Burst]) -> tuple[float, float] | None:
    """(mean start-to-start interval, population coefficient of variation)."""
    if len(bursts) < 2:
        return None
    intervals = np.diff([b.ts for b in bursts]).astype(np.float64)
    mean = intervals.mean()
    return float(mean), float(intervals.std() / mean)


def extract_key_packets(device: Trace, cfg: ExtractionConfig = ExtractionConfig()) -> KeyPacketSet:
    best: dict[int, KeyPacket] = {}
    for dest, sub in split_by_destination(device).items():
        bursts = extract_bursts(sub, cfg.t_b_us)
        stats = burst_periodicity(bursts)
        if stats is None:
            continue
        period, cv = stats
        if not (cv < cfg.eta and len(bursts) > cfg.min_bursts):
            continue
        for size in {p for b in bursts for p in b.pkts}:
            cur = best.get(size)
            # groups arrive in sorted order, so strict < keeps the first tuple on ties
            if cur is None or period < cur.period_us:
                best[size] = KeyPacket(size, period, cv, dest)
    return KeyPacketSet(best[s] for s in sorted(best))


def select_top_n(keys: KeyPacketSet, n: int = DEFAULT_N_KEYS) -> TopKeys:
    """Shortest-period key packets first, ties by size."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not keys:
        raise EmptyModelError("no key packets")
    ranked = sorted(keys, key=lambda e: (e.period_us, e.size))
    return TopKeys([e.size for e in ranked[:n]], len(ranked) < n)
