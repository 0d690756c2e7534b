"""Testbed emulation: synthetic devices and background, NAT/VPN trace mixing,
ground-truth labelling, 4:3:3 splitting and window-level metrics."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import assign_windows
from .keypackets import DestTuple
from .trace import (MIN_IP_LEN, MTU, Direction, PacketRecord, Proto, Trace,
                    decode_directional, ip_to_int)


class MixMode(str, Enum):
    NAT = "nat"
    VPN = "vpn"


DEFAULT_NAT_IP = ip_to_int("203.0.113.7")
DEFAULT_VPN_TUPLE = (ip_to_int("198.51.100.2"), ip_to_int("192.0.2.10"), 41194, 1194, Proto.UDP)
DEFAULT_VPN_OVERHEAD = 49


@dataclass(frozen=True)
class MixConfig:
    mode: MixMode = MixMode.NAT
    nat_ip: int = DEFAULT_NAT_IP
    vpn_overhead_bytes: int = DEFAULT_VPN_OVERHEAD
    vpn_tuple: tuple = DEFAULT_VPN_TUPLE
    rng_seed: int = 0

    def __post_init__(self):
        if self.vpn_overhead_bytes < 0:
            raise ValueError("vpn_overhead_bytes must be >= 0")
        object.__setattr__(self, "mode", MixMode(self.mode))

    def rewrite_len(self, size: int) -> int:
        if self.mode == MixMode.VPN:
            return min(size + self.vpn_overhead_bytes, MTU)
        return size

    def rewrite_dir_size(self, p: int) -> int:
        size, direction = decode_directional(p)
        size = self.rewrite_len(size)
        return size + MTU if direction else size


class _NatTable:
    """Deterministic per-flow source-port translation (first come, first served)."""

    def __init__(self, first_port: int = 1024):
        self.first = first_port
        self.ports: dict[tuple, int] = {}

    def port(self, flow: tuple) -> int:
        p = self.ports.get(flow)
        if p is None:
            span = 0x10000 - self.first
            p = self.ports[flow] = self.first + len(self.ports) % span
        return p


def _shift(trace: Trace, offset: int) -> Trace:
    if offset == 0:
        return trace
    return Trace((r.replace(timestamp_us=r.timestamp_us + offset) for r in trace), trace.epoch_us)


def _align(trace: Trace, background: Trace) -> Trace:
    """Move ``trace`` onto the background's time base when the two do not overlap."""
    if not len(trace) or not len(background):
        return trace
    b0, b1 = background[0].timestamp_us, background[-1].timestamp_us
    t0, t1 = trace[0].timestamp_us, trace[-1].timestamp_us
    if t1 < b0 or t0 > b1:
        return _shift(trace, b0 - t0)
    return trace


def _rewrite(r: PacketRecord, cfg: MixConfig, nat: _NatTable) -> PacketRecord:
    if cfg.mode == MixMode.NAT:
        if r.direction == Direction.LAN_TO_WAN:
            flow = (r.src_ip, r.src_port, int(r.proto), r.dst_ip, r.dst_port)
            return r.replace(src_ip=cfg.nat_ip, src_port=nat.port(flow))
        flow = (r.dst_ip, r.dst_port, int(r.proto), r.src_ip, r.src_port)
        return r.replace(dst_ip=cfg.nat_ip, dst_port=nat.port(flow))
    c_ip, s_ip, c_port, s_port, proto = cfg.vpn_tuple
    size = cfg.rewrite_len(r.ip_total_len)
    if r.direction == Direction.LAN_TO_WAN:
        return r.replace(src_ip=c_ip, dst_ip=s_ip, src_port=c_port, dst_port=s_port,
                         proto=Proto(proto), ip_total_len=size)
    return r.replace(src_ip=s_ip, dst_ip=c_ip, src_port=s_port, dst_port=c_port,
                     proto=Proto(proto), ip_total_len=size)


def mix_traces(iot: Sequence[Trace], background: Trace, cfg: MixConfig = MixConfig()) -> Trace:
    """Replay IoT and background traffic together through one NAT or VPN gateway.

    Every packet of the link is rewritten. Device labels ride along on the
    records so ground truth survives the rewrite.
    """
    inputs = [_align(t, background) for t in iot] + [background]
    merged = heapq.merge(*(t.records for t in inputs), key=lambda r: r.timestamp_us)
    nat = _NatTable()
    return Trace((_rewrite(r, cfg, nat) for r in merged), background.epoch_us)


@dataclass(frozen=True)
class BurstSchedule:
    """Burst of directional ``sizes`` every ``period_us`` (+/- ``jitter`` * period)."""

    sizes: tuple[int, ...]
    period_us: int
    jitter: float = 0.01
    server: DestTuple | None = None

    def __post_init__(self):
        if self.period_us <= 0:
            raise ValueError("burst period must be positive")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must be in [0, 0.5)")


def _random_public_ip(rng: np.random.Generator) -> int:
    # 1.0.0.0 - 99.255.255.255 avoids every private, shared and test range
    return int(rng.integers(0x01000000, 0x64000000))


def generate_synthetic_device(schedules: Sequence[BurstSchedule], duration_us: int,
                              rng: np.random.Generator, device_id: str = "device",
                              lan_ip: int = ip_to_int("192.168.1.50"),
                              intra_gap_us: tuple[int, int] = (1_000, 20_000)) -> Trace:
    """Periodic bursts of fixed packet sizes, one server per schedule."""
    records: list[PacketRecord] = []
    for sched in schedules:
        if sched.server is None:
            server = (_random_public_ip(rng), int(rng.choice([443, 8883, 80, 5222])), int(Proto.TCP))
        else:
            server = sched.server
        s_ip, s_port, proto = server
        c_port = int(rng.integers(32768, 61000))
        phase = rng.uniform(0, sched.period_us)
        i = 0
        while True:
            start = phase + i * sched.period_us
            start += rng.uniform(-sched.jitter, sched.jitter) * sched.period_us
            i += 1
            if start >= duration_us:
                break
            t = max(0, int(start))
            for p in sched.sizes:
                size, direction = decode_directional(p)
                if direction == Direction.LAN_TO_WAN:
                    rec = PacketRecord(t, lan_ip, s_ip, c_port, s_port, Proto(proto), size,
                                       direction, device_id)
                else:
                    rec = PacketRecord(t, s_ip, lan_ip, s_port, c_port, Proto(proto), size,
                                       direction, device_id)
                records.append(rec)
                t += int(rng.integers(intra_gap_us[0], intra_gap_us[1] + 1))
    records = [r for r in records if r.timestamp_us < duration_us]
    return Trace.from_unsorted(records)


# (weight, lo, hi) components over IP total length: small packets, mid, MTU-sized
DEFAULT_SIZE_MIX = ((0.45, 40, 100), (0.30, 101, 1399), (0.25, 1400, 1500))


def generate_synthetic_background(rate_pps: float, duration_us: int, rng: np.random.Generator,
                                  size_mix: Sequence[tuple[float, int, int]] = DEFAULT_SIZE_MIX,
                                  n_hosts: int = 200, n_servers: int = 2000,
                                  lan_net: int = ip_to_int("10.20.0.0")) -> Trace:
    """Poisson background traffic with a bimodal small/MTU size profile."""
    if rate_pps <= 0:
        raise ValueError("rate must be positive")
    n = int(rng.poisson(rate_pps * duration_us / 1e6)) if duration_us > 0 else 0
    if n == 0:
        return Trace()
    ts = np.sort(rng.integers(0, duration_us, size=n))
    weights = np.array([w for w, _, _ in size_mix], dtype=np.float64)
    comp = rng.choice(len(size_mix), size=n, p=weights / weights.sum())
    lo = np.array([c[1] for c in size_mix])[comp]
    hi = np.array([c[2] for c in size_mix])[comp]
    sizes = np.clip(rng.integers(lo, hi + 1), MIN_IP_LEN, MTU)
    direction = rng.integers(0, 2, size=n)
    host_pool = lan_net + 1 + rng.choice(0xFFFE, size=n_hosts, replace=False)
    server_pool = np.array([_random_public_ip(rng) for _ in range(n_servers)])
    hosts = host_pool[rng.integers(0, n_hosts, size=n)]
    servers = server_pool[rng.integers(0, n_servers, size=n)]
    h_port = rng.integers(32768, 61000, size=n)
    s_port = rng.choice([443, 80, 8080, 993, 25, 123, 3478], size=n)
    is_tcp = rng.random(n) < 0.8
    records = []
    for i in range(n):
        proto = Proto.TCP if is_tcp[i] else Proto.UDP
        if direction[i] == 0:
            records.append(PacketRecord(int(ts[i]), int(hosts[i]), int(servers[i]),
                                        int(h_port[i]), int(s_port[i]), proto, int(sizes[i]),
                                        Direction.LAN_TO_WAN))
        else:
            records.append(PacketRecord(int(ts[i]), int(servers[i]), int(hosts[i]),
                                        int(s_port[i]), int(h_port[i]), proto, int(sizes[i]),
                                        Direction.WAN_TO_LAN))
    return Trace(records)


# Five devices whose burst vocabularies overlap but are not identical.
# Sizes are directional; periods are in seconds.
DEMO_DEVICES: dict[str, tuple[tuple[tuple[int, ...], int], ...]] = {
    "plug-a": (((174, 1674), 10), ((211, 1711, 160), 20), ((543, 1643, 431, 1899), 60)),
    "cam-b": (((167, 1651, 266), 10), ((321, 245, 1645), 30), ((251, 1893, 1623), 60)),
    "bulb-c": (((309, 1809), 15), ((174, 1388, 2150), 20), ((611, 1990, 702), 45)),
    "spk-d": (((405, 1905, 330), 12), ((1211, 2400), 25), ((267, 1767, 1623), 50)),
    "hub-e": (((512, 2012), 8), ((333, 1833, 444), 30), ((211, 2222, 873), 60)),
}


def synthetic_scenario(rng: np.random.Generator, duration_us: int, base_rate: float = 100.0,
                       devices: Mapping[str, Sequence[tuple[Sequence[int], int]]] = DEMO_DEVICES,
                       jitter: float = 0.01, n_hosts: int = 200,
                       ) -> tuple[dict[str, Trace], Trace]:
    """Device traces plus background sent ``base_rate`` times faster than all devices together."""
    traces = {}
    for i, (dev, scheds) in enumerate(devices.items()):
        bursts = [BurstSchedule(tuple(sizes), int(period * 1_000_000), jitter)
                  for sizes, period in scheds]
        traces[dev] = generate_synthetic_device(bursts, duration_us, rng, dev,
                                                lan_ip=ip_to_int(f"192.168.1.{10 + i}"))
    n_iot = sum(len(t) for t in traces.values())
    rate = base_rate * max(n_iot, 1) / (duration_us / 1e6)
    background = generate_synthetic_background(rate, duration_us, rng, n_hosts=n_hosts)
    return traces, background


def split_indices(n: int, ratio: Sequence[int] = (4, 3, 3), seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut by ``ratio``; rounding leftovers go to the first parts."""
    if n < 1:
        raise ValueError("nothing to split")
    total = sum(ratio)
    counts = [n * r // total for r in ratio]
    for i in range(n - sum(counts)):
        counts[i % len(counts)] += 1
    perm = np.random.default_rng(seed).permutation(n)
    edges = np.cumsum([0] + counts)
    return [np.sort(perm[a:b]) for a, b in zip(edges[:-1], edges[1:])]


def split_windows(samples: Sequence, ratio: Sequence[int] = (4, 3, 3), seed: int = 0):
    parts = split_indices(len(samples), ratio, seed)
    return tuple([samples[i] for i in part] for part in parts)


def label_by_matching(before: Trace, after: Trace, vpn: bool = False,
                      tol_us: int = 20_000, max_overhead: int = 200) -> list[str | None]:
    """Recover labels of middlebox output from a capture taken before it.

    A packet after the middlebox takes the label of the nearest-in-time
    unused packet before it with the same direction, less than ``tol_us``
    apart, and (VPN) a strictly smaller size within ``max_overhead`` bytes or
    (otherwise) the same size.
    """
    b_ts = before.timestamps
    used = np.zeros(len(before), dtype=bool)
    out: list[str | None] = []
    lo = 0
    for r in after:
        while lo < len(before) and b_ts[lo] <= r.timestamp_us - tol_us:
            lo += 1
        best, best_dt = -1, None
        i = lo
        while i < len(before) and b_ts[i] < r.timestamp_us + tol_us:
            b = before[i]
            if not used[i] and b.direction == r.direction:
                if vpn:
                    ok = 0 < r.ip_total_len - b.ip_total_len <= max_overhead or (
                        r.ip_total_len == MTU and b.ip_total_len <= MTU)
                else:
                    ok = r.ip_total_len == b.ip_total_len
                dt = abs(int(b_ts[i]) - r.timestamp_us)
                if ok and (best_dt is None or dt < best_dt):
                    best, best_dt = i, dt
            i += 1
        if best >= 0:
            used[best] = True
            out.append(before[best].label)
        else:
            out.append(None)
    return out


def ground_truth_windows(trace: Trace, t_w_us: int) -> dict[tuple[int, int], frozenset[str]]:
    """Devices present in each window, keyed by (ip_key, window_start_us)."""
    idx = assign_windows(trace.timestamps, trace.hosts, t_w_us)
    present: list[set[str]] = [set() for _ in range(len(idx))]
    for w, r in zip(idx.packet_window.tolist(), trace):
        if r.label is not None:
            present[w].add(r.label)
    return {k: frozenset(s) for k, s in zip(idx.keys(), present)}


@dataclass
class EvalReport:
    device_id: str
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    unmatched: int = 0

    @property
    def windows(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def fpr(self) -> float | None:
        d = self.fp + self.tn
        return self.fp / d if d else None

    @property
    def base_rate(self) -> float | None:
        return (self.tp + self.fn) / self.windows if self.windows else None

    CSV_FIELDS = ("device_id", "windows", "tp", "fp", "tn", "fn", "precision", "recall",
                  "fpr", "base_rate")

    def to_row(self) -> dict:
        def fmt(x):
            return "undefined" if x is None else f"{x:.6f}"
        return {"device_id": self.device_id, "windows": self.windows, "tp": self.tp,
                "fp": self.fp, "tn": self.tn, "fn": self.fn, "precision": fmt(self.precision),
                "recall": fmt(self.recall), "fpr": fmt(self.fpr),
                "base_rate": fmt(self.base_rate)}

    def summary(self) -> str:
        row = self.to_row()
        return " ".join(f"{k}={row[k]}" for k in self.CSV_FIELDS)


class EvaluationError(ValueError):
    pass


def confusion(y_true: Iterable[int], y_pred: Iterable[int], device_id: str = "") -> EvalReport:
    rep = EvalReport(device_id)
    for t, p in zip(y_true, y_pred):
        if t and p:
            rep.tp += 1
        elif p:
            rep.fp += 1
        elif t:
            rep.fn += 1
        else:
            rep.tn += 1
    return rep


def evaluate(detections: Iterable, truth: Mapping[tuple[int, int], frozenset[str]],
             devices: Sequence[str] | None = None,
             restrict: set[tuple[int, int]] | None = None) -> dict[str, EvalReport]:
    """Window-level precision/recall/FPR per device.

    ``detections`` carry ``device_id``, ``ip_key``, ``window_start_us`` and
    ``label``. Only windows present in both inputs (and in ``restrict`` when
    given) are scored.
    """
    reports: dict[str, EvalReport] = {}
    for det in detections:
        key = (det.ip_key, det.window_start_us)
        rep = reports.get(det.device_id)
        if rep is None:
            rep = reports[det.device_id] = EvalReport(det.device_id)
        if restrict is not None and key not in restrict:
            continue
        present = truth.get(key)
        if present is None:
            rep.unmatched += 1
            continue
        actual = det.device_id in present
        if actual and det.label:
            rep.tp += 1
        elif det.label:
            rep.fp += 1
        elif actual:
            rep.fn += 1
        else:
            rep.tn += 1
    for dev in devices or ():
        reports.setdefault(dev, EvalReport(dev))
    if not reports or all(r.windows == 0 for r in reports.values()):
        raise EvaluationError("no detection window lines up with a ground-truth window")
    return dict(sorted(reports.items()))
