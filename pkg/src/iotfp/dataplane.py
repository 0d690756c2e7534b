"""Software model of the switch pipeline executing compiled tables.

Per packet: direction table -> timeout check -> probability table ->
stateful register update. When a host's window has timed out, the arriving
packet first carries the register snapshot through the inference table and
resets the slot; its own probabilities then open the next window.

Everything on the per-packet path is integer arithmetic: 32-bit registers,
32-bit microsecond timestamps compared by modular subtraction, and 8-bit
probabilities.
"""

from __future__ import annotations

import csv
import time
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .compiler import CompiledTableSet
from .trace import PacketRecord, Trace

TS_MASK = 0xFFFFFFFF


@dataclass(frozen=True)
class Detection:
    device_id: str
    ip_key: int
    window_start_us: int
    label: int
    v: tuple[int, ...]


DETECTION_HEADER_PREFIX = ("device_id", "ip_key", "window_start_us", "label")


@dataclass
class SimStats:
    packets: int = 0
    hits: int = 0
    misses: int = 0
    collisions: int = 0
    windows: int = 0
    positives: int = 0
    seconds: float = 0.0

    @property
    def throughput_pps(self) -> float:
        return self.packets / self.seconds if self.seconds > 0 else 0.0

    def summary(self) -> str:
        return (f"packets={self.packets} prob_hits={self.hits} prob_misses={self.misses} "
                f"collisions={self.collisions} windows={self.windows} "
                f"positive_windows={self.positives} seconds={self.seconds:.3f} "
                f"throughput_pps={self.throughput_pps:.0f}")


def host_slot(addr: int, ip_slots: int) -> int:
    """16-bit CRC-style hash of an IPv4 address onto the register index space."""
    return zlib.crc32(addr.to_bytes(4, "big")) % ip_slots


class RegisterBank:
    """``ip_slots`` x N 32-bit accumulators plus per-slot window start times."""

    def __init__(self, ip_slots: int, dims: int, width: int = 32):
        self.ip_slots = ip_slots
        self.dims = dims
        self.mask = (1 << width) - 1
        self.cells: list[list[int]] = [[0] * dims for _ in range(ip_slots)]
        self.window_start: list[int | None] = [None] * ip_slots
        # reporting-only shadows: who opened the window and its full-width start time
        self.owner: list[int | None] = [None] * ip_slots
        self.start_us: list[int] = [0] * ip_slots
        self.trace_log: dict[int, list[int]] | None = None

    @classmethod
    def for_tables(cls, tables: CompiledTableSet) -> "RegisterBank":
        spec = tables.register_spec
        return cls(spec.ip_slots, spec.dims, spec.width)

    def active_slots(self) -> list[int]:
        return [s for s, st in enumerate(self.window_start) if st is not None]


class DebugMismatch(AssertionError):
    pass


class Pipeline:
    """One device's logical pipeline: compiled tables plus its register bank."""

    def __init__(self, tables: CompiledTableSet, bank: RegisterBank | None = None,
                 debug: bool = False, trigger_in_closing_window: bool = False):
        self.tables = tables
        self.bank = bank if bank is not None else RegisterBank.for_tables(tables)
        if (self.bank.ip_slots, self.bank.dims) != (tables.register_spec.ip_slots, tables.n_dims):
            raise ValueError("register bank does not match the table register spec")
        self.stats = SimStats()
        self.debug = debug
        self.trigger_in_closing_window = trigger_in_closing_window
        self._offset = {d.direction: d.offset for d in tables.direction_rules}
        self._rows = tables.prob_rows
        self._t_w = tables.t_w_us
        self._slot_cache: dict[int, int] = {}
        if debug:
            self.bank.trace_log = {}

    def _slot(self, host: int) -> int:
        slot = self._slot_cache.get(host)
        if slot is None:
            slot = self._slot_cache[host] = host_slot(host, self.bank.ip_slots)
        return slot

    def _close(self, slot: int) -> Detection:
        bank = self.bank
        v = tuple(bank.cells[slot])
        label = self.tables.lookup_inference(v)
        if bank.trace_log is not None:
            self._check_window(slot, v)
        det = Detection(self.tables.device_id, bank.owner[slot], bank.start_us[slot], label, v)
        bank.cells[slot] = [0] * bank.dims
        bank.window_start[slot] = None
        self.stats.windows += 1
        self.stats.positives += label
        return det

    def _check_window(self, slot: int, v: tuple[int, ...]) -> None:
        expect = [0] * self.bank.dims
        for p in self.bank.trace_log.pop(slot, []):
            row = self._rows.get(p)
            if row is not None:
                expect = [(a + b) & self.bank.mask for a, b in zip(expect, row)]
        if tuple(expect) != v:
            raise DebugMismatch(f"slot {slot}: registers {v} != replayed sum {tuple(expect)}")

    def process_packet(self, rec: PacketRecord) -> Detection | None:
        bank = self.bank
        self.stats.packets += 1
        # direction table
        dir_size = rec.ip_total_len + self._offset[rec.direction]
        host = rec.dst_ip if rec.direction else rec.src_ip
        slot = self._slot(host)
        tstamp = rec.timestamp_us & TS_MASK
        row = self._rows.get(dir_size)
        det = None
        start = bank.window_start[slot]
        if start is not None and bank.owner[slot] != host:
            self.stats.collisions += 1
        timeout = start is not None and ((tstamp - start) & TS_MASK) >= self._t_w
        if timeout and self.trigger_in_closing_window:
            self._accumulate(slot, row, dir_size)
            det = self._close(slot)
            bank.window_start[slot] = tstamp
            bank.owner[slot] = host
            bank.start_us[slot] = rec.timestamp_us
            return det
        if timeout:
            det = self._close(slot)
            start = None
        if start is None:
            bank.window_start[slot] = tstamp
            bank.owner[slot] = host
            bank.start_us[slot] = rec.timestamp_us
        self._accumulate(slot, row, dir_size)
        return det

    def _accumulate(self, slot: int, row: tuple[int, ...] | None, dir_size: int) -> None:
        bank = self.bank
        if bank.trace_log is not None:
            bank.trace_log.setdefault(slot, []).append(dir_size)
        if row is None:
            self.stats.misses += 1
            return
        self.stats.hits += 1
        mask = bank.mask
        bank.cells[slot] = [(a + b) & mask for a, b in zip(bank.cells[slot], row)]

    def flush(self, now_us: int) -> list[Detection]:
        """Close every window that has been open for at least ``t_w``."""
        now = now_us & TS_MASK
        out = []
        for slot in self.bank.active_slots():
            if ((now - self.bank.window_start[slot]) & TS_MASK) >= self._t_w:
                out.append(self._close(slot))
        return out

    def run(self, records: Iterable[PacketRecord]) -> list[Detection]:
        out = []
        for rec in records:
            det = self.process_packet(rec)
            if det is not None:
                out.append(det)
        return out


def process_packet(record: PacketRecord, tables: CompiledTableSet,
                   bank: RegisterBank) -> Detection | None:
    """Run one packet through a fresh pipeline view over ``bank``."""
    return Pipeline(tables, bank).process_packet(record)


def flush(bank: RegisterBank, tables: CompiledTableSet, now_us: int) -> list[Detection]:
    return Pipeline(tables, bank).flush(now_us)


@dataclass
class RunResult:
    detections: dict[str, list[Detection]] = field(default_factory=dict)
    stats: dict[str, SimStats] = field(default_factory=dict)

    def all_detections(self) -> list[Detection]:
        return [d for dev in sorted(self.detections) for d in self.detections[dev]]


def run_trace(trace: Trace, table_sets: Sequence[CompiledTableSet], debug: bool = False,
              flush_at_end: bool = True, trigger_in_closing_window: bool = False) -> RunResult:
    """Feed a trace through every device's pipeline; each owns its registers.

    With ``flush_at_end`` the windows still open after the last packet are
    closed as if a timer had fired one window length later.
    """
    result = RunResult()
    for tables in table_sets:
        if tables.device_id in result.detections:
            raise ValueError(f"duplicate table set for {tables.device_id}")
        pipe = Pipeline(tables, debug=debug, trigger_in_closing_window=trigger_in_closing_window)
        t0 = time.perf_counter()
        dets = pipe.run(trace.records)
        if flush_at_end and len(trace):
            dets.extend(pipe.flush(trace[-1].timestamp_us + tables.t_w_us))
        pipe.stats.seconds = time.perf_counter() - t0
        dets.sort(key=lambda d: (d.window_start_us, d.ip_key))
        result.detections[tables.device_id] = dets
        result.stats[tables.device_id] = pipe.stats
    return result


def write_detections(path, detections: Sequence[Detection]) -> None:
    n = max((len(d.v) for d in detections), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(DETECTION_HEADER_PREFIX) + [f"v_{j}" for j in range(n)])
        for d in detections:
            w.writerow([d.device_id, d.ip_key, d.window_start_us, d.label, *d.v])


def read_detections(path) -> list[Detection]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header[:4]) != DETECTION_HEADER_PREFIX:
            raise ValueError(f"{path}: not a detection file")
        for row in r:
            if row:
                out.append(Detection(row[0], int(row[1]), int(row[2]), int(row[3]),
                                     tuple(int(x) for x in row[4:] if x != "")))
    return out
