"""Packet-trace representation, CSV ingestion and the ISP-visibility filter.

Addresses are stored as 32-bit integers and timestamps as integer
microseconds so that windowing never accumulates float drift.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

MTU = 1500
MIN_IP_LEN = 20
K = 2 * MTU  # number of directional packet sizes

CSV_HEADER = ["timestamp_us", "src_ip", "dst_ip", "src_port", "dst_port",
              "proto", "ip_total_len", "direction", "label"]

DEFAULT_LAN_PREFIXES = ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")
_PRIVATE_PREFIXES = DEFAULT_LAN_PREFIXES + ("127.0.0.0/8", "169.254.0.0/16",
                                            "100.64.0.0/10")


class TraceError(ValueError):
    """Raised for malformed trace input."""


class Direction(IntEnum):
    LAN_TO_WAN = 0
    WAN_TO_LAN = 1


class Proto(IntEnum):
    TCP = 6
    UDP = 17
    OTHER = 0

    @classmethod
    def from_number(cls, num: int) -> "Proto":
        if num == 6:
            return cls.TCP
        if num == 17:
            return cls.UDP
        return cls.OTHER


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One observed IPv4 packet.

    ``direction`` is relative to the monitored LAN: 0 means the packet left
    the LAN, 1 means it entered it.
    """

    timestamp_us: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: Proto
    ip_total_len: int
    direction: Direction
    label: str | None = None

    def __post_init__(self):
        if not MIN_IP_LEN <= self.ip_total_len <= MTU:
            raise TraceError(f"ip_total_len {self.ip_total_len} outside "
                             f"[{MIN_IP_LEN}, {MTU}]")

    @property
    def dir_size(self) -> int:
        return self.ip_total_len + MTU if self.direction else self.ip_total_len

    @property
    def host(self) -> int:
        """Address of the LAN-side endpoint."""
        return self.dst_ip if self.direction else self.src_ip

    def replace(self, **changes) -> "PacketRecord":
        fields = {name: getattr(self, name) for name in self.__slots__}
        fields.update(changes)
        return PacketRecord(**fields)


def encode_directional(size: int, direction: int) -> int:
    """Fold direction into the packet size: ``size`` outbound, ``size + 1500`` inbound."""
    if not MIN_IP_LEN <= size <= MTU:
        raise TraceError(f"packet size {size} outside [{MIN_IP_LEN}, {MTU}]")
    if direction not in (0, 1):
        raise TraceError(f"direction must be 0 or 1, got {direction!r}")
    return size + MTU if direction else size


def decode_directional(value: int) -> tuple[int, Direction]:
    if not MIN_IP_LEN <= value <= K or MTU < value < MTU + MIN_IP_LEN:
        raise TraceError(f"{value} is not a directional packet size")
    if value > MTU:
        return value - MTU, Direction.WAN_TO_LAN
    return value, Direction.LAN_TO_WAN


def ip_to_int(addr: str) -> int:
    return int(ipaddress.IPv4Address(addr))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


class PrefixSet:
    """Longest-prefix-free membership test over a handful of IPv4 CIDRs."""

    def __init__(self, prefixes: Iterable[str]):
        nets = [ipaddress.IPv4Network(p, strict=False) for p in prefixes]
        if not nets:
            raise TraceError("at least one LAN prefix is required")
        self.prefixes = tuple(str(n) for n in nets)
        self._pairs = tuple((int(n.netmask), int(n.network_address)) for n in nets)

    def __contains__(self, addr: int) -> bool:
        for mask, net in self._pairs:
            if addr & mask == net:
                return True
        return False

    def mask_array(self, addrs: np.ndarray) -> np.ndarray:
        out = np.zeros(addrs.shape, dtype=bool)
        for mask, net in self._pairs:
            out |= (addrs & mask) == net
        return out


_PRIVATE = PrefixSet(_PRIVATE_PREFIXES)


class Trace:
    """Immutable, timestamp-ordered sequence of :class:`PacketRecord`."""

    def __init__(self, records: Iterable[PacketRecord] = (), epoch_us: int = 0,
                 *, reordered: int = 0, skipped: int = 0):
        recs = tuple(records)
        for prev, cur in zip(recs, recs[1:]):
            if cur.timestamp_us < prev.timestamp_us:
                raise TraceError("trace records must be ordered by timestamp")
        self.records = recs
        self.epoch_us = epoch_us
        # ingestion diagnostics
        self.reordered = reordered
        self.skipped = skipped

    @classmethod
    def from_unsorted(cls, records: Iterable[PacketRecord], epoch_us: int = 0) -> "Trace":
        return cls(sorted(records, key=lambda r: r.timestamp_us), epoch_us)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PacketRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return self.records == other.records and self.epoch_us == other.epoch_us

    def __repr__(self) -> str:
        return f"Trace({len(self.records)} records, epoch_us={self.epoch_us})"

    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.fromiter((r.timestamp_us for r in self.records), dtype=np.int64,
                           count=len(self.records))

    @cached_property
    def dir_sizes(self) -> np.ndarray:
        return np.fromiter((r.dir_size for r in self.records), dtype=np.int64,
                           count=len(self.records))

    @cached_property
    def hosts(self) -> np.ndarray:
        return np.fromiter((r.host for r in self.records), dtype=np.int64,
                           count=len(self.records))

    def labels(self) -> list[str | None]:
        return [r.label for r in self.records]

    def with_label(self, label: str) -> "Trace":
        return Trace((r.replace(label=label) for r in self.records), self.epoch_us)

    def select(self, label: str | None) -> "Trace":
        """Records carrying ``label`` (``None`` selects unlabelled records)."""
        return Trace((r for r in self.records if r.label == label), self.epoch_us)


def parse_csv(path: str | Path) -> Trace:
    """Read a trace in the canonical CSV layout.

    Out-of-order rows are re-sorted (stable) and counted in ``Trace.reordered``.
    """
    records: list[PacketRecord] = []
    reordered = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Trace()
        if header[:8] != CSV_HEADER[:8]:
            raise TraceError(f"{path}: unexpected header {header!r}")
        has_label = len(header) > 8 and header[8] == "label"
        last_ts = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rec = _row_to_record(row, has_label)
            except (ValueError, KeyError, IndexError) as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
            if last_ts is not None and rec.timestamp_us < last_ts:
                reordered += 1
            last_ts = rec.timestamp_us if last_ts is None else max(last_ts, rec.timestamp_us)
            records.append(rec)
    if reordered:
        log.warning("%s: %d rows out of timestamp order, re-sorted", path, reordered)
        records.sort(key=lambda r: r.timestamp_us)
    return Trace(records, reordered=reordered)


def _row_to_record(row: Sequence[str], has_label: bool) -> PacketRecord:
    label = row[8] if has_label and len(row) > 8 and row[8] != "" else None
    direction = int(row[7])
    if direction not in (0, 1):
        raise ValueError(f"direction must be 0 or 1, got {direction}")
    ports = int(row[3]), int(row[4])
    if not all(0 <= p <= 0xFFFF for p in ports):
        raise ValueError(f"port out of range: {ports}")
    return PacketRecord(
        timestamp_us=int(row[0]),
        src_ip=ip_to_int(row[1]),
        dst_ip=ip_to_int(row[2]),
        src_port=ports[0],
        dst_port=ports[1],
        proto=Proto[row[5].strip().upper()],
        ip_total_len=int(row[6]),
        direction=Direction(direction),
        label=label,
    )


def write_csv(trace: Trace, path: str | Path) -> None:
    ip_cache: dict[int, str] = {}

    def fmt_ip(v: int) -> str:
        s = ip_cache.get(v)
        if s is None:
            s = ip_cache[v] = int_to_ip(v)
        return s

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in trace:
            writer.writerow([r.timestamp_us, fmt_ip(r.src_ip), fmt_ip(r.dst_ip),
                             r.src_port, r.dst_port, r.proto.name, r.ip_total_len,
                             int(r.direction), r.label or ""])


def is_private(addr: int) -> bool:
    return addr in _PRIVATE


def _isp_invisible(r: PacketRecord, lan: PrefixSet) -> bool:
    if r.proto == Proto.UDP:
        ports = (r.src_port, r.dst_port)
        if 67 in ports or 68 in ports or 1900 in ports or 5353 in ports:
            return True
    if r.proto in (Proto.UDP, Proto.TCP):
        if r.dst_port == 53 and is_private(r.dst_ip):
            return True
        if r.src_port == 53 and is_private(r.src_ip):
            return True
    return r.src_ip in lan and r.dst_ip in lan


def filter_isp_visible(trace: Trace,
                       lan_prefixes: Iterable[str] = DEFAULT_LAN_PREFIXES) -> Trace:
    """Drop traffic an upstream ISP link never carries.

    Removes DHCP, SSDP, mDNS, DNS answered by private resolvers and
    LAN-to-LAN traffic. ARP never reaches a :class:`Trace`.
    """
    lan = PrefixSet(lan_prefixes)
    return Trace((r for r in trace if not _isp_invisible(r, lan)), trace.epoch_us)
