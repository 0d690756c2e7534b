"""Minimal libpcap reader/writer for Ethernet + IPv4 captures."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

from .trace import (MIN_IP_LEN, MTU, Direction, PacketRecord, PrefixSet, Proto,
                    Trace, TraceError)

_MAGIC_US = 0xA1B2C3D4
_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
ETH_P_IP = 0x0800


def parse_pcap(path: str | Path, lan_prefixes: Iterable[str]) -> Trace:
    """Read an Ethernet pcap into a :class:`Trace`.

    Direction is 0 when the source address falls inside ``lan_prefixes``.
    Non-IPv4 frames and IPv4 packets outside the [20, 1500] length range are
    dropped and counted in ``Trace.skipped``. Timestamps are rebased on the
    first captured frame, whose absolute time is kept as ``epoch_us``.
    """
    lan = PrefixSet(lan_prefixes)
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise TraceError(f"{path}: truncated pcap header")
    magic_le = struct.unpack("<I", data[:4])[0]
    if magic_le in (_MAGIC_US, _MAGIC_NS):
        endian = "<"
    elif struct.unpack(">I", data[:4])[0] in (_MAGIC_US, _MAGIC_NS):
        endian = ">"
    else:
        raise TraceError(f"{path}: not a pcap file")
    magic = struct.unpack(endian + "I", data[:4])[0]
    nano = magic == _MAGIC_NS
    linktype = struct.unpack(endian + "I", data[20:24])[0]
    if linktype != LINKTYPE_ETHERNET:
        raise TraceError(f"{path}: unsupported link type {linktype}")

    rec_hdr = struct.Struct(endian + "IIII")
    off = 24
    raw: list[tuple[int, bytes]] = []
    while off + 16 <= len(data):
        sec, frac, incl, _orig = rec_hdr.unpack_from(data, off)
        off += 16
        frame = data[off:off + incl]
        off += incl
        ts = sec * 1_000_000 + (frac // 1000 if nano else frac)
        raw.append((ts, frame))

    records: list[PacketRecord] = []
    skipped = 0
    epoch = raw[0][0] if raw else 0
    for ts, frame in raw:
        rec = _decode_frame(frame, ts - epoch, lan)
        if rec is None:
            skipped += 1
        else:
            records.append(rec)
    records.sort(key=lambda r: r.timestamp_us)
    return Trace(records, epoch_us=epoch, skipped=skipped)


def _decode_frame(frame: bytes, ts: int, lan: PrefixSet) -> PacketRecord | None:
    if len(frame) < 14 + 20:
        return None
    if struct.unpack_from("!H", frame, 12)[0] != ETH_P_IP:
        return None
    ver_ihl = frame[14]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", frame, 16)
    if not MIN_IP_LEN <= total_len <= MTU:
        return None
    proto_num = frame[23]
    src, dst = struct.unpack_from("!II", frame, 26)
    sport = dport = 0
    proto = Proto.from_number(proto_num)
    l4 = 14 + ihl
    # only the first fragment carries the L4 header
    if proto != Proto.OTHER and frag & 0x1FFF == 0 and len(frame) >= l4 + 4:
        sport, dport = struct.unpack_from("!HH", frame, l4)
    direction = Direction.LAN_TO_WAN if src in lan else Direction.WAN_TO_LAN
    return PacketRecord(ts, src, dst, sport, dport, proto, total_len, direction)


_PROTO_NUM = {Proto.TCP: 6, Proto.UDP: 17, Proto.OTHER: 0}


def write_pcap(trace: Trace, path: str | Path, snaplen: int = 64) -> None:
    """Write ``trace`` as a truncated Ethernet/IPv4 capture.

    Frames carry real headers with zeroed payload, truncated to ``snaplen``
    bytes; the IPv4 total length keeps the original size.
    """
    out = bytearray(struct.pack("<IHHiIII", _MAGIC_US, 2, 4, 0, 0, snaplen,
                                LINKTYPE_ETHERNET))
    for r in trace:
        ts = r.timestamp_us + trace.epoch_us
        eth = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + struct.pack("!H", ETH_P_IP)
        ip = struct.pack("!BBHHHBBHII", 0x45, 0, r.ip_total_len, 0, 0, 64,
                         _PROTO_NUM[r.proto], 0, r.src_ip, r.dst_ip)
        l4 = struct.pack("!HH", r.src_port, r.dst_port) if r.proto != Proto.OTHER else b""
        body = eth + ip + l4
        orig = 14 + r.ip_total_len
        body = body + bytes(max(0, min(orig, snaplen) - len(body)))
        body = body[:min(orig, snaplen)]
        out += struct.pack("<IIII", ts // 1_000_000, ts % 1_000_000, len(body), orig)
        out += body
    Path(path).write_bytes(bytes(out))


def write_raw_frames(path: str | Path, frames: Iterable[tuple[int, bytes]]) -> None:
    """Write arbitrary pre-built Ethernet frames (used for non-IPv4 fixtures)."""
    out = bytearray(struct.pack("<IHHiIII", _MAGIC_US, 2, 4, 0, 0, 65535,
                                LINKTYPE_ETHERNET))
    for ts, frame in frames:
        out += struct.pack("<IIII", ts // 1_000_000, ts % 1_000_000, len(frame), len(frame))
        out += frame
    Path(path).write_bytes(bytes(out))

