import struct

import pytest

from iotfp.pcap import parse_pcap, write_pcap, write_raw_frames
from iotfp.trace import Direction, PacketRecord, Proto, Trace, TraceError, ip_to_int

LAN = ["192.168.0.0/16"]


def _arp_frame():
    return b"\xff" * 6 + b"\x02" * 6 + struct.pack("!H", 0x0806) + bytes(28)


def test_outbound_direction_from_prefix(tmp_path):
    r = PacketRecord(0, ip_to_int("192.168.1.10"), ip_to_int("52.80.1.1"), 40000, 443, Proto.TCP,
                     74, Direction.LAN_TO_WAN)
    write_pcap(Trace([r]), tmp_path / "a.pcap")
    out = parse_pcap(tmp_path / "a.pcap", LAN)
    assert out[0].direction == Direction.LAN_TO_WAN and out[0].ip_total_len == 74


def test_inbound_direction_from_prefix(tmp_path):
    r = PacketRecord(0, ip_to_int("8.8.8.8"), ip_to_int("192.168.1.10"), 53, 40000, Proto.UDP,
                     90, Direction.WAN_TO_LAN)
    write_pcap(Trace([r]), tmp_path / "a.pcap")
    assert parse_pcap(tmp_path / "a.pcap", LAN)[0].direction == Direction.WAN_TO_LAN


def test_arp_only_capture(tmp_path):
    write_raw_frames(tmp_path / "arp.pcap", [(i * 1000, _arp_frame()) for i in range(3)])
    out = parse_pcap(tmp_path / "arp.pcap", LAN)
    assert len(out) == 0 and out.skipped == 3


def test_round_trip_keeps_fields(tmp_path):
    recs = [PacketRecord(t, ip_to_int("192.168.1.10"), ip_to_int("52.80.1.1"), 40000 + t, 443,
                         Proto.TCP, 60 + t, Direction.LAN_TO_WAN) for t in range(5)]
    recs.append(PacketRecord(9, ip_to_int("52.80.1.1"), ip_to_int("192.168.1.10"), 443, 40000,
                             Proto.OTHER, 1500, Direction.WAN_TO_LAN))
    trace = Trace(recs, epoch_us=1_700_000_000_000_000)
    write_pcap(trace, tmp_path / "rt.pcap")
    out = parse_pcap(tmp_path / "rt.pcap", LAN)
    assert out.epoch_us == trace.epoch_us
    assert [(r.timestamp_us, r.src_port, r.ip_total_len, r.direction) for r in out] == \
        [(r.timestamp_us, r.src_port if r.proto != Proto.OTHER else 0, r.ip_total_len, r.direction)
         for r in recs]


def test_not_a_pcap(tmp_path):
    (tmp_path / "x.pcap").write_bytes(b"hello world, definitely not pcap")
    with pytest.raises(TraceError):
        parse_pcap(tmp_path / "x.pcap", LAN)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        parse_pcap(tmp_path / "nope.pcap", LAN)
