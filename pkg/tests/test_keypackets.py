import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotfp.keypackets import (ExtractionConfig, KeyPacket, KeyPacketSet, burst_periodicity,
                              extract_bursts, extract_key_packets, select_top_n,
                              split_by_destination)
from iotfp.harness import BurstSchedule, generate_synthetic_device
from iotfp.neighbors import EmptyModelError
from iotfp.trace import Proto, Trace, encode_directional, ip_to_int

from conftest import SERVER, dir_rec, rec
from oracles import key_packets_bruteforce

S = 1_000_000


def test_split_two_servers():
    other = ip_to_int("52.80.9.9")
    t = Trace([rec(0, 100), rec(1, 100, server=other)])
    assert len(split_by_destination(t)) == 2


def test_split_mirrors_responses():
    t = Trace([rec(0, 100, 0), rec(5, 200, 1)])
    groups = split_by_destination(t)
    assert list(groups) == [(SERVER, 443, int(Proto.TCP))]
    assert len(groups[(SERVER, 443, int(Proto.TCP))]) == 2


def test_split_empty():
    assert split_by_destination(Trace()) == {}


def test_bursts_gap_rule():
    t = Trace([rec(x * S, 100) for x in (0, 0.1, 30, 30.1, 60)])
    assert [b.ts for b in extract_bursts(t, S)] == [0, 30 * S, 60 * S]


def test_single_packet_burst():
    assert len(extract_bursts(Trace([rec(7, 100)]), S)) == 1


def test_all_gaps_within_threshold():
    t = Trace([rec(x * 500_000, 100) for x in range(20)])
    assert len(extract_bursts(t, S)) == 1


def _plug_trace(n_bursts):
    sizes = [543, encode_directional(143, 1), 431, encode_directional(399, 1)]
    return Trace([dir_rec(b * 30 * S + i * 1000, p) for b in range(n_bursts)
                  for i, p in enumerate(sizes)]), sizes


def test_periodic_plug_row():
    # five 30 s bursts: four intervals, cv = 0
    trace, sizes = _plug_trace(5)
    keys = extract_key_packets(trace, ExtractionConfig(min_bursts=4))
    assert sorted(keys.sizes()) == sorted(sizes)
    assert all(e.period_us == 30 * S and e.cv == 0 for e in keys)
    # the default floor needs strictly more than five bursts
    assert extract_key_packets(trace) == KeyPacketSet()
    trace6, _ = _plug_trace(6)
    assert sorted(extract_key_packets(trace6).sizes()) == sorted(sizes)


def test_irregular_intervals_rejected():
    starts = np.cumsum([0, 10, 100, 10, 100]) * S
    t = Trace([rec(s, 300) for s in starts])
    period, cv = burst_periodicity(extract_bursts(t, S))
    assert cv == pytest.approx(45 / 55)
    assert extract_key_packets(t, ExtractionConfig(min_bursts=1)) == KeyPacketSet()


def test_single_burst_group_skipped():
    assert extract_key_packets(Trace([rec(0, 100), rec(10, 200)])) == KeyPacketSet()


def _ks(*entries):
    return KeyPacketSet(KeyPacket(size, period, 0.0, (1, 2, 6)) for size, period in entries)


def test_top_n_by_period():
    keys = _ks((300, 30 * S), (100, 300 * S), (200, 1800 * S))
    assert select_top_n(keys, 2) == ([300, 100], False)


def test_top_n_tie_break_by_size():
    assert select_top_n(_ks((200, 10 * S), (100, 10 * S)), 2).sizes == [100, 200]


def test_top_n_shortfall_and_empty():
    assert select_top_n(_ks((100, S)), 16) == ([100], True)
    with pytest.raises(EmptyModelError):
        select_top_n(KeyPacketSet(), 3)


def _random_trace(rng):
    recs = []
    servers = [ip_to_int(f"52.1.0.{i}") for i in range(1, 4)]
    for s in servers:
        mode = rng.integers(0, 3)
        period = int(rng.integers(2, 20)) * S
        t = int(rng.integers(0, period))
        n = int(rng.integers(1, 12))
        for _ in range(n):
            for _ in range(int(rng.integers(1, 4))):
                recs.append(rec(t, int(rng.integers(40, 80)), int(rng.integers(0, 2)), server=s))
                t += int(rng.integers(0, 2 * S)) if mode == 2 else int(rng.integers(0, S // 2))
            jitter = 0.05 if mode == 0 else 0.6
            t += int(period * (1 + rng.uniform(-jitter, jitter)))
    return Trace.from_unsorted(recs)


def test_matches_bruteforce_oracle_on_random_traces():
    rng = np.random.default_rng(7)
    nonempty = 0
    for _ in range(100):
        trace = _random_trace(rng)
        cfg = ExtractionConfig(t_b_us=S, eta=0.2, min_bursts=int(rng.integers(1, 6)))
        got = {e.size: (e.period_us, e.cv, e.dest_tuple) for e in extract_key_packets(trace, cfg)}
        want = key_packets_bruteforce(trace, cfg.t_b_us, cfg.eta, cfg.min_bursts)
        assert got.keys() == want.keys()
        for p in got:
            assert got[p][0] == pytest.approx(want[p][0], rel=1e-12)
            assert got[p][1] == pytest.approx(want[p][1], rel=1e-9, abs=1e-12)
            assert got[p][2] == want[p][2]
        nonempty += bool(got)
    assert nonempty >= 20


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5 * S), max_size=60), st.integers(1, 2 * S))
def test_burst_partition(ts, t_b):
    t = Trace.from_unsorted([rec(x, 20 + i % 1000) for i, x in enumerate(ts)])
    bursts = extract_bursts(t, t_b)
    assert [p for b in bursts for p in b.pkts] == [r.dir_size for r in t]


@pytest.mark.parametrize("jitter", [0.0, 0.02, 0.05])
def test_planted_period_recovery(jitter):
    rng = np.random.default_rng(11)
    scheds = [BurstSchedule((174, 1674), 10 * S, jitter), BurstSchedule((543, 1643, 431), 60 * S, jitter)]
    device = generate_synthetic_device(scheds, 3600 * S, rng, "dev")
    # aperiodic chatter to a separate server
    noise_server = ip_to_int("52.9.9.9")
    gaps = rng.exponential(30 * S, size=80).cumsum()
    noise = [rec(int(t), 777, server=noise_server) for t in gaps if t < 3600 * S]
    keys = extract_key_packets(Trace.from_unsorted(list(device) + noise))
    assert sorted(keys.sizes()) == [174, 431, 543, 1643, 1674]
