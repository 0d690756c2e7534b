"""Per-host tumbling windows and neighbouring key-packet feature vectors.

A host's window opens on its first packet. The first packet arriving at
least ``t_w`` later closes it and opens the next window at its own
timestamp, which is exactly how the switch registers behave. Elapsed time is
measured modulo 2**32 microseconds like the switch's 32-bit timestamp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .neighbors import NeighborProbMatrix, neighbor_prob
from .trace import Trace

TS_MASK = 0xFFFFFFFF
DEFAULT_TW_US = 1_000_000


@dataclass(frozen=True)
class FeatureVector:
    v: np.ndarray
    window_start_us: int = 0
    ip_key: int = 0


class WindowIndex(NamedTuple):
    """Columnar window assignment of a trace.

    ``packet_window[i]`` is the window of record ``i``; windows are numbered
    in the order they open.
    """

    packet_window: np.ndarray
    host: np.ndarray
    start_us: np.ndarray

    def __len__(self) -> int:
        return len(self.host)

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.host.tolist(), self.start_us.tolist()))


class Window(NamedTuple):
    ip_key: int
    start_us: int
    indices: np.ndarray


def assign_windows(timestamps: np.ndarray, hosts: np.ndarray, t_w_us: int) -> WindowIndex:
    if t_w_us <= 0:
        raise ValueError("window length must be positive")
    n = len(timestamps)
    packet_window = np.empty(n, dtype=np.int64)
    open_win: dict[int, tuple[int, int]] = {}
    win_host: list[int] = []
    win_start: list[int] = []
    for i, (ts, h) in enumerate(zip(timestamps.tolist(), hosts.tolist())):
        cur = open_win.get(h)
        if cur is None or ((ts - cur[1]) & TS_MASK) >= t_w_us:
            cur = (len(win_host), ts)
            open_win[h] = cur
            win_host.append(h)
            win_start.append(ts)
        packet_window[i] = cur[0]
    return WindowIndex(packet_window, np.array(win_host, dtype=np.int64),
                       np.array(win_start, dtype=np.int64))


def windowize(trace: Trace, t_w_us: int = DEFAULT_TW_US) -> list[Window]:
    """Split a trace into per-host windows, returned in opening order."""
    idx = assign_windows(trace.timestamps, trace.hosts, t_w_us)
    order = np.argsort(idx.packet_window, kind="stable")
    bounds = np.searchsorted(idx.packet_window[order], np.arange(len(idx) + 1))
    return [Window(int(idx.host[w]), int(idx.start_us[w]), order[bounds[w]:bounds[w + 1]])
            for w in range(len(idx))]


def build_feature_vector(packets: Iterable[int], matrix: NeighborProbMatrix,
                         key_packets: Sequence[int]) -> np.ndarray:
    """Sum over observed packets of their neighbouring probability to each key packet."""
    v = np.zeros(len(key_packets))
    for p in packets:
        for j, x in enumerate(key_packets):
            v[j] += neighbor_prob(matrix, p, x)
    return v


def window_features(trace: Trace, windows: WindowIndex, lookup: np.ndarray) -> np.ndarray:
    """Feature rows for every window; ``lookup[p]`` is the per-packet contribution row."""
    contrib = lookup[trace.dir_sizes]
    n_win = len(windows)
    out = np.empty((n_win, lookup.shape[1]), dtype=lookup.dtype)
    for j in range(lookup.shape[1]):
        col = np.bincount(windows.packet_window, weights=contrib[:, j], minlength=n_win)
        out[:, j] = np.rint(col) if np.issubdtype(lookup.dtype, np.integer) else col
    return out


def window_labels(trace: Trace, windows: WindowIndex, device_id: str) -> np.ndarray:
    """1 for windows holding at least one packet of ``device_id``."""
    hit = np.fromiter((r.label == device_id for r in trace), dtype=bool, count=len(trace))
    counts = np.bincount(windows.packet_window[hit], minlength=len(windows))
    return (counts > 0).astype(np.int64)
