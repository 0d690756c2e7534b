"""Slow, independent re-implementations used as test oracles."""

import math
from statistics import fmean, pstdev


def key_packets_bruteforce(records, t_b_us, eta, min_bursts):
    """Plain-Python periodic-burst extraction: {size: (period, cv, tuple)}."""
    groups = {}
    for r in records:
        if r.direction == 1:
            key = (r.src_ip, r.src_port, int(r.proto))
        else:
            key = (r.dst_ip, r.dst_port, int(r.proto))
        groups.setdefault(key, []).append((r.timestamp_us, r.dir_size))
    found = {}
    for key in sorted(groups):
        pkts = groups[key]
        starts, members = [], []
        last = None
        for ts, p in pkts:
            if last is None or ts - last > t_b_us:
                starts.append(ts)
                members.append(set())
            members[-1].add(p)
            last = ts
        if len(starts) < 2:
            continue
        gaps = [b - a for a, b in zip(starts, starts[1:])]
        mu = fmean(gaps)
        cv = pstdev(gaps) / mu
        if cv < eta and len(starts) > min_bursts:
            for p in set().union(*members):
                if p not in found or mu < found[p][0]:
                    found[p] = (mu, cv, key)
    return found


def gini_counts(n0, n1):
    n = n0 + n1
    return 1.0 - (n0 / n) ** 2 - (n1 / n) ** 2


def best_split_exhaustive(X, y, rows):
    """Try every (feature, midpoint) pair; ties go to lower feature then lower threshold."""
    n0 = sum(1 for i in rows if y[i] == 0)
    n1 = len(rows) - n0
    parent = gini_counts(n0, n1)
    best = None
    for j in range(len(X[0])):
        vals = sorted({X[i][j] for i in rows})
        for a, b in zip(vals, vals[1:]):
            t = (a + b) / 2
            left = [i for i in rows if X[i][j] <= t]
            right = [i for i in rows if X[i][j] > t]
            l1 = sum(y[i] for i in left)
            r1 = sum(y[i] for i in right)
            child = (len(left) * gini_counts(len(left) - l1, l1)
                     + len(right) * gini_counts(len(right) - r1, r1)) / len(rows)
            gain = parent - child
            if gain <= 1e-12:
                continue
            if best is None or gain > best[0] + 1e-12:
                best = (gain, j, t, left, right)
    return best


def grow_exhaustive(X, y, rows=None):
    """Unbounded recursive CART; returns nested tuples ('leaf', n0, n1) or ('split', j, t, L, R)."""
    if rows is None:
        rows = list(range(len(y)))
    n1 = sum(y[i] for i in rows)
    n0 = len(rows) - n1
    if n0 == 0 or n1 == 0:
        return ("leaf", n0, n1)
    split = best_split_exhaustive(X, y, rows)
    if split is None:
        return ("leaf", n0, n1)
    _, j, t, left, right = split
    return ("split", j, t, grow_exhaustive(X, y, left), grow_exhaustive(X, y, right))


def tree_as_tuples(node):
    if node.is_leaf:
        return ("leaf", int(node.counts[0]), int(node.counts[1]))
    return ("split", node.feature, node.threshold, tree_as_tuples(node.left),
            tree_as_tuples(node.right))


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def finite_difference(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of array ``x``."""
    import numpy as np

    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g
