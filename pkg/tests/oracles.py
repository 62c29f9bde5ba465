"""Slow, definition-level reference implementations used as test oracles."""

import math

import numpy as np

from setofsets import network as nn


def brute_dominates(a, b):
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def brute_fronts(points):
    """Repeatedly peel the points nobody else in the remainder dominates."""
    remaining = list(range(len(points)))
    fronts = []
    while remaining:
        front = [p for p in remaining if not any(brute_dominates(points[q], points[p]) for q in remaining)]
        fronts.append(sorted(front))
        remaining = [p for p in remaining if p not in front]
    return fronts


def chain_fronts(points):
    """Front index as the length of the longest dominance chain above a
    point.  Lexicographic order puts every dominator first, so one pass of
    dynamic programming suffices; vectorised per point so 200-point
    populations stay cheap."""
    pts = np.asarray(points, dtype=np.float64)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    rank = np.full(len(pts), -1)
    for pos, i in enumerate(order):
        before = order[:pos]
        p = pts[i]
        q = pts[before]
        dom = np.all(q <= p, axis=1) & np.any(q < p, axis=1)
        rank[i] = 0 if not dom.any() else rank[before[dom]].max() + 1
    return [sorted(np.flatnonzero(rank == r).tolist()) for r in range(rank.max() + 1)]


def brute_crowding(points):
    n = len(points)
    if n <= 2:
        return [math.inf] * n
    dist = [0.0] * n
    for m in range(2):
        order = sorted(range(n), key=lambda i: (points[i][m], i))
        lo, hi = points[order[0]][m], points[order[-1]][m]
        dist[order[0]] = dist[order[-1]] = math.inf
        for k in range(1, n - 1):
            if hi > lo and dist[order[k]] != math.inf:
                dist[order[k]] += (points[order[k + 1]][m] - points[order[k - 1]][m]) / (hi - lo)
    return dist


def brute_select(points, gamma, ids):
    """Whole fronts first; the overflowing front by (-crowding, id) with
    repeated objective vectors moved behind all distinct ones."""
    points = [tuple(map(float, p)) for p in points]
    chosen = []
    for front in chain_fronts(points):
        if len(chosen) + len(front) <= gamma:
            chosen += front
            if len(chosen) == gamma:
                break
            continue
        crowd = brute_crowding([points[i] for i in front])
        ranked = sorted(range(len(front)), key=lambda k: (-crowd[k], ids[front[k]]))
        seen, fresh, repeats = set(), [], []
        for k in ranked:
            p = points[front[k]]
            (repeats if p in seen else fresh).append(front[k])
            seen.add(p)
        chosen += (fresh + repeats)[: gamma - len(chosen)]
        break
    return chosen


def monte_carlo_hv(points, reference, n, rng):
    samples = rng.random((n, 2)) * np.asarray(reference)
    covered = np.zeros(n, dtype=bool)
    for p in points:
        covered |= (samples[:, 0] >= p[0]) & (samples[:, 1] >= p[1])
    return covered.mean() * reference[0] * reference[1]


def finite_difference_error(net, mask, batch, coords, loss_kind="cross_entropy", head=None, eps=1e-5):
    """Worst relative error between backprop and central differences."""
    grad = nn.backprop(net, mask, batch, loss_kind, head)
    worst = 0.0
    for k in coords:
        up, down = net.copy(), net.copy()
        up.params[k] += eps
        down.params[k] -= eps
        fd = (nn.loss(up, mask, batch, loss_kind, head) - nn.loss(down, mask, batch, loss_kind, head)) / (2 * eps)
        denom = max(abs(fd), abs(grad[k]), 1e-8)
        worst = max(worst, abs(fd - grad[k]) / denom)
    return worst
