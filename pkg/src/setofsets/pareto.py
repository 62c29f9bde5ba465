"""Pareto dominance, NSGA-II ranking, selection, and exact 2-D hypervolume.

Both objectives are minimised.  Functions take objective arrays of shape
``(n, 2)`` and return positions into that array.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_REFERENCE = (1.05, 1.05)


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectivePoint:
    f1: float
    f2: float
    owner: int = -1

    def __post_init__(self):
        if not (np.isfinite(self.f1) and np.isfinite(self.f2)):
            raise ValueError("objective values must be finite")


def dominates(a, b) -> bool:
    """True iff ``a`` is no worse than ``b`` in both objectives and strictly
    better in at least one."""
    a1, a2 = (a.f1, a.f2) if isinstance(a, ObjectivePoint) else a
    b1, b2 = (b.f1, b.f2) if isinstance(b, ObjectivePoint) else b
    return a1 <= b1 and a2 <= b2 and (a1 < b1 or a2 < b2)


def _as_objectives(points) -> np.ndarray:
    if len(points) and isinstance(points[0], ObjectivePoint):
        return np.array([(p.f1, p.f2) for p in points], dtype=np.float64)
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (n, 2) objectives, got shape {arr.shape}")
    return arr


def domination_matrix(objs: np.ndarray) -> np.ndarray:
    """``M[i, j]`` is True when point ``i`` dominates point ``j``."""
    le = (objs[:, None, :] <= objs[None, :, :]).all(axis=2)
    lt = (objs[:, None, :] < objs[None, :, :]).any(axis=2)
    return le & lt


def nondominated_sort(points) -> list[list[int]]:
    """Fronts of point positions; front 0 is dominated by nobody."""
    objs = _as_objectives(points)
    if len(objs) == 0:
        raise ValueError("cannot sort an empty population")
    dom = domination_matrix(objs)
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append([int(i) for i in current])
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def front_ranks(points) -> np.ndarray:
    fronts = nondominated_sort(points)
    ranks = np.empty(sum(len(f) for f in fronts), dtype=np.intp)
    for r, front in enumerate(fronts):
        ranks[front] = r
    return ranks


def crowding_distance(front) -> np.ndarray:
    """Standard NSGA-II crowding distance of each member of one front.

    Extremes in either objective get ``inf``.  Sorting is stable, so among
    tied values the lowest position is the lower boundary and the highest
    position the upper one.
    """
    objs = _as_objectives(front)
    n = len(objs)
    if n == 0:
        raise ValueError("empty front")
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for m in range(objs.shape[1]):
        order = np.argsort(objs[:, m], kind="stable")
        vals = objs[order, m]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = vals[-1] - vals[0]
        if span > 0:
            dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def environmental_select(points, gamma: int, ids: Sequence[int] | None = None) -> list[int]:
    """Elitist truncation to ``gamma`` survivors.

    Whole fronts are admitted in rank order.  The front that overflows is
    ordered by descending crowding distance, then ascending id; members
    whose objective vector repeats one already placed in that ordering go
    to the back, so duplicates never push out a distinct trade-off.
    """
    objs = _as_objectives(points)
    n = len(objs)
    if n < gamma:
        raise SelectionError(f"union of {n} cannot fill a population of {gamma}")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    chosen: list[int] = []
    for front in nondominated_sort(objs):
        if len(chosen) + len(front) <= gamma:
            chosen.extend(front)
            if len(chosen) == gamma:
                break
            continue
        crowd = crowding_distance(objs[front])
        order = sorted(range(len(front)), key=lambda k: (-crowd[k], ids[front[k]]))
        seen, fresh, repeats = set(), [], []
        for k in order:
            key = tuple(objs[front[k]])
            (repeats if key in seen else fresh).append(front[k])
            seen.add(key)
        chosen.extend((fresh + repeats)[: gamma - len(chosen)])
        break
    return chosen


def hypervolume_2d(points, reference=DEFAULT_REFERENCE) -> float:
    """Exact area dominated by ``points`` and bounded by ``reference``.

    Points not strictly better than the reference in both objectives add
    nothing.  Dominated points are skipped by the sweep.
    """
    objs = _as_objectives(points) if len(points) else np.empty((0, 2))
    r1, r2 = reference
    objs = objs[(objs[:, 0] < r1) & (objs[:, 1] < r2)]
    if objs.size == 0:
        return 0.0
    order = np.lexsort((objs[:, 1], objs[:, 0]))
    hv, ceiling = 0.0, r2
    for f1, f2 in objs[order]:
        if f2 < ceiling:
            hv += (r1 - f1) * (ceiling - f2)
            ceiling = f2
    return float(hv)


@dataclass(frozen=True)
class NormalizationBounds:
    """Fixed per-objective ``(min, max)`` ranges for one task."""

    f1: tuple[float, float] = (0.0, 1.0)
    f2: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for lo, hi in (self.f1, self.f2):
            if not hi > lo:
                raise ValueError(f"degenerate normalization bounds ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {"f1": list(self.f1), "f2": list(self.f2)}


def normalize_for_hv(points, bounds: NormalizationBounds) -> np.ndarray:
    objs = _as_objectives(points) if len(points) else np.empty((0, 2))
    lo = np.array([bounds.f1[0], bounds.f2[0]])
    hi = np.array([bounds.f1[1], bounds.f2[1]])
    return np.clip((objs - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class HypervolumeTrend:
    reference: tuple[float, float] = DEFAULT_REFERENCE
    series: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def append(self, task_id: int, generation: int, hv: float) -> None:
        rows = self.series.setdefault(task_id, [])
        if rows and generation <= rows[-1][0]:
            raise ValueError("trend generations must increase strictly")
        rows.append((generation, float(hv)))

    def values(self, task_id: int) -> list[float]:
        return [hv for _, hv in self.series[task_id]]

    def rows(self) -> Iterable[tuple[int, int, float]]:
        for task_id in sorted(self.series):
            for gen, hv in self.series[task_id]:
                yield task_id, gen, hv

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "generation", "hypervolume"])
            for task_id, gen, hv in self.rows():
                w.writerow([task_id, gen, repr(hv)])

    @classmethod
    def read_csv(cls, path, reference=DEFAULT_REFERENCE) -> "HypervolumeTrend":
        trend = cls(reference=tuple(reference))
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trend.append(int(row["task_id"]), int(row["generation"]), float(row["hypervolume"]))
        return trend
