"""Fuse synthetic population rows with synthetic trip chains.

Each population row is paired with exactly one chain so that the summed
distance between the row's origin coordinate and the centroid of the
chain's first zone is minimal. Chains are never copied or altered, so the
trip distribution survives the merge unchanged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator

from .schema import PERSON_ID, RecordBatch, ZoneRegistry, format_cells


@dataclass(frozen=True)
class Assignment:
    perm: np.ndarray        # population row i -> trajectory perm[i]
    total_cost: float

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError("assignment is not a permutation")
        perm.setflags(write=False)
        object.__setattr__(self, "perm", perm)


def _check_costs(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    if np.any(c < 0):
        raise ValueError("cost matrix must be non-negative")
    return np.ascontiguousarray(c)


def build_cost_matrix(pop: RecordBatch, trajs, zones: ZoneRegistry, dest_weight: float = 0.0,
                      lat_col="origin_lat", lon_col="origin_lon",
                      dest_lat_col="dest_lat", dest_lon_col="dest_lon") -> np.ndarray:
    """Planar distance between each row's origin and each chain's first zone.

    Coordinates are used as raw ``(lat, lon)`` pairs. With ``dest_weight``
    > 0 the distance between the row's destination and the chain's second
    zone (its first zone for one-stop chains) is added with that weight.
    """
    if len(pop) != len(trajs):
        raise ValueError(f"population has {len(pop)} rows but there are {len(trajs)} chains")
    origin = np.column_stack([pop.column(lat_col), pop.column(lon_col)])
    first = zones.centroids([t.tokens[0] for t in trajs])
    costs = _pairwise(origin, first)
    if dest_weight:
        dest = np.column_stack([pop.column(dest_lat_col), pop.column(dest_lon_col)])
        second = zones.centroids([t.tokens[min(1, len(t) - 1)] for t in trajs])
        costs += dest_weight * _pairwise(dest, second)
    return costs


def _pairwise(a, b, block=1024):
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], block):
        d0 = a[s:s + block, 0:1] - b[:, 0]
        d1 = a[s:s + block, 1:2] - b[:, 1]
        np.sqrt(d0 * d0 + d1 * d1, out=out[s:s + block])
    return out


@njit(cache=True)
def _solve(c):
    # Shortest augmenting path with row/column potentials; 1-based arrays,
    # index 0 is the virtual source column.
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.zeros(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            ui = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


def hungarian(costs) -> Assignment:
    """Minimum-total-cost perfect matching of a square non-negative matrix.

    Rows are inserted one at a time and each is routed along a shortest
    augmenting path in the reduced-cost graph, which is the O(n^3) form of
    the row/column reduction and zero-covering procedure. Among equal-cost
    candidates the lowest column index is taken, so the output is
    deterministic.
    """
    c = _check_costs(costs)
    n = c.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    perm = _solve(c)
    return Assignment(perm, float(c[np.arange(n), perm].sum()))


@dataclass(frozen=True)
class CompositeTable:
    """Population rows with their assigned chains attached."""
    population: RecordBatch
    trajectories: tuple

    def __len__(self):
        return len(self.population)

    def to_csv(self, n_max: int = 4, float_fmt: str = ".6f") -> str:
        schema = self.population.schema
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((PERSON_ID, *schema.names, *(f"loc_{k}" for k in range(1, n_max + 1))))
        for rid, row, t in zip(self.population.row_ids, self.population.rows, self.trajectories):
            if len(t) > n_max:
                raise ValueError("chain longer than n_max columns")
            locs = list(t.tokens) + [""] * (n_max - len(t))
            w.writerow((rid, *format_cells(schema, row, float_fmt), *locs))
        return buf.getvalue()


def merge(pop: RecordBatch, trajs, assignment: Assignment) -> CompositeTable:
    """Attach chain ``perm[i]`` to population row ``i``; chains are used once each."""
    n = len(pop)
    if len(trajs) != n or assignment.perm.size != n:
        raise ValueError("assignment, population and chains must have the same size")
    return CompositeTable(pop, tuple(trajs[j] for j in assignment.perm))


def join_real(pop: RecordBatch, trajs) -> CompositeTable:
    """Composite of observed data, paired by person id."""
    by_id = {t.person_id: t for t in trajs}
    missing = [rid for rid in pop.row_ids if rid not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} persons have no chain")
    return CompositeTable(pop, tuple(by_id[rid] for rid in pop.row_ids))


class OriginMatcher(BaseEstimator):
    """``fit`` on zones, then ``predict`` an assignment or ``merge`` directly."""

    def __init__(self, dest_weight=0.0):
        self.dest_weight = dest_weight

    def fit(self, zones: ZoneRegistry, y=None):
        self.zones_ = zones
        return self

    def predict(self, pop: RecordBatch, trajs) -> Assignment:
        return hungarian(build_cost_matrix(pop, trajs, self.zones_, self.dest_weight))

    def merge(self, pop: RecordBatch, trajs) -> CompositeTable:
        return merge(pop, trajs, self.predict(pop, trajs))
