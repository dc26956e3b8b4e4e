"""Distribution comparisons between observed and synthetic data."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .schema import Categorical, RecordBatch, TrajectorySeq, ZoneRegistry, haversine_km


def trip_length(traj: TrajectorySeq, zones: ZoneRegistry) -> float:
    """Summed great-circle distance (km) between consecutive chain locations."""
    if len(traj) < 2:
        zones.index(traj.tokens[0])
        return 0.0
    c = zones.centroids(traj.tokens)
    return float(np.sum(haversine_km(c[:-1, 0], c[:-1, 1], c[1:, 0], c[1:, 1])))


def trip_lengths(trajs, zones: ZoneRegistry) -> np.ndarray:
    return np.array([trip_length(t, zones) for t in trajs], dtype=float)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    freqs: np.ndarray
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0

    def to_dict(self):
        return {"edges": self.edges.tolist(), "freqs": self.freqs.tolist(),
                "count": self.count, "empty": self.empty}


def histogram(values, bins: int = 30, range: tuple[float, float] = None) -> Histogram:
    """Proportions over ``bins`` uniform bins.

    Bins are right-open except the last; values outside ``range`` fall into
    the end bins. Empty input yields all-zero frequencies.
    """
    v = np.asarray(values, dtype=float).ravel()
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if range is None:
        range = (0.0, float(v.max()) if v.size and v.max() > 0 else 1.0)
    lo, hi = float(range[0]), float(range[1])
    if not hi > lo:
        raise ValueError("range max must exceed range min")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    freqs = counts / v.size if v.size else counts
    return Histogram(edges, freqs, int(v.size))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson is undefined for a zero-variance input")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def r2_zero_intercept(x, y) -> float:
    """R^2 of ``y ~ beta * x`` fitted through the origin (uncentred total SS)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sxx = float(x @ x)
    if sxx == 0:
        raise ValueError("x is all zeros")
    syy = float(y @ y)
    if syy == 0:
        raise ValueError("y is all zeros")
    beta = float(x @ y) / sxx
    resid = y - beta * x
    return 1.0 - float(resid @ resid) / syy


def srmse(real_freq, synth_freq) -> float:
    """RMSE between frequency vectors divided by the mean observed frequency."""
    y = np.asarray(real_freq, dtype=float)
    yh = np.asarray(synth_freq, dtype=float)
    if y.shape != yh.shape:
        raise ValueError("frequency vectors differ in length")
    mean = y.mean()
    if not mean > 0:
        raise ValueError("observed frequencies have zero mean")
    return float(np.sqrt(np.mean((yh - y) ** 2)) / mean)


@dataclass(frozen=True)
class ScoreTriple:
    pearson: float
    r2_zero_intercept: float
    srmse: float

    def to_dict(self):
        return {"pearson": self.pearson, "r2_zero_intercept": self.r2_zero_intercept,
                "srmse": self.srmse}


def score(real_freq, synth_freq) -> ScoreTriple:
    """Pearson, zero-intercept R^2 (synthetic regressed on observed) and SRMSE."""
    return ScoreTriple(pearson(real_freq, synth_freq),
                       r2_zero_intercept(real_freq, synth_freq),
                       srmse(real_freq, synth_freq))


@dataclass(frozen=True)
class ConditionalGrid:
    categories: tuple
    hists: tuple

    def flat(self) -> np.ndarray:
        return np.concatenate([h.freqs for h in self.hists])

    @property
    def empty_categories(self):
        return [c for c, h in zip(self.categories, self.hists) if h.empty]


def conditional_grid(composite, column: str, zones: ZoneRegistry, bins: int = 30,
                     range=None) -> ConditionalGrid:
    """Per-category trip-length histograms on a shared bin range."""
    pop = composite.population
    kind = pop.schema.kind(column)
    if not isinstance(kind, Categorical):
        raise ValueError(f"column {column!r} is not categorical")
    lengths = trip_lengths(composite.trajectories, zones)
    if range is None:
        range = (0.0, float(lengths.max()) if lengths.size and lengths.max() > 0 else 1.0)
    codes = pop.column(column).astype(int)
    hists = tuple(histogram(lengths[codes == k], bins, range)
                  for k in np.arange(len(kind.categories)))
    return ConditionalGrid(kind.categories, hists)


@dataclass(frozen=True)
class SpatialGrid:
    origin: tuple           # (lat_min, lon_min)
    cell_deg: float
    real: np.ndarray        # (n_lat, n_lon) visit counts
    synth: np.ndarray

    @property
    def pct_error(self) -> np.ndarray:
        return (self.synth - self.real) / np.maximum(self.real, 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("cell_lat", "cell_lon", "real", "synth", "pct_error"))
        err = self.pct_error
        for i in np.arange(self.real.shape[0]):
            for j in np.arange(self.real.shape[1]):
                w.writerow((f"{self.origin[0] + i * self.cell_deg:.6f}",
                            f"{self.origin[1] + j * self.cell_deg:.6f}",
                            int(self.real[i, j]), int(self.synth[i, j]),
                            f"{err[i, j]:.6f}"))
        return buf.getvalue()


def spatial_grid(trajs_real, trajs_synth, zones: ZoneRegistry, cell_deg: float = 0.05) -> SpatialGrid:
    """Visit counts per lat/lon cell over the zones' bounding box."""
    lo = zones.coords.min(axis=0)
    shape = tuple(np.floor((zones.coords.max(axis=0) - lo) / cell_deg).astype(int) + 1)

    def tally(trajs):
        grid = np.zeros(shape, dtype=np.int64)
        if not trajs:
            return grid
        c = zones.centroids([z for t in trajs for z in t.tokens])
        ij = np.clip(np.floor((c - lo) / cell_deg).astype(int), 0, np.array(shape) - 1)
        np.add.at(grid, (ij[:, 0], ij[:, 1]), 1)
        return grid

    return SpatialGrid((float(lo[0]), float(lo[1])), cell_deg, tally(trajs_real), tally(trajs_synth))


@dataclass(frozen=True)
class MarginalComparison:
    categories: tuple
    real: np.ndarray
    synth: np.ndarray

    @property
    def tv_distance(self) -> float:
        return 0.5 * float(np.abs(self.real - self.synth).sum())

    def to_dict(self):
        return {"categories": list(self.categories), "real": self.real.tolist(),
                "synth": self.synth.tolist(), "tv_distance": self.tv_distance}


def marginal_compare(real: RecordBatch, synth: RecordBatch, column: str) -> MarginalComparison:
    kind = real.schema.kind(column)
    if not isinstance(kind, Categorical):
        raise ValueError(f"column {column!r} is not categorical")
    k = len(kind.categories)

    def props(b):
        c = np.bincount(b.column(column).astype(int), minlength=k).astype(float)
        return c / c.sum() if c.sum() else c

    return MarginalComparison(kind.categories, props(real), props(synth))


def evaluate(real, synth, zones: ZoneRegistry, bins: int = 30, cell_deg: float = 0.05,
             category_column: str = "industry") -> tuple[dict, SpatialGrid]:
    """Build the evaluation report for two composite tables.

    Returns a JSON-ready dict and the spatial grid (emitted separately as CSV).
    """
    real_len = trip_lengths(real.trajectories, zones)
    synth_len = trip_lengths(synth.trajectories, zones)
    top = max(float(real_len.max(initial=0.0)), float(synth_len.max(initial=0.0)))
    rng_ = (0.0, top if top > 0 else 1.0)
    h_real = histogram(real_len, bins, rng_)
    h_synth = histogram(synth_len, bins, rng_)
    g_real = conditional_grid(real, category_column, zones, bins, rng_)
    g_synth = conditional_grid(synth, category_column, zones, bins, rng_)
    grid = spatial_grid(list(real.trajectories), list(synth.trajectories), zones, cell_deg)
    schema = real.population.schema
    marginals = {name: marginal_compare(real.population, synth.population, name).to_dict()
                 for name, kind in schema.columns if isinstance(kind, Categorical)}
    report = {
        "bins": bins,
        "range_km": list(rng_),
        "unconditional": {
            "real": h_real.to_dict(), "synthetic": h_synth.to_dict(),
            "scores": score(h_real.freqs, h_synth.freqs).to_dict(),
        },
        "conditional": {
            "column": category_column,
            "categories": list(g_real.categories),
            "points": int(g_real.flat().size),
            "real": [h.freqs.tolist() for h in g_real.hists],
            "synthetic": [h.freqs.tolist() for h in g_synth.hists],
            "empty_real": g_real.empty_categories,
            "empty_synthetic": g_synth.empty_categories,
            "scores": score(g_real.flat(), g_synth.flat()).to_dict(),
        },
        "marginals": marginals,
        "spatial": {
            "origin": list(grid.origin), "cell_deg": cell_deg, "shape": list(grid.real.shape),
            "abs_pct_error_mean": float(np.abs(grid.pct_error).mean()),
        },
        "counts": {"real": len(real), "synthetic": len(synth)},
    }
    return report, grid
