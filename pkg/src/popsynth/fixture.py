"""Synthetic survey-like fixture data with known generating distributions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import histogram, trip_lengths
from .schema import (INDUSTRIES, TrajectorySeq, ZoneRegistry, default_schema,
                     haversine_km, trajectories_to_csv)
from .schema import RecordBatch

BRISBANE_CBD = (-27.4698, 153.0251)


@dataclass(frozen=True)
class MarkovChainSpec:
    """First-order chain over zones with a constant stop probability.

    ``initial`` is the first-zone distribution, ``transition[i, j]`` the
    probability of moving from zone i to zone j given the chain continues.
    Chains stop after each location with probability ``stop`` and are
    truncated at ``n_max`` locations.
    """
    zone_ids: tuple
    initial: np.ndarray
    transition: np.ndarray
    stop: float
    n_max: int

    def length_distribution(self) -> np.ndarray:
        s = self.stop
        p = np.array([(1 - s) ** (k - 1) * s for k in range(1, self.n_max)]
                     + [(1 - s) ** (self.n_max - 1)])
        return p

    def sample(self, n, rng, first=None, id_prefix="m"):
        rng = np.random.default_rng(rng)
        k = len(self.zone_ids)
        if first is None:
            first = rng.choice(k, size=n, p=self.initial)
        cum = np.cumsum(self.transition, axis=1)
        out = []
        width = len(str(max(n - 1, 0)))
        for i in range(n):
            z = [int(first[i])]
            while len(z) < self.n_max and rng.random() >= self.stop:
                nxt = int(np.searchsorted(cum[z[-1]], rng.random() * cum[z[-1], -1], side="right"))
                z.append(min(nxt, k - 1))
            out.append(TrajectorySeq(f"{id_prefix}{i:0{width}d}",
                                     tuple(self.zone_ids[j] for j in z)))
        return out


def random_markov_chain(seed, n_zones=10, stop=0.35, n_max=4, concentration=1.0):
    """A random chain spec with Dirichlet rows and no self-transitions."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_zones, concentration), size=n_zones)
    np.fill_diagonal(P, 0.0)
    P /= P.sum(axis=1, keepdims=True)
    init = rng.dirichlet(np.full(n_zones, 2.0))
    ids = tuple(f"Z{j:02d}" for j in range(n_zones))
    return MarkovChainSpec(ids, init, P, stop, n_max)


def empirical_transitions(trajs, zone_ids) -> np.ndarray:
    """Row-normalised transition counts between consecutive chain zones."""
    idx = {z: i for i, z in enumerate(zone_ids)}
    counts = np.zeros((len(zone_ids), len(zone_ids)))
    for t in trajs:
        for a, b in zip(t.tokens[:-1], t.tokens[1:]):
            counts[idx[a], idx[b]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def grid_zones(n_zones, center=BRISBANE_CBD, half_width_deg=0.22) -> ZoneRegistry:
    side = math.ceil(math.sqrt(n_zones))
    offs = np.linspace(-half_width_deg, half_width_deg, side) if side > 1 else np.zeros(1)
    entries = []
    for k in range(n_zones):
        r, c = divmod(k, side)
        entries.append((f"Z{k + 1:03d}", (center[0] + offs[r], center[1] + offs[c])))
    return ZoneRegistry(entries)


@dataclass
class Fixture:
    persons_csv: str
    trips_csv: str
    zones_csv: str
    ground_truth: dict

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, text in (("persons.csv", self.persons_csv), ("trips.csv", self.trips_csv),
                           ("zones.csv", self.zones_csv),
                           ("ground_truth.json", json.dumps(self.ground_truth, indent=2,
                                                            sort_keys=True))):
            (out / name).write_text(text, encoding="utf-8")
            paths[name] = str(out / name)
        return paths


def generate_fixture(seed: int, n_persons: int, n_zones: int, n_max: int = 4,
                     bins: int = 30, decay_km: float = 3.0, stop: float = 0.5) -> Fixture:
    """Persons, chains and zones from a declared joint distribution.

    Zones sit on a square grid around the Brisbane CBD. Each person's home
    zone drives their industry (inner and outer rings favour different
    industries), age and sex depend on industry, and the trip chain starts
    at home and follows a distance-decaying Markov chain. Ground-truth
    marginals, chain-length and trip-length distributions are returned
    alongside.
    """
    if n_persons < 10 or n_zones < 4:
        raise ValueError("need n_persons >= 10 and n_zones >= 4")
    rng = np.random.default_rng(seed)
    zones = grid_zones(n_zones)
    lat, lon = zones.coords[:, 0], zones.coords[:, 1]
    d_center = haversine_km(lat, lon, *BRISBANE_CBD)
    ring = d_center / max(d_center.max(), 1e-9)         # 0 centre .. 1 edge

    attract = np.exp(-d_center / 15.0)
    D = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    P = attract[None, :] * np.exp(-D / decay_km)
    np.fill_diagonal(P, 0.0)
    P /= P.sum(axis=1, keepdims=True)
    home_w = 0.5 + ring
    home_w /= home_w.sum()
    chain = MarkovChainSpec(zones.zone_ids, home_w, P, stop, n_max)

    n_ind = len(INDUSTRIES)
    base = 0.85 ** np.arange(n_ind)
    tilt = np.linspace(-1.5, 1.5, n_ind)                 # later industries favour the centre
    ind_logits = np.log(base)[None, :] - np.outer(ring - 0.5, tilt) * 2.0
    ind_p = np.exp(ind_logits)
    ind_p /= ind_p.sum(axis=1, keepdims=True)
    age_mean = 30.0 + 20.0 * np.linspace(0, 1, n_ind) ** 0.5
    male_p = np.clip(0.5 + 0.35 * np.sin(np.arange(n_ind)), 0.1, 0.9)

    homes = rng.choice(n_zones, size=n_persons, p=home_w)
    cum_ind = np.cumsum(ind_p, axis=1)
    industry = np.minimum((cum_ind[homes] < rng.random(n_persons)[:, None]).sum(axis=1),
                          n_ind - 1)
    age = np.clip(np.round(rng.normal(age_mean[industry], 9.0)), 18, 80)
    sex = (rng.random(n_persons) < male_p[industry]).astype(float)
    trajs = chain.sample(n_persons, rng, first=homes, id_prefix="p")
    width = len(str(n_persons - 1))
    ids = tuple(f"p{i:0{width}d}" for i in range(n_persons))

    second = np.array([zones.index(t.tokens[min(1, len(t) - 1)]) for t in trajs])
    jitter = rng.normal(0.0, 0.004, size=(n_persons, 4))
    rows = np.column_stack([
        age, sex, industry,
        lat[homes] + jitter[:, 0], lon[homes] + jitter[:, 1],
        lat[second] + jitter[:, 2], lon[second] + jitter[:, 3],
    ])
    schema = default_schema()
    batch = RecordBatch(schema, rows, ids)

    lengths = trip_lengths(trajs, zones)
    hist = histogram(lengths, bins, (0.0, float(lengths.max()) if lengths.max() > 0 else 1.0))
    chain_len = np.bincount([len(t) for t in trajs], minlength=n_max + 1)[1:]
    truth = {
        "seed": seed, "n_persons": n_persons, "n_zones": n_zones, "n_max": n_max,
        "marginals": {
            "sex": (np.bincount(sex.astype(int), minlength=2) / n_persons).tolist(),
            "industry": (np.bincount(industry, minlength=n_ind) / n_persons).tolist(),
        },
        "chain_length": {"empirical": (chain_len / n_persons).tolist(),
                         "model": chain.length_distribution().tolist()},
        "trip_length_histogram": hist.to_dict(),
        "markov": {"zone_ids": list(zones.zone_ids), "initial": home_w.tolist(),
                   "transition": P.tolist(), "stop": stop},
        "industry_given_zone": ind_p.tolist(),
    }
    return Fixture(batch.to_csv(), trajectories_to_csv(trajs), zones.to_csv(), truth)
