import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from _oracles import brute_force_assignment
from popsynth.fixture import generate_fixture
from popsynth.matcher import (Assignment, OriginMatcher, build_cost_matrix, hungarian, join_real,
                              merge)
from popsynth.schema import (Continuous, RecordBatch, TabularSchema, TrajectorySeq, ZoneRegistry,
                             default_schema, ingest_population, ingest_trajectories)

XY = TabularSchema((("origin_lat", Continuous()), ("origin_lon", Continuous())))


def _pop(coords):
    return RecordBatch(XY, np.asarray(coords, dtype=float), [f"p{i}" for i in range(len(coords))])


# -- cost matrix -------------------------------------------------------------

def test_cost_trivial_cases():
    zones = ZoneRegistry([("A", (0.0, 0.0)), ("B", (3.0, 4.0))])
    trajs = [TrajectorySeq("a", ("A", "B")), TrajectorySeq("b", ("B",))]
    c = build_cost_matrix(_pop([(0, 0), (3, 4)]), trajs, zones)
    np.testing.assert_allclose(c, [[0.0, 5.0], [5.0, 0.0]], rtol=1e-15)


def test_cost_errors():
    zones = ZoneRegistry([("A", (0.0, 0.0))])
    with pytest.raises(ValueError):
        build_cost_matrix(_pop([(0, 0)]), [], zones)
    with pytest.raises(KeyError):
        build_cost_matrix(_pop([(0, 0)]), [TrajectorySeq("a", ("Z",))], zones)


def test_fixture_cost_matrix_matches_independent_computation():
    fx = generate_fixture(4, 10, 12)
    zones = ZoneRegistry.from_csv(fx.zones_csv)
    pop = ingest_population(fx.persons_csv, default_schema())
    trajs = ingest_trajectories(fx.trips_csv, zones, 4)[:10]
    c = build_cost_matrix(pop, trajs, zones)
    lookup = dict(zip(zones.zone_ids, map(tuple, zones.coords)))
    for i in range(10):
        for j in range(10):
            la, lo = lookup[trajs[j].tokens[0]]
            d = np.hypot(pop.column("origin_lat")[i] - la, pop.column("origin_lon")[i] - lo)
            assert c[i, j] == pytest.approx(d, rel=1e-12, abs=1e-15)


def test_destination_weight_extension():
    zones = ZoneRegistry([("A", (0.0, 0.0)), ("B", (0.0, 1.0))])
    schema = TabularSchema(tuple((n, Continuous()) for n in
                                 ("origin_lat", "origin_lon", "dest_lat", "dest_lon")))
    pop = RecordBatch(schema, [[0, 0, 0, 1], [0, 0, 0, 0]], ["x", "y"])
    trajs = [TrajectorySeq("a", ("A",)), TrajectorySeq("b", ("A", "B"))]
    assert np.all(build_cost_matrix(pop, trajs, zones) == 0)
    c = build_cost_matrix(pop, trajs, zones, dest_weight=2.0)
    np.testing.assert_allclose(c, [[2.0, 0.0], [0.0, 2.0]])
    assert hungarian(c).perm.tolist() == [1, 0]


# -- assignment --------------------------------------------------------------

def test_worked_example():
    a = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert a.total_cost == 5
    assert a.perm.tolist() == [1, 0, 2]


def test_identity_favouring():
    c = 1 - np.eye(6)
    a = hungarian(c)
    assert a.perm.tolist() == list(range(6)) and a.total_cost == 0


def test_degenerate_sizes_and_errors():
    assert hungarian(np.zeros((0, 0))).total_cost == 0
    a = hungarian([[7.5]])
    assert a.perm.tolist() == [0] and a.total_cost == 7.5
    for bad in ([[1, 2]], [[-1.0]], [[np.inf]], [[np.nan]]):
        with pytest.raises(ValueError):
            hungarian(bad)
    with pytest.raises(ValueError):
        Assignment([0, 0], 0.0)


def test_ties_resolved_deterministically():
    a = hungarian(np.ones((5, 5)))
    assert a.perm.tolist() == hungarian(np.ones((5, 5))).perm.tolist()
    assert a.total_cost == 5


def test_random_6x6_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = rng.random((6, 6)) * rng.choice([1, 10, 1000])
        assert hungarian(c).total_cost == pytest.approx(brute_force_assignment(c), rel=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 7).flatmap(
    lambda n: arrays(float, (n, n), elements=st.floats(0, 100, allow_subnormal=False))))
def test_optimal_for_small_n(c):
    a = hungarian(c)
    n = c.shape[0]
    assert sorted(a.perm.tolist()) == list(range(n))
    assert a.total_cost == pytest.approx(c[np.arange(n), a.perm].sum(), rel=1e-12)
    assert a.total_cost <= brute_force_assignment(c) + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.floats(0.01, 100.0),
       st.floats(0, 50.0), st.booleans())
def test_scale_and_shift_invariance(n, seed, scale, shift, on_row):
    c = np.random.default_rng(seed).random((n, n))
    a = hungarian(c)
    b = hungarian(scale * c)
    assert b.perm.tolist() == a.perm.tolist()
    assert b.total_cost == pytest.approx(scale * a.total_cost, rel=1e-9)
    k = seed % n
    d = c.copy()
    if on_row:
        d[k] += shift
    else:
        d[:, k] += shift
    assert hungarian(d).perm.tolist() == a.perm.tolist()


def test_agrees_with_scipy_on_medium_instances():
    rng = np.random.default_rng(1)
    for n in (50, 200):
        c = rng.random((n, n))
        r, col = linear_sum_assignment(c)
        assert hungarian(c).total_cost == pytest.approx(c[r, col].sum(), rel=1e-12)


def test_2000_instance_under_30s():
    c = np.random.default_rng(2).random((2000, 2000))
    hungarian(c[:5, :5])      # compile outside the timed region
    t0 = time.perf_counter()
    a = hungarian(c)
    elapsed = time.perf_counter() - t0
    r, col = linear_sum_assignment(c)
    assert a.total_cost == pytest.approx(c[r, col].sum(), rel=1e-12)
    assert elapsed < 30


# -- merge -------------------------------------------------------------------

def _chains(rng, n, zones):
    return [TrajectorySeq(f"t{i}", tuple(rng.choice(zones, rng.integers(1, 5))))
            for i in range(n)]


def test_merge_single_pair():
    zones = ZoneRegistry([("A", (1.0, 1.0))])
    t = [TrajectorySeq("t", ("A",))]
    comp = OriginMatcher().fit(zones).merge(_pop([(0, 0)]), t)
    assert len(comp) == 1 and comp.trajectories == tuple(t)


def test_merge_preserves_multiset():
    rng = np.random.default_rng(3)
    ids = [f"Z{i}" for i in range(8)]
    zones = ZoneRegistry([(z, tuple(rng.uniform(-1, 1, 2))) for z in ids])
    pop = _pop(rng.uniform(-1, 1, (300, 2)))
    trajs = _chains(rng, 300, ids)
    comp = OriginMatcher().fit(zones).merge(pop, trajs)
    assert len(comp) == 300
    assert Counter(comp.trajectories) == Counter(trajs)
    assert comp.population is pop


def test_merge_size_mismatch():
    pop = _pop([(0, 0), (1, 1)])
    trajs = [TrajectorySeq("a", ("A",))]
    with pytest.raises(ValueError):
        merge(pop, trajs, Assignment([0, 1], 0.0))


def test_composite_csv_layout():
    schema = default_schema()
    pop = ingest_population("person_id,age,sex,industry,origin_lat,origin_lon,dest_lat,dest_lon\n"
                            "x,30,Male,Construction,-27.5,153.0,-27.4,153.1\n", schema)
    comp = join_real(pop, [TrajectorySeq("x", ("A", "B"))])
    lines = comp.to_csv().splitlines()
    assert lines[0] == ("person_id,age,sex,industry,origin_lat,origin_lon,dest_lat,dest_lon,"
                        "loc_1,loc_2,loc_3,loc_4")
    assert lines[1].startswith("x,") and lines[1].endswith(",A,B,,")
    with pytest.raises(ValueError):
        join_real(pop, [TrajectorySeq("y", ("A",))])
