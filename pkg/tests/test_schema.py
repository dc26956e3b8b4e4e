import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popsynth.fixture import generate_fixture
from popsynth.schema import (EARTH_RADIUS_KM, Categorical, Continuous, RecordBatch, SchemaError,
                             TabularSchema, TokenVocabulary, TrajectorySeq, ZoneRegistry,
                             build_vocabulary, default_schema, filter_radius, haversine_km,
                             ingest_population, ingest_trajectories, trajectories_to_csv)

HEADER = "person_id,age,sex,industry,origin_lat,origin_lon,dest_lat,dest_lon\n"
CBD = (-27.4698, 153.0251)


def _row(pid, industry="Construction", lat=CBD[0], lon=CBD[1]):
    return f"{pid},35,Male,{industry},{lat},{lon},{lat},{lon}\n"


def _offset_lat(km):
    # latitude offset for a north-south displacement of ``km``
    return math.degrees(km / EARTH_RADIUS_KM)


# -- zones -------------------------------------------------------------------

def test_zone_registry_roundtrip_and_lookup():
    z = ZoneRegistry([("A", (-27.0, 153.0)), ("B", (-27.5, 153.1))])
    assert z.index("B") == 1
    assert z.centroid("A") == (-27.0, 153.0)
    again = ZoneRegistry.from_csv(z.to_csv().encode())
    assert again.zone_ids == z.zone_ids
    np.testing.assert_allclose(again.coords, z.coords)


def test_zone_registry_rejects_duplicates_and_bad_coords():
    with pytest.raises(SchemaError):
        ZoneRegistry([("A", (0, 0)), ("A", (1, 1))])
    with pytest.raises(SchemaError):
        ZoneRegistry([("A", (91, 0))])
    with pytest.raises(SchemaError):
        ZoneRegistry([("A", (0, 181))])


def test_haversine_one_degree_on_equator():
    expected = EARTH_RADIUS_KM * math.radians(1.0)
    assert haversine_km(0.0, 0.0, 0.0, 1.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(111.19, abs=0.01)


# -- schema ------------------------------------------------------------------

def test_schema_validation():
    with pytest.raises(SchemaError):
        Categorical(("only",))
    with pytest.raises(SchemaError):
        TabularSchema((("a", Continuous()), ("a", Continuous())))
    s = default_schema()
    assert TabularSchema.from_dict(s.to_dict()) == s
    assert s.names[:3] == ["age", "sex", "industry"]


def test_record_batch_rejects_bad_category_index():
    s = TabularSchema((("c", Categorical(("x", "y"))),))
    with pytest.raises(SchemaError):
        RecordBatch(s, [[2.0]], ["p"])
    with pytest.raises(SchemaError):
        RecordBatch(s, [[0.0], [1.0]], ["p", "p"])


# -- population ingestion ---------------------------------------------------

def test_ingest_drops_row_with_missing_industry():
    text = HEADER + _row("a") + "b,40,Female,,1,1,1,1\n" + _row("c")
    batch = ingest_population(text.encode(), default_schema())
    assert len(batch) == 2
    assert batch.n_dropped == 1
    assert batch.row_ids == ("a", "c")


def test_ingest_category_lookup():
    batch = ingest_population((HEADER + _row("a")).encode(), default_schema())
    cats = default_schema().kind("industry").categories
    assert batch.column("industry")[0] == cats.index("Construction")
    assert batch.labels("industry") == ["Construction"]


def test_ingest_unknown_category_dropped():
    batch = ingest_population((HEADER + _row("a", "Piracy") + _row("b")).encode(), default_schema())
    assert batch.row_ids == ("b",)
    assert batch.n_dropped == 1


def test_ingest_header_mismatch():
    with pytest.raises(SchemaError):
        ingest_population(b"person_id,age\n1,2\n", default_schema())


def test_ingest_is_deterministic_and_roundtrips():
    fx = generate_fixture(1, 50, 9)
    a = ingest_population(fx.persons_csv.encode(), default_schema())
    b = ingest_population(fx.persons_csv.encode(), default_schema())
    assert a == b
    assert a.to_csv() == fx.persons_csv


# -- trajectories ------------------------------------------------------------

ZONES = ZoneRegistry([(z, (-27.4 - 0.01 * i, 153.0)) for i, z in enumerate("ABCDE")])


def test_ingest_trajectories_caps_and_orders():
    text = ("person_id,seq_index,zone_id\n"
            "p,2,B\np,1,A\np,3,C\np,4,D\n"
            "q,1,A\nq,2,B\nq,3,C\nq,4,D\nq,5,E\n")
    trajs, stats = ingest_trajectories(text, ZONES, 4, return_stats=True)
    assert [t.tokens for t in trajs] == [("A", "B", "C", "D")]
    assert stats["persons_too_long"] == 1


def test_ingest_trajectories_rejects_unknown_zone_and_gaps():
    text = ("person_id,seq_index,zone_id\n"
            "p,1,A\np,2,NOPE\n"
            "q,1,A\nq,3,B\n"
            "r,1,E\n")
    trajs, stats = ingest_trajectories(text, ZONES, 4, return_stats=True)
    assert [t.person_id for t in trajs] == ["r"]
    assert stats["rows_rejected"] == 1
    assert stats["persons_rejected"] == 1
    assert stats["persons_noncontiguous"] == 1


def test_ingest_trajectories_empty():
    assert ingest_trajectories(b"", ZONES, 4) == []
    assert ingest_trajectories("person_id,seq_index,zone_id\n", ZONES, 4) == []


def test_trajectory_csv_roundtrip():
    trajs = [TrajectorySeq("a", ("A", "B")), TrajectorySeq("b", ("E",))]
    assert ingest_trajectories(trajectories_to_csv(trajs), ZONES, 4) == trajs


# -- radius filter -----------------------------------------------------------

def test_filter_radius_boundaries():
    lat41 = CBD[0] + _offset_lat(41.0)
    text = HEADER + _row("centre") + _row("far", lat=lat41)
    batch = ingest_population(text, default_schema())
    trajs = [TrajectorySeq("centre", ("A",)), TrajectorySeq("far", ("A",))]
    kept, kt = filter_radius(batch, trajs, ZONES, CBD, 40.0)
    assert kept.row_ids == ("centre",)
    assert [t.person_id for t in kt] == ["centre"]


def test_filter_radius_fixture_against_independent_distance():
    rng = np.random.default_rng(3)
    n = 100
    far = set(rng.choice(n, 10, replace=False).tolist())
    lines = [HEADER]
    for i in range(n):
        km = rng.uniform(45, 80) if i in far else rng.uniform(0, 35)
        bearing = rng.uniform(0, 2 * math.pi)
        lat = CBD[0] + _offset_lat(km * math.cos(bearing))
        lon = CBD[1] + _offset_lat(km * math.sin(bearing)) / math.cos(math.radians(lat))
        lines.append(_row(f"p{i}", lat=f"{lat:.8f}", lon=f"{lon:.8f}"))
    batch = ingest_population("".join(lines), default_schema())
    trajs = [TrajectorySeq(f"p{i}", ("A",)) for i in range(n)]
    kept, kt = filter_radius(batch, trajs, ZONES, CBD, 40.0)
    assert len(kept) == 90 == len(kt)

    # second path: spherical law of cosines
    def dist(lat, lon):
        p1, p2 = math.radians(CBD[0]), math.radians(lat)
        dl = math.radians(lon - CBD[1])
        c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
        return EARTH_RADIUS_KM * math.acos(min(1.0, c))

    expect = {rid for rid, la, lo in zip(batch.row_ids, batch.column("origin_lat"),
                                         batch.column("origin_lon")) if dist(la, lo) <= 40.0}
    assert set(kept.row_ids) == expect
    again, _ = filter_radius(kept, kt, ZONES, CBD, 40.0)
    assert again == kept


# -- vocabulary --------------------------------------------------------------

def test_vocabulary_layout():
    trajs = [TrajectorySeq("a", ("St. Lucia", "Kenmore")), TrajectorySeq("b", ("Kenmore",))]
    v = build_vocabulary(trajs)
    assert len(v) == 5
    assert v.pad == 0 and v.tokens[:3] == ("<pad>", "<bos>", "<eos>")
    assert v.zone_tokens == ("Kenmore", "St. Lucia")
    assert v.decode(v.encode(["Kenmore"])) == ["Kenmore"]


def test_vocabulary_empty_raises():
    with pytest.raises(ValueError):
        build_vocabulary([])


def test_vocabulary_fixture_with_50_zones():
    fx = generate_fixture(0, 3000, 50)
    zones = ZoneRegistry.from_csv(fx.zones_csv)
    trajs = ingest_trajectories(fx.trips_csv, zones, 4)
    distinct = {z for t in trajs for z in t.tokens}
    assert len(build_vocabulary(trajs)) == len(distinct) + 3
    assert len(distinct) == 50


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=4), min_size=1),
       st.randoms())
def test_vocabulary_order_independent(chains, rnd):
    trajs = [TrajectorySeq(str(i), tuple(c)) for i, c in enumerate(chains)]
    shuffled = list(trajs)
    rnd.shuffle(shuffled)
    assert build_vocabulary(trajs) == build_vocabulary(shuffled)
    v = build_vocabulary(trajs)
    assert sorted(v._index.values()) == list(range(len(v)))
    assert isinstance(v, TokenVocabulary)
