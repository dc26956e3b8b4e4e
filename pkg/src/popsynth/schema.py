"""Data model and ingestion for population records, trip chains and zones."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
RESERVED_TOKENS = (PAD, BOS, EOS)

PERSON_ID = "person_id"
PERSONS_HEADER = ("person_id", "age", "sex", "industry",
                  "origin_lat", "origin_lon", "dest_lat", "dest_lon")
TRIPS_HEADER = ("person_id", "seq_index", "zone_id")
ZONES_HEADER = ("zone_id", "centroid_lat", "centroid_lon")


class SchemaError(ValueError):
    """Raised when input data does not conform to the declared layout."""


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometres. Accepts scalars or arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=float))
                              for a in (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def _as_text(data: Union[bytes, str]) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8-sig")
    return data


# --------------------------------------------------------------------------
# Zones
# --------------------------------------------------------------------------

class ZoneRegistry:
    """Mapping from zone id to centroid ``(lat, lon)`` in degrees."""

    def __init__(self, entries: Iterable[tuple[str, tuple[float, float]]]):
        ids, coords = [], []
        for zone_id, (lat, lon) in entries:
            ids.append(str(zone_id))
            coords.append((float(lat), float(lon)))
        if len(set(ids)) != len(ids):
            raise SchemaError("zone ids must be unique")
        arr = np.array(coords, dtype=float).reshape(-1, 2)
        if np.any(np.abs(arr[:, 0]) > 90) or np.any(np.abs(arr[:, 1]) > 180):
            raise SchemaError("zone centroid outside valid lat/lon range")
        arr.setflags(write=False)
        self.zone_ids = tuple(ids)
        self.coords = arr
        self._index = {z: i for i, z in enumerate(ids)}

    def __len__(self):
        return len(self.zone_ids)

    def __contains__(self, zone_id):
        return zone_id in self._index

    def index(self, zone_id: str) -> int:
        try:
            return self._index[zone_id]
        except KeyError:
            raise KeyError(f"unknown zone {zone_id!r}") from None

    def centroid(self, zone_id: str) -> tuple[float, float]:
        lat, lon = self.coords[self.index(zone_id)]
        return float(lat), float(lon)

    def centroids(self, zone_ids: Sequence[str]) -> np.ndarray:
        return self.coords[[self.index(z) for z in zone_ids]]

    @classmethod
    def from_csv(cls, data: Union[bytes, str]) -> "ZoneRegistry":
        reader = csv.reader(io.StringIO(_as_text(data)))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ZONES_HEADER:
            raise SchemaError(f"zones header must be {','.join(ZONES_HEADER)}")
        entries = [(r[0], (float(r[1]), float(r[2]))) for r in reader if r]
        return cls(entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ZONES_HEADER)
        for z, (lat, lon) in zip(self.zone_ids, self.coords):
            w.writerow([z, f"{lat:.6f}", f"{lon:.6f}"])
        return buf.getvalue()


# --------------------------------------------------------------------------
# Tabular schema
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Categorical:
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if len(self.categories) < 2:
            raise SchemaError("categorical column needs at least 2 categories")
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError("duplicate category labels")


@dataclass(frozen=True)
class Continuous:
    unit: str = ""


@dataclass(frozen=True)
class TabularSchema:
    columns: tuple[tuple[str, Union[Categorical, Continuous]], ...]

    def __post_init__(self):
        cols = tuple((str(n), k) for n, k in self.columns)
        object.__setattr__(self, "columns", cols)
        names = [n for n, _ in cols]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        if PERSON_ID in names:
            raise SchemaError(f"{PERSON_ID!r} is reserved for the row identifier")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown column {name!r}") from None

    def kind(self, name: str):
        return self.columns[self.index(name)][1]

    def categorical_indices(self) -> list[int]:
        return [i for i, (_, k) in enumerate(self.columns) if isinstance(k, Categorical)]

    def to_dict(self) -> dict:
        out = []
        for name, kind in self.columns:
            if isinstance(kind, Categorical):
                out.append({"name": name, "kind": "categorical",
                            "categories": list(kind.categories)})
            else:
                out.append({"name": name, "kind": "continuous", "unit": kind.unit})
        return {"columns": out}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        cols = []
        for c in d["columns"]:
            if c["kind"] == "categorical":
                cols.append((c["name"], Categorical(tuple(c["categories"]))))
            elif c["kind"] == "continuous":
                cols.append((c["name"], Continuous(c.get("unit", ""))))
            else:
                raise SchemaError(f"unknown column kind {c['kind']!r}")
        return cls(tuple(cols))


INDUSTRIES = (
    "Agriculture", "Mining", "Manufacturing", "Utilities", "Construction",
    "Wholesale", "Retail", "Hospitality", "Transport", "Media",
    "Finance", "Real Estate", "Professional", "Administrative",
    "Public Administration", "Education", "Health", "Arts", "Other Services",
)


def default_schema(industries: Sequence[str] = INDUSTRIES) -> TabularSchema:
    """Population schema matching the persons.csv layout."""
    return TabularSchema((
        ("age", Continuous("years")),
        ("sex", Categorical(("Female", "Male"))),
        ("industry", Categorical(tuple(industries))),
        ("origin_lat", Continuous("deg")),
        ("origin_lon", Continuous("deg")),
        ("dest_lat", Continuous("deg")),
        ("dest_lon", Continuous("deg")),
    ))


@dataclass(frozen=True, eq=False)
class RecordBatch:
    """Population table. Categorical cells hold category indices as floats."""

    schema: TabularSchema
    rows: np.ndarray
    row_ids: tuple[str, ...]
    n_dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float).reshape(-1, len(self.schema.columns))
        ids = tuple(str(r) for r in self.row_ids)
        if len(ids) != rows.shape[0]:
            raise SchemaError("row_ids length does not match rows")
        if len(set(ids)) != len(ids):
            raise SchemaError("row_ids must be unique")
        if not np.all(np.isfinite(rows)):
            raise SchemaError("missing or non-finite cells")
        for j, (name, kind) in enumerate(self.schema.columns):
            if isinstance(kind, Categorical):
                col = rows[:, j]
                if np.any(col != np.round(col)) or np.any(col < 0) \
                        or np.any(col >= len(kind.categories)):
                    raise SchemaError(f"invalid category index in column {name!r}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "row_ids", ids)

    def __len__(self):
        return self.rows.shape[0]

    def __eq__(self, other):
        return (isinstance(other, RecordBatch) and self.schema == other.schema
                and self.row_ids == other.row_ids and np.array_equal(self.rows, other.rows))

    __hash__ = None

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index(name)]

    def take(self, idx) -> "RecordBatch":
        idx = np.asarray(idx, dtype=int)
        return RecordBatch(self.schema, self.rows[idx],
                           tuple(self.row_ids[i] for i in idx))

    def labels(self, name: str) -> list[str]:
        kind = self.schema.kind(name)
        if not isinstance(kind, Categorical):
            raise SchemaError(f"column {name!r} is not categorical")
        return [kind.categories[int(v)] for v in self.column(name)]

    def to_csv(self, float_fmt: str = ".6f") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((PERSON_ID, *self.schema.names))
        for rid, row in zip(self.row_ids, self.rows):
            w.writerow((rid, *format_cells(self.schema, row, float_fmt)))
        return buf.getvalue()


def format_cells(schema: TabularSchema, row, float_fmt: str = ".6f") -> list[str]:
    out = []
    for (name, kind), v in zip(schema.columns, row):
        if isinstance(kind, Categorical):
            out.append(kind.categories[int(v)])
        else:
            out.append(format(float(v), float_fmt))
    return out


def ingest_population(csv_bytes: Union[bytes, str], schema: TabularSchema) -> RecordBatch:
    """Parse a persons table, dropping rows with missing or unparseable cells."""
    reader = csv.reader(io.StringIO(_as_text(csv_bytes)))
    header = next(reader, None)
    if header is None:
        raise SchemaError("population CSV has no header row")
    header = [h.strip() for h in header]
    expected = {PERSON_ID, *schema.names}
    if set(header) != expected or len(header) != len(expected):
        raise SchemaError(f"header {header} does not match schema columns "
                          f"{[PERSON_ID, *schema.names]}")
    pos = {h: i for i, h in enumerate(header)}
    lookups = [({c: i for i, c in enumerate(k.categories)}
                if isinstance(k, Categorical) else None)
               for _, k in schema.columns]

    rows, ids, seen = [], [], set()
    dropped = unknown = 0
    for rec in reader:
        if not rec:
            continue
        if len(rec) != len(header):
            dropped += 1
            continue
        pid = rec[pos[PERSON_ID]].strip()
        if not pid or pid in seen:
            dropped += 1
            continue
        vals = []
        for (name, kind), lut in zip(schema.columns, lookups):
            cell = rec[pos[name]].strip()
            if cell == "":
                break
            if lut is not None:
                if cell not in lut:
                    unknown += 1
                    break
                vals.append(float(lut[cell]))
            else:
                try:
                    v = float(cell)
                except ValueError:
                    break
                if not math.isfinite(v):
                    break
                vals.append(v)
        if len(vals) != len(schema.columns):
            dropped += 1
            continue
        seen.add(pid)
        ids.append(pid)
        rows.append(vals)
    if unknown:
        logger.warning("dropped %d rows with unknown category labels", unknown)
    if dropped:
        logger.info("dropped %d incomplete population rows", dropped)
    arr = np.array(rows, dtype=float).reshape(-1, len(schema.columns))
    return RecordBatch(schema, arr, tuple(ids), n_dropped=dropped)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySeq:
    person_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 1:
            raise SchemaError("trajectory must contain at least one location")

    def __len__(self):
        return len(self.tokens)


def ingest_trajectories(csv_bytes: Union[bytes, str], zones: ZoneRegistry, n_max: int,
                        return_stats: bool = False):
    """Group a trips table into one chain per person.

    Rows naming an unknown zone are rejected, and so is the chain of any
    person with a rejected row (it would otherwise be silently shortened). Chains longer than ``n_max`` are
    excluded. With ``return_stats`` a dict of rejection counts is also
    returned.
    """
    reader = csv.reader(io.StringIO(_as_text(csv_bytes)))
    header = next(reader, None)
    stats = {"rows_rejected": 0, "persons_rejected": 0, "persons_noncontiguous": 0,
             "persons_too_long": 0}
    if header is None:
        return ([], stats) if return_stats else []
    header = tuple(h.strip() for h in header)
    if set(header) != set(TRIPS_HEADER) or len(header) != 3:
        raise SchemaError(f"trips header must be {','.join(TRIPS_HEADER)}")
    pos = {h: i for i, h in enumerate(header)}

    visits: dict[str, list[tuple[int, str]]] = {}
    bad = set()
    for rec in reader:
        if not rec:
            continue
        pid = rec[pos["person_id"]].strip()
        zone = rec[pos["zone_id"]].strip()
        try:
            k = int(rec[pos["seq_index"]])
        except ValueError:
            k = None
        visits.setdefault(pid, [])
        if k is None or zone not in zones:
            stats["rows_rejected"] += 1
            bad.add(pid)
            continue
        visits[pid].append((k, zone))

    out = []
    for pid, vs in visits.items():
        if pid in bad:
            stats["persons_rejected"] += 1
            continue
        vs.sort(key=lambda t: t[0])
        if not vs or [k for k, _ in vs] != list(range(1, len(vs) + 1)):
            stats["persons_noncontiguous"] += 1
            continue
        if len(vs) > n_max:
            stats["persons_too_long"] += 1
            continue
        out.append(TrajectorySeq(pid, tuple(z for _, z in vs)))
    if any(stats.values()):
        logger.info("trajectory ingestion: %s", stats)
    return (out, stats) if return_stats else out


def trajectories_to_csv(trajs: Sequence[TrajectorySeq]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIPS_HEADER)
    for t in trajs:
        for k, z in enumerate(t.tokens, start=1):
            w.writerow((t.person_id, k, z))
    return buf.getvalue()


def align(batch: RecordBatch, trajs: Sequence[TrajectorySeq]):
    """Inner join on person id, keeping the population row order."""
    by_id = {t.person_id: t for t in trajs}
    keep = [i for i, rid in enumerate(batch.row_ids) if rid in by_id]
    kept = batch.take(keep)
    return kept, [by_id[rid] for rid in kept.row_ids]


def filter_radius(batch: RecordBatch, trajs: Sequence[TrajectorySeq], zones: ZoneRegistry,
                  center: tuple[float, float], radius_km: float,
                  lat_col: str = "origin_lat", lon_col: str = "origin_lon"):
    """Keep persons whose origin lies within ``radius_km`` of ``center``.

    Only the origin is tested. Both outputs are restricted to persons
    present in both inputs.
    """
    d = haversine_km(batch.column(lat_col), batch.column(lon_col), center[0], center[1])
    d = np.atleast_1d(d)
    inside = np.flatnonzero(d <= radius_km)
    return align(batch.take(inside), trajs)


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------

class TokenVocabulary:
    """Reserved tokens first (PAD=0, BOS, EOS), then zone tokens sorted."""

    def __init__(self, zone_tokens: Iterable[str]):
        zs = sorted(set(zone_tokens))
        if any(z in RESERVED_TOKENS for z in zs):
            raise SchemaError("zone token collides with a reserved token")
        self.tokens = (*RESERVED_TOKENS, *zs)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, TokenVocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def zone_tokens(self) -> tuple[str, ...]:
        return self.tokens[len(RESERVED_TOKENS):]


def build_vocabulary(trajs: Sequence[TrajectorySeq]) -> TokenVocabulary:
    if not trajs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return TokenVocabulary(z for t in trajs for z in t.tokens)
