"""Stage-by-stage orchestration of ingestion, training, sampling, merging and evaluation.

Every stage reads its inputs from, and writes its outputs to, the run's
output directory, so any later stage can be rerun from earlier artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .gan import CTGANSynthesizer
from .matcher import build_cost_matrix, hungarian, join_real, merge
from .metrics import evaluate
from .schema import (TabularSchema, ZoneRegistry, align, default_schema, filter_radius,
                     ingest_population, ingest_trajectories, trajectories_to_csv)
from .seqgen import SamplerConfig, SeqModel, SeqTrainConfig, sample_trajectories, train_seq
from .transforms import DataTransformer

logger = logging.getLogger(__name__)

STAGES = ("ingest", "fit-transforms", "train-tabular", "train-seq", "sample", "merge", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class DataPaths:
    persons: str = "persons.csv"
    trips: str = "trips.csv"
    zones: str = "zones.csv"


@dataclass
class FilterConfig:
    center: tuple = (-27.4698, 153.0251)
    radius_km: float = 40.0


@dataclass
class TabularConfig:
    epochs: int = 300
    batch_size: int = 10
    pac: int = 10
    latent_dim: int = 128
    generator_dim: tuple = (512, 512, 512)
    discriminator_dim: tuple = (512, 512, 512)
    lr: float = 2e-4
    betas: tuple = (0.5, 0.9)
    tau: float = 0.2
    cond_weight: float = 1.0
    n_modes: int = 10


@dataclass
class SequenceConfig:
    epochs: int = 300
    batch_size: int = 10
    lr: float = 2e-3
    clip_norm: float = 5.0
    holdout: float = 0.1
    embedding_dim: int = 100
    hidden_dim: int = 128
    attention_dim: int = 64
    restore_best: bool = False
    patience: int | None = None
    ema: float | None = 0.999


@dataclass
class SamplingConfig:
    n_samples: int | None = None      # None: as many as ingested persons
    temperature: float = 0.7


@dataclass
class MetricsConfig:
    bins: int = 30
    cell_deg: float = 0.05
    category_column: str = "industry"


@dataclass
class PipelineConfig:
    data: DataPaths = field(default_factory=DataPaths)
    schema: dict | None = None
    filter: FilterConfig = field(default_factory=FilterConfig)
    n_max: int = 4
    tabular: TabularConfig = field(default_factory=TabularConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    sampler: SamplingConfig = field(default_factory=SamplingConfig)
    dest_weight: float = 0.0
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    out: str = "out"
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            sub = getattr(self, f.name)
            if isinstance(sub, dict) and f.name != "schema":
                setattr(self, f.name, _SECTIONS[f.name](**sub))
        for name in ("generator_dim", "discriminator_dim", "betas"):
            setattr(self.tabular, name, tuple(getattr(self.tabular, name)))
        self.filter.center = tuple(self.filter.center)
        if self.n_max < 1 or self.threads < 1:
            raise ValueError("n_max and threads must be positive")
        if self.sampler.n_samples is not None and self.sampler.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.sampler.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def from_dict(cls, d, base_dir=None) -> "PipelineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if base_dir is not None:
            base = Path(base_dir)
            for f in fields(DataPaths):
                p = Path(getattr(cfg.data, f.name))
                if not p.is_absolute():
                    setattr(cfg.data, f.name, str(base / p))
            if not Path(cfg.out).is_absolute():
                cfg.out = str(base / cfg.out)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def table_schema(self) -> TabularSchema:
        return TabularSchema.from_dict(self.schema) if self.schema else default_schema()


_SECTIONS = {"data": DataPaths, "filter": FilterConfig, "tabular": TabularConfig,
             "sequence": SequenceConfig, "sampler": SamplingConfig, "metrics": MetricsConfig}


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed from the master seed and the stage name."""
    h = hashlib.sha256(f"{int(master)}:{stage}".encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Pipeline:
    """Runs stages against an output directory and records a manifest."""

    def __init__(self, config: PipelineConfig):
        self.cfg = config
        self.out = Path(config.out)
        self.schema = config.table_schema()
        self.manifest = {"config_sha256": config.digest(), "config": config.to_dict(),
                         "seeds": {s: stage_seed(config.seed, s) for s in STAGES},
                         "versions": {"popsynth": __version__, "numpy": np.__version__,
                                      "python": platform.python_version()},
                         "threads": config.threads, "stages": {}, "artifacts": {}}
        previous = self.path("manifest.json")
        if previous.exists():
            try:
                old = json.loads(previous.read_text())
            except ValueError:
                old = {}
            if old.get("config_sha256") == self.manifest["config_sha256"]:
                self.manifest["stages"].update(old.get("stages", {}))
                self.manifest["artifacts"].update(old.get("artifacts", {}))

    def path(self, name) -> Path:
        return self.out / name

    def _write(self, name, text):
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        self.manifest["artifacts"][name] = sha256_file(p)

    def _record(self, name):
        self.manifest["artifacts"][name] = sha256_file(self.path(name))

    def _zones(self):
        return ZoneRegistry.from_csv(Path(self.cfg.data.zones).read_bytes())

    def _read_population(self, name):
        return ingest_population(self.path(name).read_bytes(), self.schema)

    def _read_trajs(self, name, zones):
        return ingest_trajectories(self.path(name).read_bytes(), zones, self.cfg.n_max)

    # -- stages ------------------------------------------------------------

    def ingest(self):
        cfg = self.cfg
        zones = self._zones()
        pop = ingest_population(Path(cfg.data.persons).read_bytes(), self.schema)
        trajs, stats = ingest_trajectories(Path(cfg.data.trips).read_bytes(), zones, cfg.n_max,
                                           return_stats=True)
        n_pop, n_traj = len(pop), len(trajs)
        pop, trajs = align(pop, trajs)
        n_joined = len(pop)
        pop, trajs = filter_radius(pop, trajs, zones, cfg.filter.center, cfg.filter.radius_km)
        if len(pop) == 0:
            raise ValueError("no persons left after ingestion and filtering")
        self._write("population.csv", pop.to_csv())
        self._write("trajectories.csv", trajectories_to_csv(trajs))
        stats.update({"population_rows": n_pop, "population_dropped": pop.n_dropped,
                      "trajectories": n_traj, "joined": n_joined, "retained": len(pop)})
        self._write("ingest_stats.json", json.dumps(stats, indent=2, sort_keys=True))

    def fit_transforms(self):
        pop = self._read_population("population.csv")
        enc = DataTransformer(n_modes=self.cfg.tabular.n_modes).fit(pop)
        self._write("transformer.json", enc.to_json())

    def train_tabular(self):
        t = self.cfg.tabular
        pop = self._read_population("population.csv")
        enc = DataTransformer.from_json(self.path("transformer.json").read_text())
        model = CTGANSynthesizer(**asdict(t), random_state=self.manifest["seeds"]["train-tabular"])
        model.fit(pop, transformer=enc)
        model.save(self.path("tabular_model.npz"))
        self._record("tabular_model.npz")
        self._write("tabular_loss.csv", _trace_csv(model.loss_trace_, ("epoch", "d_loss", "g_loss")))

    def train_seq(self):
        zones = self._zones()
        trajs = self._read_trajs("trajectories.csv", zones)
        s = self.cfg.sequence
        res = train_seq(trajs, SeqTrainConfig(**asdict(s), n_max=self.cfg.n_max,
                                              seed=self.manifest["seeds"]["train-seq"]))
        res.model.save(self.path("seq_model.npz"))
        self._record("seq_model.npz")
        self._write("seq_loss.csv", _trace_csv(res.trace, ("epoch", "train_loss", "holdout_loss")))

    def sample(self):
        zones = self._zones()
        n = self.cfg.sampler.n_samples
        if n is None:
            n = len(self._read_population("population.csv"))
        seed = self.manifest["seeds"]["sample"]
        gan = CTGANSynthesizer.load(self.path("tabular_model.npz"))
        pop = gan.sample(n, random_state=np.random.default_rng([seed, 0]))
        model, _ = SeqModel.load(self.path("seq_model.npz"))
        for z in model.vocab.zone_tokens:
            zones.index(z)
        trajs = sample_trajectories(model, n, SamplerConfig(self.cfg.sampler.temperature,
                                                            self.cfg.n_max),
                                    np.random.default_rng([seed, 1]))
        self._write("synthetic_population.csv", pop.to_csv())
        self._write("synthetic_trips.csv", trajectories_to_csv(trajs))

    def merge(self):
        zones = self._zones()
        pop = self._read_population("synthetic_population.csv")
        trajs = self._read_trajs("synthetic_trips.csv", zones)
        order = {t.person_id: t for t in trajs}
        trajs = [order[k] for k in sorted(order)]
        costs = build_cost_matrix(pop, trajs, zones, self.cfg.dest_weight)
        assignment = hungarian(costs)
        composite = merge(pop, trajs, assignment)
        if sorted(t.tokens for t in composite.trajectories) != sorted(t.tokens for t in trajs):
            raise AssertionError("merge changed the multiset of chains")
        self._write("composite.csv", composite.to_csv(self.cfg.n_max))
        self._write("assignment.csv", "population_id,trajectory_id,cost\n" + "".join(
            f"{pop.row_ids[i]},{trajs[j].person_id},{costs[i, j]:.9f}\n"
            for i, j in enumerate(assignment.perm)))
        self.manifest["stages"].setdefault("merge", {})["total_cost"] = assignment.total_cost

    def evaluate(self):
        zones = self._zones()
        real = join_real(self._read_population("population.csv"),
                         self._read_trajs("trajectories.csv", zones))
        synth = read_composite(self.path("composite.csv").read_text(), self.schema, zones,
                               self.cfg.n_max)
        m = self.cfg.metrics
        report, grid = evaluate(real, synth, zones, m.bins, m.cell_deg, m.category_column)
        self._write("eval_report.json", json.dumps(report, indent=2, sort_keys=True))
        self._write("spatial_grid.csv", grid.to_csv())
        return report

    # -- driver ------------------------------------------------------------

    def run_stage(self, stage):
        fn = getattr(self, stage.replace("-", "_"))
        self.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        try:
            with threadpool_limits(limits=self.cfg.threads):
                result = fn()
        except Exception as exc:
            self.write_manifest()
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        self.manifest["stages"].setdefault(stage, {})["seconds"] = time.perf_counter() - t0
        logger.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
        return result

    def write_manifest(self):
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.path("manifest.json")
        p.write_text(json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8")
        return self.manifest

    def run(self, stages=STAGES):
        for s in stages:
            self.run_stage(s)
        return self.write_manifest()


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute every stage in order; returns the run manifest."""
    return Pipeline(config).run()


def read_composite(text, schema: TabularSchema, zones: ZoneRegistry, n_max: int):
    """Parse a composite CSV back into a :class:`CompositeTable`."""
    from .matcher import CompositeTable
    from .schema import TrajectorySeq
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    n_pop = 1 + len(schema.columns)
    pop_csv = io.StringIO()
    w = csv.writer(pop_csv, lineterminator="\n")
    w.writerow(header[:n_pop])
    for r in body:
        w.writerow(r[:n_pop])
    pop = ingest_population(pop_csv.getvalue(), schema)
    if len(pop) != len(body):
        raise ValueError("composite has incomplete population rows")
    trajs = []
    for r in body:
        toks = tuple(z for z in r[n_pop:n_pop + n_max] if z)
        for z in toks:
            zones.index(z)
        trajs.append(TrajectorySeq(r[0], toks))
    return CompositeTable(pop, tuple(trajs))


def _trace_csv(trace, cols):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for e in trace:
        w.writerow([e["epoch"], *(f"{e[c]:.9f}" if c in e else "" for c in cols[1:])])
    return buf.getvalue()
