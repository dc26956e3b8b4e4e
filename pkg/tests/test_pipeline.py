import json

import numpy as np
import pytest

from popsynth.cli import main
from popsynth.fixture import generate_fixture
from popsynth.pipeline import STAGES, Pipeline, PipelineConfig, StageError, stage_seed

TINY = {
    "tabular": {"epochs": 2, "batch_size": 20, "pac": 10, "latent_dim": 8,
                "generator_dim": [16], "discriminator_dim": [16], "n_modes": 3},
    "sequence": {"epochs": 2, "embedding_dim": 8, "hidden_dim": 8, "attention_dim": 8},
}


def _config(tmp_path, name="cfg.json", **over):
    if not (tmp_path / "persons.csv").exists():
        generate_fixture(0, 120, 16).write(tmp_path)
    d = {"data": {"persons": "persons.csv", "trips": "trips.csv", "zones": "zones.csv"},
         **TINY, "seed": 3, "out": "run"}
    d.update(over)
    (tmp_path / name).write_text(json.dumps(d))
    return tmp_path / name


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("runs")
    outs = []
    for k in range(2):
        cfg = PipelineConfig.load(_config(tmp, out=f"run{k}"))
        Pipeline(cfg).run()
        outs.append(tmp / f"run{k}")
    return outs


def test_runs_are_byte_identical(two_runs):
    a, b = two_runs
    for name in ("composite.csv", "eval_report.json", "synthetic_population.csv",
                 "synthetic_trips.csv", "assignment.csv", "spatial_grid.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_manifest_lists_hashed_artifacts(two_runs):
    m = json.loads((two_runs[0] / "manifest.json").read_text())
    assert set(m["stages"]) == set(STAGES)
    assert len(m["artifacts"]) >= 5
    for name, digest in m["artifacts"].items():
        assert (two_runs[0] / name).exists() and len(digest) == 64
    assert m["seeds"]["sample"] == stage_seed(3, "sample")


def test_composite_has_one_row_per_person(two_runs):
    rows = (two_runs[0] / "composite.csv").read_text().splitlines()
    pop = (two_runs[0] / "population.csv").read_text().splitlines()
    assert len(rows) == len(pop)
    assert rows[0].endswith("loc_1,loc_2,loc_3,loc_4")


def test_rerun_stage_from_checkpoints(two_runs):
    out = two_runs[0]
    before = (out / "composite.csv").read_bytes()
    cfg = PipelineConfig.load(out.parent / "cfg.json")
    cfg.out = str(out)
    pipe = Pipeline(cfg)
    pipe.run_stage("merge")
    pipe.run_stage("evaluate")
    assert (out / "composite.csv").read_bytes() == before
    assert set(pipe.write_manifest()["stages"]) == set(STAGES)


def test_n_samples(tmp_path):
    cfg = PipelineConfig.load(_config(tmp_path, sampler={"n_samples": 100}))
    Pipeline(cfg).run()
    assert len((tmp_path / "run" / "composite.csv").read_text().splitlines()) == 101


def test_stage_seeds_are_independent():
    seeds = {stage_seed(0, s) for s in STAGES}
    assert len(seeds) == len(STAGES)
    assert stage_seed(0, "sample") != stage_seed(1, "sample")


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(sampler={"temperature": -1})
    with pytest.raises(ValueError):
        PipelineConfig(n_max=0)
    with pytest.raises(TypeError):
        PipelineConfig(tabular={"nope": 1})
    a = PipelineConfig(seed=1)
    assert a.digest() == PipelineConfig(seed=1, out="elsewhere").digest()
    assert a.digest() != PipelineConfig(seed=2).digest()


def test_missing_checkpoint_is_stage_tagged(tmp_path):
    pipe = Pipeline(PipelineConfig.load(_config(tmp_path)))
    with pytest.raises(StageError) as err:
        pipe.run_stage("sample")
    assert err.value.stage == "sample"
    assert (tmp_path / "run" / "manifest.json").exists()


# -- CLI ---------------------------------------------------------------------

def test_cli_fixture_and_run(tmp_path, capsys):
    fx = tmp_path / "fx"
    assert main(["fixture", "--out", str(fx), "--n-persons", "80", "--n-zones", "9",
                 "--seed", "2"]) == 0
    cfg = json.loads((fx / "config.json").read_text())
    cfg.update(TINY)
    (fx / "config.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(fx / "config.json")]) == 0
    out = capsys.readouterr().out
    assert "unconditional" in out and "conditional" in out
    assert (fx / "run" / "eval_report.json").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["ingest", "--config", str(tmp_path / "missing.json")]) == 2
    cfg = _config(tmp_path)
    assert main(["train-tabular", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "train-tabular" in err
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_cli_single_stages_match_run(tmp_path):
    cfg = _config(tmp_path)
    for s in STAGES:
        assert main([s, "--config", str(cfg)]) == 0
    staged = (tmp_path / "run" / "composite.csv").read_bytes()
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "composite.csv").read_bytes() == staged
