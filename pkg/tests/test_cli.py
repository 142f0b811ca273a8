from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from adaptive_iris.cli import EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, EXIT_RUNTIME, main
from adaptive_iris.dataset import IrisDataset, render_strips
from adaptive_iris.evaluation import EvalReport
from adaptive_iris.experiment import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    Experiment,
    ExperimentConfig,
    run_pipeline,
    run_plot,
    run_stage,
)
from adaptive_iris.model import PrerequisiteError
from adaptive_iris.plots import table_matches_report
from adaptive_iris.synthetic import SyntheticIrisSpec, generate_synthetic_dataset
from adaptive_iris.training import GateLabelMap

from conftest import TINY_CONFIG


def tree_hashes(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def read_tsv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


@pytest.fixture
def tiny_yaml(tmp_path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG), encoding="utf-8")
    return path


# --- config ------------------------------------------------------------------------------------

def test_presets_resolve():
    desk = ExperimentConfig.from_preset("desk")
    desk.validate()
    assert desk.stages["HR_SHARED"].total_iterations == 300
    full = ExperimentConfig.from_preset("paper-shape")
    assert full.stages["HR_SHARED"].total_iterations == 30000
    assert full.backbone != desk.backbone
    with pytest.raises(ConfigError):
        ExperimentConfig.from_preset("huge")


def test_seed_reaches_every_stage():
    cfg = ExperimentConfig.from_preset("desk").with_seed(11)
    assert cfg.seed == 11 and {s.seed for s in cfg.stages.values()} == {11}
    assert ExperimentConfig.from_dict(TINY_CONFIG, seed=5).stages["GATING"].seed == 5


def test_yaml_round_trip(tiny_config):
    again = ExperimentConfig.from_dict(yaml.safe_load(tiny_config.to_yaml()))
    assert again == tiny_config


def test_overlay_keeps_unspecified_fields(tiny_config):
    assert tiny_config.stages["HR_SHARED"].lr == 0.1
    assert tiny_config.stages["HR_SHARED"].total_iterations == 6
    assert tiny_config.data.synthetic.num_identities == 4
    assert tiny_config.data.synthetic.image_size == SyntheticIrisSpec().image_size


@pytest.mark.parametrize("bad", [{"unknown": 1}, {"preset": "huge"}, {"policies": ["coin"]},
                                 {"data": {"holdout_per_identity": 1}}, {"stages": {"GATING": {"batch_size": 0}}}])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_output_root_override(monkeypatch, tmp_path):
    cfg = ExperimentConfig.from_preset("desk")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cfg.resolved_out_dir() == tmp_path / "runs" / "desk"
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert cfg.resolved_out_dir() == Path("runs/desk")


# --- synthetic data ----------------------------------------------------------------------------

def test_synthetic_manifest_rows_and_determinism(tmp_path):
    spec = SyntheticIrisSpec(num_identities=20, samples_per_identity=10, image_size=200,
                             iris_radius_range=(70.0, 80.0), center_jitter=4.0)
    a = generate_synthetic_dataset(spec, tmp_path / "a")
    b = generate_synthetic_dataset(spec, tmp_path / "b")
    assert len(a.read_text().splitlines()) == 1 + 200
    assert a.read_bytes() == b.read_bytes()
    assert tree_hashes(a.parent) == tree_hashes(b.parent)
    c = generate_synthetic_dataset(SyntheticIrisSpec(num_identities=20, samples_per_identity=10, image_size=200,
                                                     iris_radius_range=(70.0, 80.0), center_jitter=4.0, seed=1),
                                   tmp_path / "c")
    assert a.read_bytes() != c.read_bytes()


def test_identities_have_distinct_textures(small_dataset):
    strips = render_strips(small_dataset, range(len(small_dataset))).numpy()[:, 0].astype(np.float64)
    ids = small_dataset.identities
    means = np.stack([strips[ids == k].mean(axis=0) for k in np.unique(ids)])
    between = min(np.sqrt(np.mean((means[i] - means[j]) ** 2))
                  for i in range(len(means)) for j in range(i + 1, len(means)))
    within = max(np.sqrt(np.mean((strips[i] - means[ids[i]]) ** 2)) for i in range(len(strips)))
    assert between > 0.02
    assert between > 0.5 * within


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("path,identity\nx.png,a\n", encoding="utf-8")
    with pytest.raises(ValueError):
        IrisDataset.from_manifest(bad)


# --- stages ------------------------------------------------------------------------------------

def test_stage_prerequisites(tiny_config, tmp_path):
    with pytest.raises(PrerequisiteError, match="manifest"):
        run_stage(tiny_config, "stage1", tmp_path)
    with Experiment(tiny_config, tmp_path) as exp:
        exp.prepare()
    with pytest.raises(PrerequisiteError, match="stage1"):
        run_stage(tiny_config, "expert_mr", tmp_path)
    with pytest.raises(PrerequisiteError, match="expert_mr, expert_lr"):
        run_stage(tiny_config, "gating", tmp_path)
    with pytest.raises(ConfigError):
        run_stage(tiny_config, "stage9", tmp_path)


def test_pipeline_artifacts(tiny_run):
    cfg, root = tiny_run
    with Experiment(cfg, root) as exp:
        digests = exp.digests()
        assert set(digests) == {"stage1/HR_expert", "stage1/shared", "stage1/arcface", "expert_mr/MR_expert",
                                "expert_lr/LR_expert", "gating/gating"}
        for st in ("stage1", "expert_mr", "expert_lr", "gating"):
            assert exp.stage_done(st) and exp.log_path(st).exists()
    labels = GateLabelMap.load(root / "checkpoints" / "gating" / "gate_labels.json")
    assert labels.labels.shape == (2, 2)
    saved = yaml.safe_load((root / "config.yaml").read_text())
    assert ExperimentConfig.from_dict(saved) == cfg


def test_rerun_reproduces_digests(tiny_run):
    cfg, root = tiny_run
    with Experiment(cfg, root) as exp:
        before = exp.digests()
    run_stage(cfg, "stage1", root)
    run_stage(cfg, "expert_mr", root)
    with Experiment(cfg, root) as exp:
        assert exp.digests() == before


def test_every_file_is_byte_reproducible(tiny_run, tmp_path):
    cfg, root = tiny_run
    run_pipeline(cfg, tmp_path / "again")
    a, b = tree_hashes(root), tree_hashes(tmp_path / "again")
    assert set(a) == set(b)
    differing = {k for k in a if a[k] != b[k]}
    assert differing <= {"run_info.json"}  # timestamps live only in the sidecar


def test_plot_tables_match_report(tiny_run):
    cfg, root = tiny_run
    (report_path,) = (root / "reports").glob("sweep_*.tsv")
    report = EvalReport.from_tsv(report_path)
    tables = sorted((root / "plots").glob("eer_vs_*.tsv"))
    assert [t.name for t in tables] == ["eer_vs_diameter.tsv", "eer_vs_sigma.tsv"]
    for t in tables:
        assert table_matches_report(t, report)
    dia = sorted({float(r["diameter"]) for r in read_tsv(tables[0])})
    sig = sorted({float(r["sigma"]) for r in read_tsv(tables[1])})
    assert dia == [20.0, 160.0] and sig == [0.0, 5.0]
    for name in ("eer_vs_diameter", "eer_vs_sigma", "best_expert", "det_s5_d20", "det_combined"):
        assert (root / "plots" / f"{name}.svg").read_text().lstrip().startswith("<?xml")


def test_plot_regenerates_identical_svgs(tiny_run):
    cfg, root = tiny_run
    before = tree_hashes(root / "plots")
    run_plot(cfg, root)
    assert tree_hashes(root / "plots") == before


def test_plot_without_report(tiny_config, tmp_path):
    with pytest.raises(PrerequisiteError, match="sweep"):
        run_plot(tiny_config, tmp_path)


def test_directory_lock(tiny_config, tmp_path):
    with Experiment(tiny_config, tmp_path):
        with pytest.raises(RuntimeError, match="in use"):
            with Experiment(tiny_config, tmp_path):
                pass


# --- command line ------------------------------------------------------------------------------

def test_cli_exit_codes(tiny_yaml, tmp_path, capsys):
    out = str(tmp_path / "exp")
    assert main(["train", "expert_mr", "--config", str(tiny_yaml), "--out", out]) == EXIT_PREREQ
    assert "stage1" in capsys.readouterr().err
    assert main(["prepare", "--config", str(tiny_yaml), "--out", out]) == EXIT_OK
    assert main(["train", "expert_mr", "--config", str(tiny_yaml), "--out", out]) == EXIT_PREREQ
    assert main(["sweep", "--config", str(tiny_yaml), "--out", out]) == EXIT_PREREQ
    assert main(["plot", "--config", str(tiny_yaml), "--out", out]) == EXIT_PREREQ

    broken = tmp_path / "broken.yaml"
    broken.write_text("stages: [unclosed\n", encoding="utf-8")
    assert main(["prepare", "--config", str(broken), "--out", out]) == EXIT_CONFIG
    unknown = tmp_path / "unknown.yaml"
    unknown.write_text("colour: blue\n", encoding="utf-8")
    assert main(["prepare", "--config", str(unknown), "--out", out]) == EXIT_CONFIG
    assert main(["prepare", "--config", str(tmp_path / "missing.yaml"), "--out", out]) == EXIT_CONFIG
    assert main(["verify", "--check", "no-such-check"]) == EXIT_CONFIG

    bad_manifest = tmp_path / "bad.yaml"
    bad_manifest.write_text(yaml.safe_dump({**TINY_CONFIG, "data": {"manifest": str(tmp_path / "nope.csv")}}))
    assert main(["prepare", "--config", str(bad_manifest), "--out", str(tmp_path / "x")]) == EXIT_RUNTIME


def test_cli_env_root_and_seed(tiny_yaml, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["prepare", "--config", str(tiny_yaml), "--seed", "3"]) == EXIT_OK
    saved = yaml.safe_load((tmp_path / "tiny" / "config.yaml").read_text())
    assert saved["seed"] == 3 and saved["stages"]["HR_SHARED"]["seed"] == 3


def test_cli_verify_subset(capsys):
    assert main(["verify", "--check", "dprime-formula", "--check", "gating-cost"]) == EXIT_OK
    assert "2/2 checks passed" in capsys.readouterr().out


def test_cli_train_and_sweep_subset(tiny_yaml, tmp_path, capsys):
    out = str(tmp_path / "exp")
    assert main(["prepare", "--config", str(tiny_yaml), "--out", out]) == EXIT_OK
    for st in ("stage1", "expert_mr", "expert_lr"):
        assert main(["train", st, "--config", str(tiny_yaml), "--out", out]) == EXIT_OK
    capsys.readouterr()
    assert main(["sweep", "--policies", "hr-only", "diameter-only", "--no-plots",
                 "--config", str(tiny_yaml), "--out", out]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    (report,) = [p for p in printed if Path(p).name.startswith("sweep_")]
    assert {r["policy"] for r in EvalReport.from_tsv(report).rows} == {"hr-only", "diameter-only"}
    assert not (tmp_path / "exp" / "plots").exists()
    assert main(["derive-labels", "--config", str(tiny_yaml), "--out", out]) == EXIT_OK
    assert json.loads((tmp_path / "exp" / "labels" / "gate_labels.json").read_text())
