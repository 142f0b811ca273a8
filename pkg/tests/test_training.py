from __future__ import annotations

import math

import numpy as np
import pytest

from adaptive_iris.losses import ArcFaceState
from adaptive_iris.model import (
    BackboneSpec,
    ExpertLabel,
    PrerequisiteError,
    SplitConfig,
    build_extractor,
    build_gating,
    parameter_digest,
)
from adaptive_iris.training import (
    GateLabelMap,
    StageConfig,
    TrainLog,
    best_expert,
    default_bins,
    derive_gate_labels,
    train_expert,
    train_gating,
    train_stage1,
)

DESK = BackboneSpec.preset("desk")


def quick(stage, iters=4, **kw):
    return StageConfig.canonical(stage).scaled(30000 / iters, batch_size=4, **kw)


def fresh(num_classes, seed=0):
    return build_extractor(DESK, SplitConfig(), seed), ArcFaceState(num_classes, 256, seed=seed + 1)


@pytest.fixture(scope="module")
def stage1_trained(small_split):
    train, _ = small_split
    ex, arc = fresh(train.num_classes)
    log = train_stage1(ex, arc, train, quick("HR_SHARED", 6, lr_milestones=((3, 0.1),), margin_warmup=2))
    return ex, arc, log


# --- configs ------------------------------------------------------------------------------

def test_canonical_schedules():
    hr = StageConfig.canonical("HR_SHARED")
    assert (hr.lr, hr.momentum, hr.weight_decay, hr.batch_size, hr.total_iterations) == (0.1, 0.9, 0.0005, 64, 30000)
    assert hr.lr_at(14999) == 0.1
    assert hr.lr_at(15000) == pytest.approx(0.01)
    assert hr.lr_at(27000) == pytest.approx(0.001)
    ex = StageConfig.canonical("EXPERT_LR")
    assert ex.lr_at(0) == 0.01 and ex.lr_at(21000) == pytest.approx(0.001)
    g = StageConfig.canonical("GATING")
    assert (g.lr, g.batch_size, g.total_iterations) == (0.001, 128, 40000)


def test_scaling_keeps_milestone_ratios():
    s = StageConfig.canonical("HR_SHARED").scaled(100)
    assert s.total_iterations == 300
    assert s.lr_milestones == ((150, 0.1), (270, 0.1))
    assert s.margin_warmup == 20
    assert StageConfig.canonical("EXPERT_MR").scaled(200).lr_milestones == ((105, 0.1),)


def test_stage_config_round_trip_and_validation():
    s = StageConfig.canonical("EXPERT_MR", seed=3).scaled(10, batch_size=16)
    assert StageConfig.from_dict(s.to_dict()) == s
    for kw in ({"stage": "X"}, {"batch_size": 1}, {"total_iterations": 0}):
        with pytest.raises(ValueError):
            StageConfig(**{"stage": "GATING", "lr": 0.1, "batch_size": 4, "total_iterations": 5, **kw})


def test_train_log_write(tmp_path):
    log = TrainLog(("iteration", "loss"), [(0, 1.5), (1, 0.25)])
    text = log.write(tmp_path / "l.tsv").read_text()
    assert text.splitlines() == ["iteration\tloss", "0\t1.5", "1\t0.25"]
    assert log.column("loss").tolist() == [1.5, 0.25]


# --- stage 1 -------------------------------------------------------------------------------

def test_stage1_touches_only_hr_shared_and_arcface(small_split):
    train, _ = small_split
    ex, arc = fresh(train.num_classes, seed=5)
    before = {k: parameter_digest(v) for k, v in ex.experts.items()}
    shared, arc0 = parameter_digest(ex.shared), parameter_digest(arc)
    train_stage1(ex, arc, train, quick("HR_SHARED", 3))
    assert parameter_digest(ex.experts["MR"]) == before["MR"]
    assert parameter_digest(ex.experts["LR"]) == before["LR"]
    assert parameter_digest(ex.experts["HR"]) != before["HR"]
    assert parameter_digest(ex.shared) != shared and parameter_digest(arc) != arc0
    assert "HR_SHARED" in ex.stages_done


def test_stage1_logs_scheduled_lr_and_margin(stage1_trained):
    ex, arc, log = stage1_trained
    assert log.column("lr").tolist() == pytest.approx([0.1, 0.1, 0.1, 0.01, 0.01, 0.01])
    assert arc.margin == 0.45
    assert np.isfinite(log.column("L_arc")).all()


def test_stage1_errors(small_split):
    train, _ = small_split
    ex, arc = fresh(train.num_classes + 1)
    with pytest.raises(ValueError, match="classes"):
        train_stage1(ex, arc, train, quick("HR_SHARED"))
    with pytest.raises(ValueError, match="empty"):
        train_stage1(ex, arc, train.subset([]), quick("HR_SHARED"))


def test_stage1_is_deterministic(small_split):
    train, _ = small_split
    runs = []
    for _ in range(2):
        ex, arc = fresh(train.num_classes, seed=9)
        log = train_stage1(ex, arc, train, quick("HR_SHARED", 3))
        runs.append((log.rows, parameter_digest(ex), parameter_digest(arc)))
    assert runs[0] == runs[1]


# --- stage 2 -------------------------------------------------------------------------------

def test_expert_requires_stage1(small_split):
    train, _ = small_split
    ex, arc = fresh(train.num_classes)
    with pytest.raises(PrerequisiteError):
        train_expert("MR", ex, arc, train, quick("EXPERT_MR"))


def test_expert_rejects_hr_label(stage1_trained, small_split):
    ex, arc, _ = stage1_trained
    with pytest.raises(ValueError):
        train_expert("HR", ex, arc, small_split[0], quick("EXPERT_MR"))


def test_expert_training_freezes_everything_else(stage1_trained, small_split):
    ex, arc, _ = stage1_trained
    frozen = {"HR": parameter_digest(ex.experts["HR"]), "LR": parameter_digest(ex.experts["LR"]),
              "shared": parameter_digest(ex.shared), "arc": parameter_digest(arc)}
    log = train_expert("MR", ex, arc, small_split[0], quick("EXPERT_MR", 3))
    after = {"HR": parameter_digest(ex.experts["HR"]), "LR": parameter_digest(ex.experts["LR"]),
             "shared": parameter_digest(ex.shared), "arc": parameter_digest(arc)}
    assert after == frozen
    assert parameter_digest(ex.experts["MR"]) != frozen["HR"]
    assert len(log.rows) == 3 and "EXPERT_MR" in ex.stages_done


def test_clean_distillation_starts_at_zero(stage1_trained, small_split):
    ex, arc, _ = stage1_trained
    log = train_expert("LR", ex, arc, small_split[0], quick("EXPERT_LR", 1), degrade=False)
    row = dict(zip(log.columns, log.rows[0]))
    assert (row["L_r"], row["L_cos"], row["L_mag"]) == (0.0, 0.0, 0.0)


# --- gate labels ---------------------------------------------------------------------------

def test_best_expert_rules():
    assert best_expert([0.1, 0.05, 0.2], [1, 1, 1]) is ExpertLabel.MR
    assert best_expert([0.0, 0.0, 0.1], [4.5, 4.4, 3.0]) is ExpertLabel.HR
    assert best_expert([0.0, 0.0, 0.0], [2.0, 2.0, 2.0]) is ExpertLabel.LR


def test_untrained_clones_label_every_cell_lr(small_split):
    ex, _ = fresh(small_split[1].num_classes)
    labels = derive_gate_labels(ex, small_split[1], *default_bins(2, 3), require_trained=False)
    assert labels.labels.shape == (2, 3)
    assert (labels.labels == int(ExpertLabel.LR)).all()
    assert np.all(labels.eer[..., 0] == labels.eer[..., 2])


def test_derive_labels_guards(small_split):
    ex, _ = fresh(small_split[1].num_classes)
    with pytest.raises(PrerequisiteError):
        derive_gate_labels(ex, small_split[1])
    one_id = small_split[1].subset(np.flatnonzero(small_split[1].identities == 0))
    with pytest.raises(ValueError, match="two identities"):
        derive_gate_labels(ex, one_id, require_trained=False)


def test_label_map_lookup_and_round_trip(tmp_path):
    s, d = default_bins(5, 5)
    labels = np.arange(25).reshape(5, 5) % 3
    m = GateLabelMap(s, d, labels, np.zeros((5, 5, 3)), np.ones((5, 5, 3)))
    assert m.cell(0.0, 160.0) == (0, 4)
    assert m.cell(5.0, 20.0) == (4, 0)
    assert m.cell(1.0, 48.0) == (1, 1)
    assert m.lookup(2.5, 90.0) is ExpertLabel(int(labels[2, 2]))
    back = GateLabelMap.load(m.save(tmp_path / "m.json"))
    assert np.array_equal(back.labels, labels) and np.array_equal(back.sigma_edges, s)
    assert '"HR"' in (tmp_path / "m.json").read_text()


# --- gating ----------------------------------------------------------------------------------

def test_gating_requires_label_map(small_split):
    with pytest.raises(PrerequisiteError):
        train_gating(build_gating(DESK, 0), None, small_split[0], quick("GATING"))


def test_gating_starts_at_ln3_and_leaves_extractor_alone(stage1_trained, small_split):
    ex, _, _ = stage1_trained
    before = parameter_digest(ex)
    s, d = default_bins(2, 2)
    m = GateLabelMap(s, d, np.array([[0, 1], [2, 2]]), np.zeros((2, 2, 3)), np.zeros((2, 2, 3)))
    g = build_gating(DESK, 0)
    log = train_gating(g, m, small_split[0], quick("GATING", 3))
    assert log.column("loss")[0] == pytest.approx(math.log(3), abs=1e-6)
    assert parameter_digest(ex) == before
    assert not g.training
