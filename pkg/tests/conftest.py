from __future__ import annotations

import numpy as np
import pytest
import torch

from adaptive_iris.dataset import IrisDataset, split_holdout
from adaptive_iris.experiment import ExperimentConfig, run_pipeline
from adaptive_iris.synthetic import SyntheticIrisSpec, generate_synthetic_dataset

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))

# a few identities and a handful of iterations per stage: exercises every
# code path of the pipeline in seconds
TINY_CONFIG = {
    "out_dir": "tiny",
    "data": {"holdout_per_identity": 2, "synthetic": {"num_identities": 4, "samples_per_identity": 5}},
    "stages": {
        "HR_SHARED": {"total_iterations": 6, "batch_size": 4, "lr_milestones": [[3, 0.1]], "margin_warmup": 2},
        "EXPERT_MR": {"total_iterations": 3, "batch_size": 4, "lr_milestones": []},
        "EXPERT_LR": {"total_iterations": 3, "batch_size": 4, "lr_milestones": []},
        "GATING": {"total_iterations": 3, "batch_size": 4},
    },
    "label_grid": [2, 2],
    "sweep": {"diameters": [20, 160], "sigmas": [0, 5], "extra": [[5, 20]], "combined_replicas": 1},
    "det_points": 10,
}


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig.from_dict(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A finished tiny pipeline: ``(config, experiment directory)``."""
    cfg = ExperimentConfig.from_dict(TINY_CONFIG)
    root = tmp_path_factory.mktemp("tiny_run")
    run_pipeline(cfg, root)
    return cfg, root


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> IrisDataset:
    spec = SyntheticIrisSpec(num_identities=4, samples_per_identity=5)
    manifest = generate_synthetic_dataset(spec, tmp_path_factory.mktemp("small_data"))
    return IrisDataset.from_manifest(manifest)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return split_holdout(small_dataset, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
