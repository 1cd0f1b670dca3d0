"""
Shared fixtures: tiny model configs and a synthetic dataset written once per session.
"""
import os
import tempfile

os.environ.setdefault("HYBRIDROI_LOG_DIR", tempfile.mkdtemp(prefix="hybridroi-logs-"))

import numpy as np
import pytest

from data import RoiDataset, match_manifest, read_manifest, scan_images, synth_dataset, write_synth_dataset
from models import ExperimentConfig, ModelConfig, ScanConfig


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def scan_cfg():
    """Small selective-scan block: D=8, E=2, N=4, conv width 3"""
    return ScanConfig(d_model=8, expand=2, d_state=4, d_conv=3, blocks=1)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(variant="hybrid", backbone="tiny", token_dim=16,
                       scan=ScanConfig(d_model=16, d_state=4, blocks=1))


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """24 synthetic 32x32 ROIs on disk with their manifest"""
    out = tmp_path_factory.mktemp("synth")
    manifest = write_synth_dataset(synth_dataset(24, image_size=32, seed=7), out)
    return out, manifest


@pytest.fixture(scope="session")
def synth_records(synth_root):
    root, manifest = synth_root
    return match_manifest(read_manifest(manifest), scan_images(root).files, root).records


@pytest.fixture
def synth_dataset_32(synth_root, synth_records):
    root, _ = synth_root
    return RoiDataset(synth_records, root, image_size=32, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))


@pytest.fixture
def tiny_experiment(synth_root):
    """Three-epoch hybrid run over the session synthetic set"""
    root, manifest = synth_root
    return ExperimentConfig.model_validate({
        "model": {"variant": "hybrid", "backbone": "tiny", "token_dim": 16, "scan": {"d_state": 4, "blocks": 1}},
        "data": {"manifest": str(manifest), "image_root": str(root), "image_size": 32},
        "train": {"epochs": 3, "phase1_epochs": 1, "batch_size": 8, "patience": 5, "t0": 2, "seed": 3},
        "eval": {"batch_size": 8},
    })
