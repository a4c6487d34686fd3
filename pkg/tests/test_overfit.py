from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.spatial.distance import cdist

import tcatseg.cli as cli
from tcatseg.losses import hungarian
from tcatseg.dpda import N_SUPERPOINTS
from tcatseg.network import ModelConfig, forward, load_model
from tcatseg.train import load_sample

pytestmark = pytest.mark.slow


def test_eight_arches_overfit(tmp_path: Path) -> None:
    data_dir, run, scored = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    synth = ["-q", "synth", "--out", str(data_dir), "--teeth", "14", "--count", "8"]
    assert cli.main([*synth, "--crowding", "0.5", "--seed", "7"]) == 0
    train = ["-q", "train", "--data", str(data_dir), "--out", str(run), "--n-input", "1024"]
    assert cli.main([*train, "--epochs", "300", "--lr", "1e-3", "--optimizer", "adam"]) == 0

    log = pd.read_csv(
        run / "loss.log",
        sep=" ",
        comment="#",
        header=None,
        names=["epoch", "seg", "tcp", "offset", "total", "lr"],
    )
    assert log["epoch"].is_monotonic_increasing
    assert log["total"].iloc[-1] <= 0.1 * log["total"].iloc[0]

    ckpt = run / "model.tcat"
    evaluate = ["-q", "eval", "--data", str(data_dir), "--out", str(scored)]
    assert cli.main([*evaluate, "--checkpoint", str(ckpt)]) == 0
    table = pd.read_csv(scored / "per_file.csv")
    assert table["oa"].mean() >= 0.95
    assert table["tir"].mean() >= 0.90

    config = ModelConfig(n_input=1024).validate()
    # deepest level with at least M points; the 4-point top level cannot span 14 centroids
    level = max(i for i, n in enumerate(config.level_sizes[1:]) if n >= N_SUPERPOINTS)
    params = load_model(ckpt, config)
    distances = []
    for path in sorted(data_dir.glob("*.tcat")):
        sample = load_sample(path, config)
        out = forward(sample.cloud, config, params, sample.prepared)
        gt = sample.targets.centroids
        cost = cdist(gt, out.tcp_positions[level].data)
        distances.extend(cost[i, j] for i, j in hungarian(cost).pairs)
    assert np.mean(distances) < 0.05
