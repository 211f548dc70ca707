from pathlib import Path

import numpy as np
import pytest

from rdmd_lab.config import config_from_dict, load_config
from rdmd_lab.experiments import reference_distribution, run_sweep
from rdmd_lab.oracles import GaussianDist, GaussianMixture

REPO_CONFIG = Path(__file__).resolve().parents[1] / "config.json"


def test_reference_follows_the_training_target():
    cfg = config_from_dict({"data": {"target": "8gaussians"}})
    analytic = reference_distribution(cfg, {"target": "gaussian:1.5", "target_kind": "analytic"})
    assert isinstance(analytic, GaussianDist)
    np.testing.assert_allclose(analytic.cov, 2.25 * np.eye(2))

    pretrained = reference_distribution(cfg, {"target": "runs/denoiser.ckpt", "target_kind": "checkpoint"})
    assert isinstance(pretrained, GaussianMixture)
    assert isinstance(reference_distribution(cfg, {}), GaussianMixture)


@pytest.mark.slow
def test_lambda_sweep_trades_faithfulness_for_quality(tmp_path):
    cfg = load_config(REPO_CONFIG)
    df = run_sweep(cfg, tmp_path, analytic_target="8gaussians").sort_values("lambda")
    assert list(df["lambda"]) == [0.0, 0.05, 0.2, 1.0]
    cost = df["transport_cost_rms"].to_numpy()
    energy = df["energy_distance"].to_numpy()
    for lo, hi in zip(range(3), range(1, 4)):
        assert cost[hi] <= 1.05 * cost[lo]
        assert energy[hi] >= energy[lo] / 1.05
    by_lam = df.set_index("lambda")
    assert by_lam.loc[0.2, "crossing_count"] < by_lam.loc[0.0, "crossing_count"]
    assert by_lam.loc[0.2, "energy_distance"] < 0.1
