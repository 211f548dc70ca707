import json

import numpy as np
import pytest

from rdmd_lab.data import Rng
from rdmd_lab.networks import DenoiserNet, NetConfig
from rdmd_lab.schedule import NoiseSchedule


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def tiny_config():
    return NetConfig(encoder_dims=(4, 4), decoder_dims=(8, 2), embed_dim=4)


@pytest.fixture
def tiny_net(tiny_config, schedule):
    return DenoiserNet.init(tiny_config, schedule, Rng(7))


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x.copy())
        flat[i] = keep - h
        down = f(x.copy())
        flat[i] = keep
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel_err():
    return relative_error


TINY_DOC = {
    "seed": 3,
    "network": {"encoder_dims": [4, 4], "decoder_dims": [8, 2], "embed_dim": 4},
    "dsm": {"batch_size": 32, "iterations": 3, "log_every": 1},
    "rdmd": {
        "generator": "linear",
        "omega": "sigma2",
        "generator_lr": 1e-3,
        "batch_size": 64,
        "iterations": 6,
        "eval_every": 3,
        "eval_size": 50,
    },
    "data": {"target": "gaussian", "target_std": 1.5, "n_samples": 200},
    "eval": {"n_eval": 100, "n_projections": 8, "crossing_m": 20, "ode_steps": 4, "score_sigmas": [1.0]},
    "surface": {"grid_n": 8, "quadrature_steps": 16},
    "sweep": {"lambdas": [0.0, 1.0]},
}


@pytest.fixture
def tiny_doc():
    return json.loads(json.dumps(TINY_DOC))


@pytest.fixture
def tiny_config_file(tmp_path, tiny_doc):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_doc), encoding="utf-8")
    return path
