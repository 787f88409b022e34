import json

import numpy as np
import pytest

from data_io import synth_blobs
from ensemble_defense import Ensemble
from tensor_net import LayerSpec, build_network


def make_dense(weights, bias, temperature=1.0):
    """Réseau à une couche dense z = W·x + b, poids fixés à la main."""
    weights = np.asarray(weights, dtype=np.float64)
    out_dim, in_dim = weights.shape
    net = build_network(
        [LayerSpec("dense", {"in_dim": in_dim, "out_dim": out_dim})], (in_dim,), temperature, out_dim
    )
    net.layers[0].weights = weights
    net.layers[0].bias = np.asarray(bias, dtype=np.float64)
    return net


def make_constant(label, input_dim=2, label_count=4):
    bias = np.zeros(label_count)
    bias[label] = 5.0
    return make_dense(np.zeros((label_count, input_dim)), bias)


@pytest.fixture
def dense_net():
    return make_dense


@pytest.fixture
def constant_net():
    return make_constant


@pytest.fixture
def constant_ensemble():
    def build(labels, input_dim=2, label_count=4):
        return Ensemble([make_constant(l, input_dim, label_count) for l in labels])
    return build


@pytest.fixture
def threshold_net():
    """Classe 1 si x0 > 0.5, classe 0 sinon (égalité : classe 0)."""
    return make_dense([[-10.0, 0.0], [10.0, 0.0]], [5.0, -5.0])


@pytest.fixture
def diagonal_net():
    """Frontière linéaire x0 + x1 = 1 : classe 1 au-delà."""
    return make_dense([[-5.0, -5.0], [5.0, 5.0]], [5.0, -5.0])


@pytest.fixture
def two_blobs():
    return synth_blobs(class_count=2, per_class=50, dim=2, spread=0.05, seed=0)


TINY_CONFIG = {
    "dataset": {"kind": "blobs", "class_count": 3, "per_class": 40, "dim": 4, "spread": 0.05},
    "architecture": {"kind": "dense", "hidden": [8]},
    "train": {"learning_rate": 0.1, "momentum": 0.9, "dropout_keep": 1.0, "batch_size": 10, "epochs": 20},
    "attack": {"iterations": 30, "c_search_steps": 3, "step_size": 0.05},
    "certify": {"sigma": 0.2, "n": 50, "alpha": 0.01, "rv_alpha": 0.05, "batch_size": 25},
    "members": 3,
    "part_size": 20,
    "validation_size": 60,
    "noise_sigma": 0.1,
    "rv_alpha": 0.05,
    "noisy_crafting": True,
    "sample_count": 2,
    "si_sample_count": 2,
    "bin_count": 10,
    "certify_count": 2,
    "robustness_n": 20,
    "seed": 5,
}


@pytest.fixture
def tiny_config(tmp_path, monkeypatch):
    """Écrit une configuration minimale et retourne son chemin."""
    monkeypatch.delenv("CERTVOTE_THREADS", raising=False)

    def write(**changes):
        doc = {**TINY_CONFIG, **changes}
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(doc))
        return path
    return write
