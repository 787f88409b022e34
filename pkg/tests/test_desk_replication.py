"""
Réplications directionnelles à l'échelle du bureau : m=7 (m=5 pour l'attaque seule), blobs synthétiques.
Lentes ; lancer avec `pytest -m slow`.
"""

import numpy as np
import pandas as pd
import pytest

from certify import empirical_radius_check, load_certificates
from config import load_config
from harness import PipelineRunner

pytestmark = pytest.mark.slow

SEEDS = range(5)


def run(tmp_path, stages, seed=0, **overrides):
    cfg = load_config(overrides={"out": str(tmp_path / f"seed_{seed}"), "seed": seed, **overrides})
    runner = PipelineRunner(cfg)
    runner.run(stages)
    return runner


def accuracy(outcomes, attack, variant, column="attack_accuracy_abstain_error"):
    rows = outcomes[(outcomes["attack"] == attack) & (outcomes["variant"] == variant)]
    return float(rows[column].iloc[0]) if len(rows) else np.nan


def test_single_network_attack_succeeds_on_crafted_member(tmp_path):
    runner = run(tmp_path, ("data", "train", "attack"), members=5)
    success = np.mean([e.success_on_crafted for e in runner.examples])
    assert success >= 0.95


def test_directional_defense(tmp_path):
    held = {"vote_beats_member": 0, "superimposition_degrades": 0, "rank_check_helps": 0}
    for seed in SEEDS:
        runner = run(tmp_path, ("data", "train", "attack", "superimpose", "evaluate"), seed=seed)
        outcomes = pd.read_csv(runner.out_dir / "outcomes.csv")
        members = pd.read_csv(runner.out_dir / "member_accuracy.csv")
        member_mean = float(members.loc[members["member"] == "mean", "attack_accuracy"].iloc[0])

        single = accuracy(outcomes, "single", "plain")
        si2, si3 = accuracy(outcomes, "SI2", "plain"), accuracy(outcomes, "SI3", "plain")
        checked = accuracy(outcomes, "single", "NL+RV(0.05)", "attack_accuracy_answered")
        held["vote_beats_member"] += single > member_mean
        held["superimposition_degrades"] += si3 < si2 < single
        held["rank_check_helps"] += checked >= single
    assert all(count >= 4 for count in held.values()), held


def test_certified_radius_is_consistent(tmp_path):
    runner = run(tmp_path, ("data", "train", "attack", "certify"), certify_count=20)
    certificates = load_certificates(runner.out_dir / "certificates.jsonl")
    inputs = runner.validation.head(20).inputs
    for i, cert in enumerate(certificates):
        if cert.certified:
            assert empirical_radius_check(runner.ensemble, inputs[i], cert, trials=200, seed=i) >= 0.95
    robustness = pd.read_csv(runner.out_dir / "robustness.csv")
    assert robustness["consistent"].all()
