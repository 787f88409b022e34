import numpy as np
import pytest

from attacks import (
    AdversarialExample,
    AttackConfig,
    _Crafter,
    craft,
    load_examples,
    margin_penalty,
    perturbation,
    save_examples,
    single_network_sweep,
    smallest_perturbations,
    superimpose,
    superimposed_example,
)
from data_io import Dataset, synth_blobs
from ensemble_defense import Ensemble, QueryPolicy
from errors import (
    ConsistencyError,
    InsufficientExamplesError,
    ParameterError,
    ShapeError,
    UndefinedMetricError,
)
from tensor_net import (
    TrainConfig,
    accuracy,
    build_network,
    dense_specs,
    predict,
    train,
    value_and_input_gradient,
)

S = np.array([0.3, 0.3])


def grid_oracle(net, s, target, radii=np.arange(0.0, 1.0, 0.0005), angles=720):
    """Plus petite distorsion L² trouvée par recherche radiale exhaustive."""
    thetas = np.linspace(0, 2 * np.pi, angles, endpoint=False)
    directions = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    for r in radii:
        points = np.clip(s + r * directions, 0.0, 1.0)
        hits = predict(net, points) == target
        if hits.any():
            return float(np.min(np.linalg.norm(points[hits] - s, axis=1)))
    return np.inf


def example(p, target=1, success=True, crafted_on=0, s=None):
    s = np.full(4, 0.5) if s is None else s
    delta = np.zeros(4)
    delta[crafted_on % 4] = p
    return AdversarialExample(
        source_index=0,
        true_label=0,
        original=s,
        delta=delta,
        target=target,
        crafted_on=crafted_on,
        success_on_crafted=success,
    )


class TestMetrics:
    def test_perturbation_ratio(self):
        assert perturbation([3.0, 4.0], [0.0, 5.0]) == pytest.approx(np.sqrt(10) / 5)
        assert perturbation([0.2, 0.2], [0.2, 0.2]) == 0.0

    def test_worked_example_and_homogeneity(self):
        assert perturbation([3.0, 9.0], [3.0, 4.0]) == 1.0
        s = np.array([0.3, 0.4, 0.5])
        delta = np.array([0.01, -0.02, 0.03])
        assert perturbation(s + 2 * delta, s) == pytest.approx(2 * perturbation(s + delta, s), rel=1e-12)

    def test_zero_original(self):
        with pytest.raises(UndefinedMetricError):
            perturbation([0.1, 0.0], [0.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            perturbation([0.1, 0.2, 0.3], [0.1, 0.2])

    def test_margin_penalty(self):
        z = np.array([1.0, 3.0, 2.0])
        assert margin_penalty(z, 2) == 1.0
        assert margin_penalty(z, 1) == 0.0
        assert margin_penalty(z, 1, kappa=0.5) == -0.5


class TestCraft:
    def test_close_to_grid_oracle(self, diagonal_net):
        cfg = AttackConfig(iterations=300, c_search_steps=6, step_size=0.01)
        result = craft(diagonal_net, S, 1, cfg)
        oracle = grid_oracle(diagonal_net, S, 1)
        assert oracle == pytest.approx((1 - 0.6) / np.sqrt(2), abs=1e-3)
        assert result.success_on_crafted
        assert predict(diagonal_net, result.adversarial) == 1
        assert oracle * 0.99 <= result.l2 <= oracle * 1.10

    def test_loss_penalty(self, diagonal_net):
        cfg = AttackConfig(penalty_kind="loss", iterations=300, c_search_steps=8)
        result = craft(diagonal_net, S, 1, cfg)
        assert result.success_on_crafted
        assert predict(diagonal_net, result.adversarial) == 1

    def test_already_target(self, diagonal_net):
        result = craft(diagonal_net, np.array([0.9, 0.9]), 1, AttackConfig())
        assert result.success_on_crafted
        assert np.array_equal(result.adversarial, [0.9, 0.9])
        assert result.l2 == 0.0

    def test_box_constraint(self, diagonal_net, constant_net):
        cfg = AttackConfig(iterations=50, c_search_steps=3, step_size=0.1)
        for net, s in ((diagonal_net, np.array([0.01, 0.99])), (constant_net(0), np.array([0.0, 1.0]))):
            result = craft(net, s, 1, cfg)
            assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0

    def test_unreachable_target_reports_failure(self, constant_net):
        result = craft(constant_net(0), S, 2, AttackConfig(iterations=20, c_search_steps=2))
        assert not result.success_on_crafted

    def test_deterministic(self, diagonal_net):
        cfg = AttackConfig(iterations=100, c_search_steps=3, seed=4)
        a, b = craft(diagonal_net, S, 1, cfg), craft(diagonal_net, S, 1, cfg)
        assert np.array_equal(a.adversarial, b.adversarial)

    def test_noisy_surface(self, diagonal_net):
        cfg = AttackConfig(
            iterations=100, c_search_steps=3, attack_surface="noisy_logits", surface_sigma=0.05, seed=1
        )
        result = craft(diagonal_net, S, 1, cfg)
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0
        assert np.array_equal(
            result.adversarial, craft(diagonal_net, S, 1, cfg).adversarial
        )

    def test_noisy_surface_renoises_every_query(self, diagonal_net):
        cfg = AttackConfig(attack_surface="noisy_logits", surface_sigma=0.05, seed=2)
        crafter = _Crafter(diagonal_net, S, 1, cfg)
        first, second = crafter.observe(S)[0], crafter.observe(S)[0]
        assert crafter.queries == 2
        assert not np.array_equal(first, second)
        noise = QueryPolicy(noise_sigma=0.05, seed=2).noise(S.shape, 1)
        assert np.array_equal(second, value_and_input_gradient(diagonal_net, S + noise, crafter.objective)[0])

        clean = _Crafter(diagonal_net, S, 1, AttackConfig())
        assert np.array_equal(clean.observe(S)[0], clean.observe(S)[0])

    def test_more_c_rounds_never_lose_the_best(self, diagonal_net):
        results = [
            craft(diagonal_net, S, 1, AttackConfig(c_init=1e-3, c_search_steps=k, iterations=150))
            for k in range(1, 7)
        ]
        found = [r.success_on_crafted for r in results]
        assert found[-1] and found == sorted(found)
        distances = [r.l2 for r in results if r.success_on_crafted]
        assert all(later <= earlier for earlier, later in zip(distances, distances[1:]))

    def test_high_temperature_member(self):
        data = synth_blobs(class_count=3, per_class=40, dim=4, spread=0.05, seed=0)
        net = build_network(dense_specs(4, (8,), label_count=3), (4,), 70.0, 3, seed=0)
        cfg = TrainConfig(learning_rate=0.1, momentum=0.9, dropout_keep=1.0, batch_size=10, epochs=800)
        trained = train(net, data, cfg)
        assert accuracy(trained, data) >= 0.95
        for label in range(3):
            s = data.inputs[np.flatnonzero(data.labels == label)[0]]
            for t in set(range(3)) - {label}:
                result = craft(trained, s, t, AttackConfig())
                assert result.success_on_crafted, (label, t)
                assert predict(trained, result.adversarial) == t

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"penalty_kind": "hinge"},
            {"c_init": 0.0},
            {"iterations": 0},
            {"kappa": -1.0},
            {"attack_surface": "noisy_logits"},
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ParameterError):
            AttackConfig(**kwargs)


class TestSuperimpose:
    def test_zero_deltas_return_original(self):
        examples = [example(0.0, crafted_on=i) for i in range(3)]
        assert np.array_equal(superimpose(examples, 2), examples[0].original)

    def test_picks_smallest_perturbations(self):
        examples = [example(p, crafted_on=i) for i, p in enumerate([0.05, 0.12, 0.03, 0.40])]
        assert smallest_perturbations(examples, 2) == [2, 0]
        expected = np.clip(examples[0].original + examples[2].delta + examples[0].delta, 0.0, 1.0)
        assert np.allclose(superimpose(examples, 2), expected, atol=1e-15)

    def test_failed_examples_are_not_pooled(self):
        examples = [
            example(0.01, success=False, crafted_on=0),
            example(0.2, crafted_on=1),
            example(0.3, crafted_on=2),
        ]
        composite = superimposed_example(examples, 2)
        assert composite.crafted_on == -1
        assert composite.components == (1, 2)
        with pytest.raises(InsufficientExamplesError):
            superimpose(examples, 3)

    def test_requires_shared_original_and_target(self):
        with pytest.raises(ConsistencyError):
            superimpose([example(0.1), example(0.1, target=2, crafted_on=1)], 2)
        with pytest.raises(ConsistencyError):
            superimpose([example(0.1), example(0.1, s=np.full(4, 0.4), crafted_on=1)], 2)

    def test_k_outside_two_three(self):
        with pytest.raises(ParameterError):
            superimpose([example(0.1, crafted_on=i) for i in range(4)], 4)


class TestSweep:
    def test_grid_order_and_count(self, constant_net):
        ens = Ensemble([constant_net(0, label_count=3), constant_net(0, label_count=3)])
        samples = Dataset([[0.4, 0.6]], [1])
        cfg = AttackConfig(iterations=5, c_search_steps=1)
        examples = single_network_sweep(ens, samples, None, cfg)
        assert [(e.target, e.crafted_on) for e in examples] == [(0, 0), (0, 1), (2, 0), (2, 1)]
        assert all(e.true_label == 1 and e.source_index == 0 for e in examples)
        assert all(e.adversarial.min() >= 0 and e.adversarial.max() <= 1 for e in examples)

    def test_worker_pool_is_order_stable(self, diagonal_net, threshold_net, monkeypatch):
        ens = Ensemble([diagonal_net, threshold_net])
        samples = Dataset([[0.3, 0.3], [0.2, 0.4]], [0, 0])
        cfg = AttackConfig(iterations=40, c_search_steps=2, seed=3)
        sequential = single_network_sweep(ens, samples, [1], cfg)
        monkeypatch.setenv("CERTVOTE_THREADS", "3")
        pooled = single_network_sweep(ens, samples, [1], cfg)
        assert len(pooled) == 4
        for a, b in zip(sequential, pooled):
            assert (a.source_index, a.target, a.crafted_on) == (b.source_index, b.target, b.crafted_on)
            assert np.array_equal(a.adversarial, b.adversarial)


class TestPersistence:
    def test_sparse_and_dense_round_trip(self, tmp_path):
        delta = np.zeros(20)
        delta[7] = 0.1
        sparse = AdversarialExample(0, 0, np.full(20, 0.5), delta, 1, 2, True)
        dense = AdversarialExample(3, 1, np.full(4, 0.5), np.full(4, 0.01), 2, 1, False)
        assert "sparse" in sparse.to_dict()["delta"] and "dense" in dense.to_dict()["delta"]
        save_examples([sparse, dense], tmp_path / "examples.jsonl")
        loaded = load_examples(tmp_path / "examples.jsonl")
        for before, after in zip([sparse, dense], loaded):
            assert np.array_equal(before.delta, after.delta)
            assert np.array_equal(before.original, after.original)
            assert (before.target, before.crafted_on, before.success_on_crafted) == (
                after.target, after.crafted_on, after.success_on_crafted
            )
