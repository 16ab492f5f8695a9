"""
Tests for training pairs, losses, the optimizer and the training loop.
"""

import csv
import math

import numpy as np
import pytest

from rfmp.config import ModelConfig, PolicyConfig, TrainConfig
from rfmp.distributions import default_prior, make_rng
from rfmp.errors import ConfigError, ManifoldError
from rfmp.flows import FlowParams
from rfmp.manifolds import SPD, Euclidean, Sphere
from rfmp.nnet import ModelLayout, VectorFieldModel, init_model
from rfmp.training import (
    AdamState,
    Dataset,
    Demonstration,
    Normalizer,
    TrainingBatch,
    adamw_step,
    assemble_batch,
    ema_decay_at,
    ema_update,
    evaluate_loss,
    flow_targets,
    make_training_pair,
    observation_dim,
    rfmp_loss,
    split_demos,
    srfmp_loss,
    train,
    valid_starts,
    write_history_csv,
)


# ============================================================================
# Helpers
# ============================================================================

def counting_demo(length=10, width=2):
    """Observations o^k = (k, -k, ...) so indices can be read back."""
    steps = np.arange(length, dtype=np.float64)[:, None]
    signs = np.where(np.arange(width) % 2 == 0, 1.0, -1.0)
    return Demonstration(steps * signs, np.hstack([steps, np.zeros((length, 1))]))


def scalar_model(values):
    layout = ModelLayout(1, 1, 0, hidden=(1,))
    return VectorFieldModel(layout, {"w": np.array(values, dtype=np.float64)})


def zero_model(mode="rfmp", action_dim=2, obs_dim=0):
    layout = ModelLayout(1, action_dim, obs_dim, embedding_dim=4, hidden=(4,), mode=mode)
    return init_model(layout, make_rng(0))


class TestTrainingPairs:
    """Tests for window extraction."""

    def test_short_history_has_no_gap(self):
        """T_o=2 uses o^(s-1), o^(s-2) and no gap scalar."""
        chunk, obs = make_training_pair(counting_demo(), 5, 3, 2, make_rng(0))
        np.testing.assert_array_equal(chunk[:, 0], [5.0, 6.0, 7.0])
        np.testing.assert_array_equal(obs, [4.0, -4.0, 3.0, -3.0])

    def test_single_step_chunk(self):
        """T_p=1 gives the single action a^s."""
        chunk, _ = make_training_pair(counting_demo(), 4, 1, 2, make_rng(0))
        np.testing.assert_array_equal(chunk, [[4.0, 0.0]])

    def test_long_history_gap(self):
        """T_o=4 draws c in [s-4, s-2] and appends s-c."""
        s = 6
        for seed in range(20):
            _, obs = make_training_pair(counting_demo(), s, 2, 4, make_rng(seed))
            gap = obs[-1]
            assert gap in (2.0, 3.0, 4.0)
            assert obs[2] == s - gap
        a = make_training_pair(counting_demo(), s, 2, 4, make_rng(3))[1]
        b = make_training_pair(counting_demo(), s, 2, 4, make_rng(3))[1]
        np.testing.assert_array_equal(a, b)

    def test_out_of_range(self):
        """Windows must fit the demonstration."""
        with pytest.raises(IndexError):
            make_training_pair(counting_demo(length=6), 5, 3, 2, make_rng(0))
        with pytest.raises(IndexError):
            make_training_pair(counting_demo(), 1, 3, 2, make_rng(0))

    def test_short_observation_horizon(self):
        """T_o must be at least 2."""
        with pytest.raises(ValueError):
            make_training_pair(counting_demo(), 5, 2, 1, make_rng(0))

    def test_valid_starts(self):
        """Starts run from T_o to L - T_p."""
        assert list(valid_starts(10, 4, 2)) == [2, 3, 4, 5, 6]

    def test_observation_dim(self):
        """The gap adds one entry when T_o > 2."""
        assert observation_dim(3, 2) == 6
        assert observation_dim(3, 4) == 7


class TestDataset:
    """Tests for dataset validation and normalization."""

    def test_too_short(self):
        """Demonstrations shorter than T_o + T_p are rejected."""
        dataset = Dataset(Euclidean(2), [counting_demo(length=5)])
        with pytest.raises(ConfigError):
            dataset.validate(T_p=4, T_o=2)

    def test_off_manifold(self):
        """Sphere actions must be unit vectors."""
        demo = Demonstration(np.zeros((8, 1)), np.tile([1.0, 1.0, 0.0], (8, 1)))
        with pytest.raises(ManifoldError):
            Dataset(Sphere(3), [demo]).validate(2, 2)

    def test_indefinite_spd_actions(self):
        """SPD actions must be positive definite, not just symmetric."""
        actions = np.tile(np.eye(2).ravel(), (8, 1))
        actions[5] = [-1.0, 0.0, 0.0, 1.0]
        demo = Demonstration(np.zeros((8, 1)), actions)
        with pytest.raises(ManifoldError):
            Dataset(SPD(2), [demo]).validate(2, 2)

    def test_action_width(self):
        """Action width must match the manifold."""
        with pytest.raises(ManifoldError):
            Dataset(Euclidean(3), [counting_demo()]).validate(2, 2)

    def test_mismatched_lengths(self):
        """Observations and actions pair up."""
        with pytest.raises(ValueError):
            Demonstration(np.zeros((4, 1)), np.zeros((5, 2)))

    def test_normalizer_standardizes(self, stroke_dataset):
        """Euclidean actions get zero mean and unit variance."""
        normalizer = Normalizer.fit(stroke_dataset)
        actions = np.concatenate([d.actions for d in normalizer.apply(stroke_dataset).demos])
        np.testing.assert_allclose(actions.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(actions.std(axis=0), 1.0, atol=1e-12)

    def test_normalizer_skips_curved_factors(self):
        """Sphere coordinates pass through unchanged."""
        actions = Sphere(3).random_point(make_rng(2), (10,))
        dataset = Dataset(Sphere(3), [Demonstration(np.zeros((10, 1)), actions)])
        normalizer = Normalizer.fit(dataset)
        np.testing.assert_array_equal(normalizer.normalize_actions(actions), actions)

    def test_normalizer_roundtrip(self, stroke_dataset):
        """Denormalizing inverts normalizing."""
        normalizer = Normalizer.fit(stroke_dataset)
        a = stroke_dataset.demos[0].actions
        np.testing.assert_allclose(
            normalizer.denormalize_actions(normalizer.normalize_actions(a)), a, atol=1e-12
        )
        restored = Normalizer.from_arrays(normalizer.to_arrays())
        np.testing.assert_array_equal(restored.action_std, normalizer.action_std)

    def test_constant_dimension(self):
        """Zero-variance dimensions keep unit scale."""
        demo = Demonstration(np.ones((6, 1)),
                             np.hstack([np.arange(6.0)[:, None], np.ones((6, 1))]))
        normalizer = Normalizer.fit(Dataset(Euclidean(2), [demo]))
        assert normalizer.action_std[1] == 1.0
        assert normalizer.obs_std[0] == 1.0

    def test_split_demos(self, stroke_dataset):
        """The last demonstrations are held out."""
        dataset = Dataset(Euclidean(2), stroke_dataset.demos * 5)
        train_set, val_set = split_demos(dataset, 0.1)
        assert len(train_set.demos) == 18 and len(val_set.demos) == 2
        assert split_demos(stroke_dataset, 0.1)[1] is None


class TestLosses:
    """Tests for the RFMP and SRFMP objectives."""

    def test_rfmp_zero_model(self, plane):
        """Zero field loss is |a1 - a0|^2."""
        batch = TrainingBatch(np.array([[[1.0, 0.0]]]), np.zeros((1, 1, 2)), np.zeros((1, 0)),
                              np.array([0.37]))
        assert math.isclose(rfmp_loss(zero_model(), plane, batch), 1.0)

    def test_srfmp_zero_model(self):
        """lambda^2 (dx^2 + dtau^2) at t=0."""
        batch = TrainingBatch(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 0)),
                              np.array([0.0]))
        model = zero_model("srfmp", action_dim=1)
        assert math.isclose(srfmp_loss(model, Euclidean(1), batch, FlowParams()), 12.5)

    def test_srfmp_converged(self):
        """Far past convergence the target field vanishes."""
        batch = TrainingBatch(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 0)),
                              np.array([20.0]))
        model = zero_model("srfmp", action_dim=1)
        assert srfmp_loss(model, Euclidean(1), batch, FlowParams()) <= 1e-24

    def test_sphere_loss_matches_accumulation(self, sphere, rng):
        """The zero-model sphere loss is the mean summed squared target norm."""
        target = sphere.random_point(rng, (6, 3))
        source = sphere.random_point(rng, (6, 3))
        batch = TrainingBatch(target, source, np.zeros((6, 0)), rng.uniform(size=6))
        model = init_model(ModelLayout(3, 3, 0, embedding_dim=4, hidden=(4,)), rng)
        _, _, u, _ = flow_targets(sphere, batch, "rfmp", FlowParams())
        expected = np.mean([sum(float(np.dot(step, step)) for step in chunk) for chunk in u])
        assert math.isclose(rfmp_loss(model, sphere, batch), expected, rel_tol=1e-12)

    def test_flow_target_shapes(self, sphere, rng):
        """srfmp targets carry per-element pseudo-times."""
        batch = TrainingBatch(sphere.random_point(rng, (5, 4)), sphere.random_point(rng, (5, 4)),
                              np.zeros((5, 0)), rng.uniform(size=5))
        x_t, tau_t, u_x, u_tau = flow_targets(sphere, batch, "srfmp", FlowParams())
        assert x_t.shape == (5, 4, 3) and u_x.shape == (5, 4, 3)
        assert tau_t.shape == (5,) and u_tau.shape == (5,)
        np.testing.assert_allclose(np.sum(x_t * u_x, axis=-1), 0.0, atol=1e-10)

    def test_assemble_batch(self, stroke_dataset, small_policy):
        """One prior chunk, observation and time per window."""
        prior = default_prior(Euclidean(2))
        batch = assemble_batch(stroke_dataset, [(0, 2), (1, 5), (3, 9)], small_policy, prior,
                               make_rng(0))
        assert batch.target.shape == (3, 4, 2)
        assert batch.source.shape == (3, 4, 2)
        assert batch.obs.shape == (3, 4)
        assert np.all((batch.t >= 0.0) & (batch.t < 1.0))


class TestOptimizer:
    """Tests for AdamW and EMA."""

    def test_zero_gradient_no_decay(self):
        """Nothing moves without gradient or decay."""
        model = scalar_model([1.5, -2.0])
        state = AdamState(0, {"w": np.zeros(2)}, {"w": np.zeros(2)})
        adamw_step(model, {"w": np.zeros(2)}, state, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(model.params["w"], [1.5, -2.0])

    def test_first_step(self):
        """Bias correction makes the first step lr-sized."""
        model = scalar_model([1.0])
        state = AdamState(0, {"w": np.zeros(1)}, {"w": np.zeros(1)})
        config = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        adamw_step(model, {"w": np.ones(1)}, state, config)
        assert abs(model.params["w"][0] - 0.9) <= 1e-6
        assert state.step == 1

    def test_decay_only(self):
        """Decoupled decay shrinks the weight by lr * wd."""
        model = scalar_model([2.0])
        state = AdamState(0, {"w": np.zeros(1)}, {"w": np.zeros(1)})
        adamw_step(model, {"w": np.zeros(1)}, state,
                   TrainConfig(learning_rate=1e-4, weight_decay=1e-3))
        assert math.isclose(model.params["w"][0], 2.0 * (1.0 - 1e-7), rel_tol=1e-15)

    def test_quadratic_bowl_oracle(self):
        """100 steps on 1/2 |w|^2 match a scalar Adam and shrink monotonically."""
        config = TrainConfig(learning_rate=0.01, weight_decay=0.0)
        model = scalar_model([5.0, 5.0])
        state = AdamState(0, {"w": np.zeros(2)}, {"w": np.zeros(2)})
        w, m, v = 5.0, 0.0, 0.0
        norms = []
        for step in range(1, 101):
            adamw_step(model, {"w": model.params["w"].copy()}, state, config)
            g = w
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1 ** step)
            v_hat = v / (1 - config.beta2 ** step)
            w = w - config.learning_rate * m_hat / (math.sqrt(v_hat) + config.eps)
            norms.append(float(np.linalg.norm(model.params["w"])))
        np.testing.assert_allclose(model.params["w"], [w, w], atol=1e-10)
        assert all(b < a for a, b in zip(norms[4:], norms[5:]))
        assert norms[-1] < math.hypot(5.0, 5.0)

    def test_shape_mismatch(self):
        """Gradients must match parameter shapes."""
        model = scalar_model([1.0, 2.0])
        state = AdamState(0, {"w": np.zeros(2)}, {"w": np.zeros(2)})
        with pytest.raises(ValueError):
            adamw_step(model, {"w": np.zeros(3)}, state, TrainConfig())

    @pytest.mark.parametrize("decay,expected", [(1.0, 0.0), (0.0, 1.0), (0.999, 0.001)])
    def test_ema_update(self, decay, expected):
        """ema <- w ema + (1 - w) model."""
        ema = ema_update(scalar_model([0.0]), scalar_model([1.0]), decay)
        assert math.isclose(ema.params["w"][0], expected, rel_tol=1e-12)

    def test_ema_geometric_convergence(self):
        """With a frozen model the gap shrinks by the decay each step."""
        ema, model = scalar_model([0.0]), scalar_model([1.0])
        for _ in range(10):
            ema_update(ema, model, 0.9)
        assert math.isclose(1.0 - ema.params["w"][0], 0.9 ** 10, rel_tol=1e-12)

    def test_ema_warmup(self):
        """Warm-up caps the decay early in training."""
        assert ema_decay_at(0, 0.999) == 0.1
        assert ema_decay_at(10_000, 0.999) == 0.999
        assert ema_decay_at(0, 0.999, warmup=False) == 0.999


class TestTrain:
    """Tests for the training loop."""

    def test_zero_epochs(self, stroke_dataset, small_policy, small_model):
        """No epochs returns the initial model."""
        config = TrainConfig(epochs=0, seed=5)
        result = train(stroke_dataset, config, FlowParams(), small_policy, small_model)
        assert result.history == []
        initial = init_model(result.model.layout, make_rng(5))
        for key, value in initial.params.items():
            np.testing.assert_array_equal(result.model.params[key], value)

    def test_deterministic(self, stroke_dataset, small_policy, small_model, quick_train):
        """Same seed, bit-identical loss history."""
        a = train(stroke_dataset, quick_train, FlowParams(), small_policy, small_model)
        b = train(stroke_dataset, quick_train, FlowParams(), small_policy, small_model)
        assert [row[:2] for row in a.history] == [row[:2] for row in b.history]
        assert all(math.isnan(row[2]) for row in a.history)
        assert len(a.history) == quick_train.epochs
        assert a.adam.step == b.adam.step > 0

    @pytest.mark.parametrize("mode", ["rfmp", "srfmp"])
    def test_modes_on_sphere(self, mode, small_policy, small_model):
        """Both modes train on sphere demonstrations."""
        from rfmp.tasks import gen_reach_demos

        dataset = gen_reach_demos(n_demos=4, seed=1, sphere=True, length=16)
        config = TrainConfig(epochs=2, batch_size=32, mode=mode, val_fraction=0.25)
        result = train(dataset, config, FlowParams(), small_policy, small_model)
        assert result.ema_model.layout.mode == mode
        assert all(np.isfinite(row[1]) and np.isfinite(row[2]) for row in result.history)
        assert 1 <= result.best_epoch <= 2

    def test_cfm_requires_flat_manifold(self, small_policy, small_model):
        """The Gaussian flow is Euclidean only."""
        from rfmp.tasks import gen_reach_demos

        dataset = gen_reach_demos(n_demos=2, seed=1, sphere=True, length=16)
        with pytest.raises(ConfigError):
            train(dataset, TrainConfig(epochs=1, flow="cfm"), FlowParams(), small_policy,
                  small_model)

    def test_prior_manifold_mismatch(self, stroke_dataset, small_policy, small_model):
        """The prior must live on the dataset manifold."""
        with pytest.raises(ConfigError):
            train(stroke_dataset, TrainConfig(epochs=1), FlowParams(), small_policy, small_model,
                  default_prior(Sphere(3)))

    @pytest.mark.slow
    def test_loss_decreases(self, small_policy):
        """200 epochs cut the loss on L strokes to a tenth of the zero field."""
        from rfmp.tasks import gen_strokes

        dataset = gen_strokes("L", n_demos=8, noise=0.02, seed=0, length=32)
        config = TrainConfig(epochs=200, batch_size=32, learning_rate=1e-3, val_fraction=0.0)
        model_config = ModelConfig(embedding_dim=16, hidden=[64, 64])
        result = train(dataset, config, FlowParams(), small_policy, model_config)
        normalized = result.normalizer.apply(dataset)
        prior = default_prior(Euclidean(2))
        baseline = init_model(result.model.layout, make_rng(0))
        before = evaluate_loss(baseline, normalized, small_policy, prior, FlowParams(), seed=1)
        after = evaluate_loss(result.model, normalized, small_policy, prior, FlowParams(), seed=1)
        assert after <= 0.1 * before

    def test_history_csv(self, tmp_path):
        """One row per epoch after the header."""
        path = tmp_path / "loss.csv"
        write_history_csv(path, [(1, 0.5, float("nan")), (2, 0.25, 0.3)])
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "mean_loss", "val_loss"]
        assert rows[2] == ["2", "0.25", "0.3"]
