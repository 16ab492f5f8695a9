"""
Tests for the vector-field network, its gradients and checkpoint files.
"""

import math

import numpy as np
import pytest

from rfmp.distributions import make_rng
from rfmp.errors import ConfigError, FileFormatError
from rfmp.flows import FlowParams
from rfmp.manifolds import Euclidean, Sphere, parse_manifold
from rfmp.nnet import (
    Checkpoint,
    ModelLayout,
    VectorFieldModel,
    backward,
    embed_time,
    forward,
    init_model,
    load_checkpoint,
    make_inputs,
    parameter_count,
    save_checkpoint,
    split_output,
)


# ============================================================================
# Helpers
# ============================================================================

def randomize(model, rng, scale=0.5):
    """Give every weight (including the zero last layer) a random value."""
    for key in model.params:
        model.params[key] = scale * rng.standard_normal(model.params[key].shape)
    return model


def sphere_batch(rng, batch=5, horizon=2):
    sphere = Sphere(3)
    x = sphere.random_point(rng, (batch, horizon))
    targets = sphere.random_tangent(x, rng)
    return sphere, x, targets


class TestEmbedTime:
    """Tests for the sinusoidal time embedding."""

    def test_zero_time(self):
        """sin 0 = 0, cos 0 = 1."""
        np.testing.assert_array_equal(embed_time(0.0, 4), [0.0, 1.0, 0.0, 1.0])

    def test_first_pair(self):
        """The first frequency is one."""
        out = embed_time(0.5, 32)
        assert math.isclose(out[0], math.sin(0.5)) and math.isclose(out[1], math.cos(0.5))
        assert np.all(np.abs(out) <= 1.0)

    def test_batched(self):
        """Arrays of times embed row by row."""
        assert embed_time(np.array([0.0, 0.3, 2.0]), 8).shape == (3, 8)

    def test_odd_dimension(self):
        """Odd widths are rejected."""
        with pytest.raises(ConfigError):
            embed_time(0.1, 5)


class TestLayout:
    """Tests for model layout validation."""

    def test_dimensions(self):
        """Input is chunk + embedding + observation."""
        layout = ModelLayout(horizon=4, action_dim=3, obs_dim=6, embedding_dim=8, mode="srfmp")
        assert layout.input_dim == 12 + 8 + 6
        assert layout.output_dim == 13

    def test_separate_tau_head(self):
        """A separate tau MLP removes the extra trunk output."""
        layout = ModelLayout(4, 3, 6, mode="srfmp", separate_tau_mlp=True)
        assert layout.trunk_output_dim == 12
        assert layout.output_dim == 13

    @pytest.mark.parametrize("kwargs", [
        {"horizon": 0}, {"embedding_dim": 3}, {"mode": "ddpm"}, {"activation": "relu"},
        {"hidden": (8, 0)},
    ])
    def test_invalid(self, kwargs):
        """Bad layouts raise ConfigError."""
        base = {"horizon": 2, "action_dim": 2, "obs_dim": 0}
        with pytest.raises(ConfigError):
            ModelLayout(**{**base, **kwargs})

    def test_dict_roundtrip(self):
        """to_dict / from_dict preserve the layout."""
        layout = ModelLayout(3, 2, 4, hidden=(16, 8), mode="srfmp", separate_tau_mlp=True)
        assert ModelLayout.from_dict(layout.to_dict()) == layout


class TestForward:
    """Tests for the forward pass."""

    def test_zero_initial_field(self, rng):
        """A fresh model outputs zeros."""
        model = init_model(ModelLayout(3, 2, 4, hidden=(16, 16), mode="srfmp"), rng)
        out = forward(model, rng.standard_normal((5, 3, 2)), rng.uniform(size=5),
                      rng.standard_normal((5, 4)))
        assert out.shape == (5, 7)
        assert np.all(out == 0.0)

    def test_pure(self, rng):
        """Identical inputs give identical outputs."""
        model = randomize(init_model(ModelLayout(2, 2, 2, hidden=(8,)), rng), rng)
        chunk, obs = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2))
        a = forward(model, chunk, 0.3, obs)
        b = forward(model, chunk, 0.3, obs)
        assert a.tobytes() == b.tobytes()

    def test_split_output(self, rng):
        """Spatial and tau parts are separated."""
        model = randomize(init_model(ModelLayout(2, 3, 0, hidden=(8,), mode="srfmp"), rng), rng)
        spatial, tau = split_output(model, forward(model, np.zeros((4, 2, 3)), 0.0, None))
        assert spatial.shape == (4, 2, 3)
        assert tau.shape == (4,)

    def test_shape_mismatch(self, rng):
        """Wrong chunk shapes raise ConfigError."""
        model = init_model(ModelLayout(2, 2, 0, hidden=(8,)), rng)
        with pytest.raises(ConfigError):
            make_inputs(model, np.zeros((1, 3, 2)), 0.0, None)

    def test_observation_count_mismatch(self, rng):
        """One observation per chunk."""
        model = init_model(ModelLayout(2, 2, 3, hidden=(8,)), rng)
        with pytest.raises(ConfigError):
            make_inputs(model, np.zeros((2, 2, 2)), 0.0, np.zeros((3, 3)))

    def test_separate_tau_net(self, rng):
        """Both nets exist and contribute outputs."""
        layout = ModelLayout(2, 2, 0, embedding_dim=8, hidden=(8,), tau_hidden=(4,), mode="srfmp",
                             separate_tau_mlp=True)
        model = init_model(layout, rng)
        assert model.nets() == ["trunk", "tau"]
        assert forward(model, np.zeros((3, 2, 2)), 0.5, None).shape == (3, 5)
        assert parameter_count(model) == (12 * 8 + 8) + (8 * 4 + 4) + (12 * 4 + 4) + (4 + 1)


class TestBackward:
    """Tests for loss gradients."""

    def test_hand_derivative(self):
        """f(x) = w x with w=2, x=1, y=0 has dL/dw = 4."""
        layout = ModelLayout(1, 1, 0, embedding_dim=2, hidden=(), activation="identity")
        model = VectorFieldModel(layout, {
            "trunk.0.weight": np.array([[2.0, 0.0, 0.0]]),
            "trunk.0.bias": np.zeros(1),
        })
        inputs = make_inputs(model, np.ones((1, 1, 1)), 0.0, None)
        loss, grads = backward(model, Euclidean(1), inputs, np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
        assert math.isclose(loss, 4.0)
        assert math.isclose(grads["trunk.0.weight"][0, 0], 4.0)

    def test_zero_residual(self, rng):
        """Target equal to the output gives zero gradient."""
        plane = Euclidean(2)
        model = randomize(init_model(ModelLayout(2, 2, 0, hidden=(8,)), rng), rng)
        chunk = rng.standard_normal((4, 2, 2))
        inputs = make_inputs(model, chunk, 0.5, None)
        target, _ = split_output(model, forward(model, chunk, 0.5, None))
        loss, grads = backward(model, plane, inputs, chunk, target)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())

    @pytest.mark.parametrize("mode,separate", [("rfmp", False), ("srfmp", False), ("srfmp", True)])
    def test_finite_difference(self, mode, separate):
        """Analytic gradients match central differences on the sphere."""
        rng = make_rng(11)
        layout = ModelLayout(2, 3, 2, embedding_dim=4, hidden=(8, 8), tau_hidden=(8,),
                             mode=mode, separate_tau_mlp=separate)
        model = randomize(init_model(layout, rng), rng)
        sphere, x, targets = sphere_batch(rng)
        inputs = make_inputs(model, x, rng.uniform(size=5), rng.standard_normal((5, 2)))
        tau_targets = rng.standard_normal(5) if mode == "srfmp" else None
        _, grads = backward(model, sphere, inputs, x, targets, tau_targets)

        h = 1e-6
        for key, value in model.params.items():
            flat = value.reshape(-1)
            for index in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                saved = flat[index]
                flat[index] = saved + h
                up, _ = backward(model, sphere, inputs, x, targets, tau_targets)
                flat[index] = saved - h
                down, _ = backward(model, sphere, inputs, x, targets, tau_targets)
                flat[index] = saved
                numeric = (up - down) / (2 * h)
                analytic = grads[key].reshape(-1)[index]
                assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric)), key

    @pytest.mark.slow
    @pytest.mark.parametrize("text", ["R2", "S2", "SPD2", "R1xS2"])
    @pytest.mark.parametrize("mode", ["rfmp", "srfmp"])
    def test_finite_difference_every_entry(self, text, mode):
        """Every parameter entry matches central differences under each metric."""
        rng = make_rng(12)
        manifold = parse_manifold(text)
        layout = ModelLayout(2, manifold.ambient_dim, 2, embedding_dim=4, hidden=(8, 8),
                             mode=mode)
        model = randomize(init_model(layout, rng), rng, scale=0.3)
        x = manifold.random_point(rng, (4, 2))
        targets = manifold.random_tangent(x, rng)
        inputs = make_inputs(model, x, rng.uniform(size=4), rng.standard_normal((4, 2)))
        tau_targets = rng.standard_normal(4) if mode == "srfmp" else None
        _, grads = backward(model, manifold, inputs, x, targets, tau_targets)

        h = 1e-6
        for key, value in model.params.items():
            flat = value.reshape(-1)
            numeric = np.empty(flat.size)
            for index in range(flat.size):
                saved = flat[index]
                flat[index] = saved + h
                up, _ = backward(model, manifold, inputs, x, targets, tau_targets)
                flat[index] = saved - h
                down, _ = backward(model, manifold, inputs, x, targets, tau_targets)
                flat[index] = saved
                numeric[index] = (up - down) / (2 * h)
            np.testing.assert_allclose(grads[key].reshape(-1), numeric, rtol=1e-4, atol=1e-4,
                                       err_msg=key)

    def test_srfmp_needs_tau_targets(self, rng):
        """srfmp models require pseudo-time targets."""
        model = init_model(ModelLayout(1, 2, 0, hidden=(4,), mode="srfmp"), rng)
        chunk = np.zeros((2, 1, 2))
        with pytest.raises(ConfigError):
            backward(model, Euclidean(2), make_inputs(model, chunk, 0.0, None), chunk, chunk)


class TestCheckpoint:
    """Tests for checkpoint save and load."""

    def make_checkpoint(self, rng):
        layout = ModelLayout(2, 3, 2, embedding_dim=4, hidden=(8,), mode="srfmp")
        model = randomize(init_model(layout, rng), rng)
        ema = {k: v * 0.5 for k, v in model.params.items()}
        return Checkpoint(model, Sphere(3), FlowParams(lambda_x=3.0), {"ema": ema},
                          {"seed": 7, "note": "unit"})

    def test_bit_exact_roundtrip(self, rng, tmp_path):
        """Weights and outputs survive a save/load cycle exactly."""
        checkpoint = self.make_checkpoint(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, checkpoint)
        loaded = load_checkpoint(path)

        for key, value in checkpoint.model.params.items():
            assert loaded.model.params[key].tobytes() == value.tobytes()
        assert loaded.manifold == Sphere(3)
        assert loaded.flow == FlowParams(lambda_x=3.0)
        assert loaded.metadata == {"seed": 7, "note": "unit"}
        assert loaded.model.layout == checkpoint.model.layout

        chunk, obs = Sphere(3).random_point(rng, (3, 2)), rng.standard_normal((3, 2))
        a = forward(checkpoint.model, chunk, 0.2, obs)
        b = forward(loaded.model, chunk, 0.2, obs)
        assert a.tobytes() == b.tobytes()

    def test_ema_group(self, rng, tmp_path):
        """EMA weights are exposed as a model."""
        checkpoint = self.make_checkpoint(rng)
        save_checkpoint(tmp_path / "m.ckpt", checkpoint)
        ema = load_checkpoint(tmp_path / "m.ckpt").ema_model
        np.testing.assert_array_equal(ema.params["trunk.0.bias"],
                                      checkpoint.groups["ema"]["trunk.0.bias"])

    def test_missing_file(self, tmp_path):
        """Missing checkpoints raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_bad_magic(self, tmp_path):
        """Other files are rejected."""
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(FileFormatError):
            load_checkpoint(path)

    def test_truncated(self, rng, tmp_path):
        """A cut-off file is reported, not half-loaded."""
        path = tmp_path / "cut.ckpt"
        save_checkpoint(path, self.make_checkpoint(rng))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 20])
        with pytest.raises(FileFormatError):
            load_checkpoint(path)
