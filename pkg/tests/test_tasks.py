"""
Tests for synthetic datasets, the reach environment and dataset files.
"""

import math

import numpy as np
import pytest

from rfmp.config import TaskConfig
from rfmp.distributions import make_rng
from rfmp.errors import FileFormatError, ProtocolError
from rfmp.manifolds import SPD, Euclidean, Sphere
from rfmp.tasks import (
    COORD_LIMIT,
    ReachEnv,
    gen_reach_demos,
    gen_spd_dataset,
    gen_spd_demos,
    gen_strokes,
    generate_task_dataset,
    nearest_distance,
    reach_env_step,
    read_dataset,
    spd_curve,
    sphere_to_stereographic,
    stereographic_to_sphere,
    strokes_to_sphere,
    write_dataset,
)


class TestStrokes:
    """Tests for planar stroke demonstrations."""

    def test_noise_free_copies(self):
        """Zero noise gives identical demonstrations."""
        dataset = gen_strokes("L", n_demos=2, noise=0.0, seed=0)
        np.testing.assert_array_equal(dataset.demos[0].actions, dataset.demos[1].actions)
        assert dataset.manifold == Euclidean(2)

    def test_l_shape_corners(self):
        """The L starts top-left, turns bottom-left and ends bottom-right."""
        actions = gen_strokes("L", n_demos=1, noise=0.0, seed=0, length=65).demos[0].actions
        np.testing.assert_allclose(actions[0], [-0.8, 0.8])
        np.testing.assert_allclose(actions[32], [-0.8, -0.8])
        np.testing.assert_allclose(actions[-1], [0.8, -0.8])

    def test_two_modes(self):
        """TwoMode alternates between upper and lower routes."""
        dataset = gen_strokes("TwoMode", n_demos=4, noise=0.0, seed=0, length=33)
        middles = [demo.actions[16, 1] for demo in dataset.demos]
        assert middles[0] > 0.5 and middles[1] < -0.5
        assert middles[0] == middles[2]

    def test_bounded(self):
        """Large noise is clipped to the coordinate limit."""
        dataset = gen_strokes("S", n_demos=5, noise=3.0, seed=1)
        for demo in dataset.demos:
            assert np.all(np.abs(demo.actions) <= COORD_LIMIT)

    def test_deterministic(self):
        """Same seed, bit-identical demonstrations."""
        a = gen_strokes("S", n_demos=3, noise=0.1, seed=4)
        b = gen_strokes("S", n_demos=3, noise=0.1, seed=4)
        for x, y in zip(a.demos, b.demos):
            assert x.actions.tobytes() == y.actions.tobytes()

    def test_unknown_shape(self):
        """Only L, S and TwoMode exist."""
        with pytest.raises(ValueError):
            gen_strokes("Z", n_demos=1, noise=0.0, seed=0)


class TestStereographic:
    """Tests for the plane-to-sphere lift."""

    def test_center_is_pole(self):
        """The origin maps to the north pole."""
        np.testing.assert_allclose(stereographic_to_sphere([0.0, 0.0]), [0.0, 0.0, 1.0])

    def test_unit_circle_is_equator(self):
        """r = 1 maps to the equator."""
        np.testing.assert_allclose(stereographic_to_sphere([1.0, 0.0]), [1.0, 0.0, 0.0],
                                   atol=1e-15)

    def test_formula(self):
        """(0.5, 0.5) maps to (2/3, 2/3, 1/3)."""
        np.testing.assert_allclose(stereographic_to_sphere([0.5, 0.5]), [2 / 3, 2 / 3, 1 / 3],
                                   rtol=1e-12)

    def test_roundtrip(self):
        """The inverse map recovers points inside the bound."""
        p = make_rng(0).uniform(-1.5, 1.5, size=(100, 2))
        np.testing.assert_allclose(sphere_to_stereographic(stereographic_to_sphere(p)), p,
                                   atol=1e-12)

    def test_clipping(self):
        """Points beyond the bound are clipped first."""
        np.testing.assert_allclose(stereographic_to_sphere([5.0, 0.0]),
                                   stereographic_to_sphere([1.5, 0.0]))

    def test_lifted_dataset(self):
        """Lifted strokes lie on S^2."""
        dataset = strokes_to_sphere(gen_strokes("S", n_demos=3, noise=0.05, seed=2))
        assert dataset.manifold == Sphere(3)
        dataset.validate(T_p=4, T_o=2)


class TestSpd:
    """Tests for the SPD curve dataset."""

    def test_curve_endpoints(self):
        """The curve starts at diag(e^-0.6, e^0.3)."""
        np.testing.assert_allclose(spd_curve(0.0), [math.exp(-0.6), 0.0, 0.0, math.exp(0.3)],
                                   atol=1e-15)

    def test_no_jitter_on_curve(self):
        """jitter=0 reproduces spd_curve at the drawn parameters."""
        points = gen_spd_dataset(20, seed=3, jitter=0.0)
        expected = spd_curve(make_rng(3).uniform(0.0, 1.0, size=20))
        np.testing.assert_array_equal(points, expected)

    def test_positive_definite(self):
        """Jittered points stay SPD."""
        points = gen_spd_dataset(100, seed=0, jitter=0.2)
        assert points.shape == (100, 4)
        assert np.all(SPD(2).min_eigenvalue(points) > 0.0)
        SPD(2).check_point(points)

    def test_deterministic(self):
        """Same seed, same bytes."""
        assert gen_spd_dataset(100, 5).tobytes() == gen_spd_dataset(100, 5).tobytes()

    def test_demos(self):
        """Demonstrations traverse the curve."""
        dataset = gen_spd_demos(3, length=20, seed=0, jitter=0.0)
        np.testing.assert_allclose(dataset.demos[0].actions[-1], spd_curve(1.0))
        dataset.validate(T_p=4, T_o=2)


class TestReachEnv:
    """Tests for the reach environment."""

    def test_goal_on_first_step(self):
        """Commanding the goal finishes with score 1."""
        env = ReachEnv([0.0, 0.0], [1.0, 0.0])
        _, done, score = reach_env_step(env, [1.0, 0.0])
        assert done and score == 1.0 and env.reached

    def test_no_motion(self):
        """Standing still scores zero and times out."""
        env = ReachEnv([0.0, 0.0], [1.0, 0.0], max_steps=3)
        for _ in range(3):
            _, done, score = env.step([0.0, 0.0])
        assert done and score == 0.0 and not env.reached

    def test_step_after_done(self):
        """Stepping a finished episode is a protocol error."""
        env = ReachEnv([0.0, 0.0], [1.0, 0.0])
        env.step([1.0, 0.0])
        with pytest.raises(ProtocolError):
            env.step([1.0, 0.0])

    def test_reset(self):
        """Reset restores the start and the observation layout."""
        env = ReachEnv([0.2, 0.1], [1.0, 0.0])
        env.step([0.5, 0.5])
        obs = env.reset()
        np.testing.assert_array_equal(obs, [0.2, 0.1, 1.0, 0.0])
        assert len(env.positions) == 1
        np.testing.assert_array_equal(env.positions[0], env.start)

    def test_clipping(self):
        """Planar actions are clipped to the bound."""
        env = ReachEnv([0.0, 0.0], [1.0, 0.0])
        obs, _, _ = env.step([4.0, -4.0])
        np.testing.assert_array_equal(obs[:2], [COORD_LIMIT, -COORD_LIMIT])

    def test_sphere_projection(self):
        """Sphere actions are projected onto the sphere."""
        env = ReachEnv.random(0, sphere=True)
        obs, _, _ = env.step([0.0, 0.0, 2.0])
        np.testing.assert_allclose(obs[:3], [0.0, 0.0, 1.0])

    def test_random_separation(self):
        """Random tasks keep start and goal apart."""
        for seed in range(20):
            env = ReachEnv.random(seed)
            assert np.linalg.norm(env.goal - env.start) >= 0.5

    def test_expert_reaches_goal(self):
        """Replaying an expert demonstration succeeds."""
        dataset = gen_reach_demos(n_demos=1, seed=0, length=48)
        demo = dataset.demos[0]
        env = ReachEnv(demo.actions[0], demo.observations[0, 2:], max_steps=100)
        done = False
        for action in demo.actions[1:]:
            _, done, _ = env.step(action)
            if done:
                break
        assert env.reached

    def test_sphere_demos(self):
        """Sphere expert paths move at most max_step per step."""
        dataset = gen_reach_demos(n_demos=2, seed=1, sphere=True, length=30)
        sphere = Sphere(3)
        for demo in dataset.demos:
            steps = sphere.distance(demo.actions[1:], demo.actions[:-1])
            assert np.all(steps <= 0.1 + 1e-12)
        dataset.validate(T_p=4, T_o=2)


class TestDatasetFiles:
    """Tests for dataset generation from config and file I/O."""

    @pytest.mark.parametrize("task", [
        TaskConfig(name="strokes", n_demos=3, length=20),
        TaskConfig(name="strokes", n_demos=2, length=20, sphere=True),
        TaskConfig(name="reach", n_demos=2, length=20),
        TaskConfig(name="spd", n_demos=2, length=20),
    ])
    def test_bit_exact_roundtrip(self, task, tmp_path):
        """Write then read reproduces every value."""
        dataset = generate_task_dataset(task, seed=1)
        write_dataset(tmp_path / "data.csv", dataset)
        loaded = read_dataset(tmp_path / "data.csv")
        assert loaded.manifold == dataset.manifold
        assert loaded.metadata == dataset.metadata
        for a, b in zip(dataset.demos, loaded.demos):
            assert a.actions.tobytes() == b.actions.tobytes()
            assert a.observations.tobytes() == b.observations.tobytes()

    def test_byte_identical_files(self, tmp_path):
        """Same seed writes the same file."""
        task = TaskConfig(name="reach", n_demos=2, length=16)
        write_dataset(tmp_path / "a.csv", generate_task_dataset(task, seed=2))
        write_dataset(tmp_path / "b.csv", generate_task_dataset(task, seed=2))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_missing_file(self, tmp_path):
        """Missing datasets raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "absent.csv")

    def test_malformed_row(self, tmp_path):
        """Short rows are rejected."""
        path = tmp_path / "bad.csv"
        write_dataset(path, gen_strokes("L", n_demos=1, noise=0.0, seed=0, length=8))
        with open(path, "a") as f:
            f.write("0,8,1.0\n")
        with pytest.raises(FileFormatError):
            read_dataset(path)

    def test_malformed_header(self, tmp_path):
        """A non-JSON first line is rejected."""
        path = tmp_path / "bad.csv"
        path.write_text("not json\n")
        with pytest.raises(FileFormatError):
            read_dataset(path)

    def test_nearest_distance(self):
        """Distances to the closest data point."""
        data = np.array([[0.0, 0.0], [1.0, 0.0]])
        d = nearest_distance(Euclidean(2), np.array([[0.9, 0.0], [0.0, 0.5]]), data)
        np.testing.assert_allclose(d, [0.1, 0.5])
