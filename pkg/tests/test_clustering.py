import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laserflow.clustering import Detection, mean_shift_cluster, mean_shift_modes, non_max_suppression
from laserflow.trajectory import BoxTrajectory

from oracles import exact_mean_shift


def predictions(centers, rng=None, steps=3):
    """Per-point trajectory dict whose t=0 centers are ``centers``."""
    n = len(centers)
    rng = rng or np.random.default_rng(0)
    vel = rng.normal(size=(n, 1, 2))
    return {
        "centers": centers[:, None, :] + vel * np.arange(steps)[None, :, None],
        "headings": np.tile(rng.uniform(-0.2, 0.2, (n, 1)), (1, steps)),
        "length": rng.uniform(3.8, 4.2, n),
        "width": rng.uniform(1.8, 2.0, n),
        "scales": rng.uniform(0.1, 1.0, (n, steps, 2)),
    }


def as_tuple(d: Detection):
    t = d.trajectory
    return (round(d.score, 12), d.num_points, tuple(np.round(t.centers.ravel(), 9)), round(t.length, 9))


class TestMeanShift:
    def test_identical_predictions(self):
        centers = np.tile([5.0, -3.0], (20, 1))
        traj = {"centers": np.tile([[5.0, -3.0], [6.0, -3.0]], (20, 1, 1)), "headings": np.full((20, 2), 0.3),
                "length": np.full(20, 4.0), "width": np.full(20, 2.0)}
        dets = mean_shift_cluster(centers, traj, np.full(20, 0.8))
        assert len(dets) == 1
        d = dets[0]
        np.testing.assert_allclose(d.trajectory.centers, [[5.0, -3.0], [6.0, -3.0]])
        np.testing.assert_allclose(d.trajectory.headings, 0.3)
        assert d.trajectory.length == pytest.approx(4.0) and d.score == pytest.approx(0.8)
        assert d.num_points == 20

    def test_two_far_groups(self):
        centers = np.concatenate([np.tile([0.0, 0.0], (10, 1)), np.tile([25.0, 0.0], (10, 1))])
        dets = mean_shift_cluster(centers, predictions(centers), np.full(20, 0.9), bandwidth=0.5)
        assert len(dets) == 2

    def test_tight_group_against_exact_mean_shift(self):
        rng = np.random.default_rng(1)
        bw = 0.5
        centers = np.array([3.3, 7.1]) + rng.uniform(-1, 1, (100, 2)) * 0.1 * bw / np.sqrt(2)
        probs = rng.uniform(0.6, 1.0, 100)
        pred = predictions(centers, rng)
        dets = mean_shift_cluster(centers, pred, probs, bandwidth=bw)
        assert len(dets) == 1
        oracle = exact_mean_shift(centers, probs, bw, centers[0])
        np.testing.assert_allclose(dets[0].trajectory.centers[0], oracle, atol=1e-6)
        np.testing.assert_allclose(dets[0].trajectory.centers[0], probs @ centers / probs.sum(), atol=1e-9)
        assert dets[0].score == pytest.approx(probs.mean())

    def test_modes_converge(self):
        rng = np.random.default_rng(2)
        centers = np.concatenate([rng.normal(0, 0.1, (30, 2)), rng.normal(10, 0.1, (30, 2))])
        modes, cell_of = mean_shift_modes(centers, np.ones(60), 1.0)
        assert len(cell_of) == 60
        for m in modes:
            assert min(np.linalg.norm(m), np.linalg.norm(m - 10)) < 0.5

    def test_threshold_and_empty(self):
        centers = np.zeros((5, 2))
        assert mean_shift_cluster(centers, predictions(centers), np.full(5, 0.2)) == []
        assert mean_shift_cluster(np.zeros((0, 2)), predictions(np.zeros((0, 2))), np.zeros(0)) == []
        with pytest.raises(ValueError):
            mean_shift_cluster(centers, predictions(centers), np.ones(5), bandwidth=0.0)

    def test_without_scales(self):
        centers = np.zeros((3, 2))
        pred = predictions(centers)
        del pred["scales"]
        d = mean_shift_cluster(centers, pred, np.ones(3))[0]
        assert d.trajectory.b_along is None

    def test_heading_average_is_modulo_pi(self):
        centers = np.zeros((2, 2))
        pred = predictions(centers, steps=1)
        pred["headings"] = np.array([[np.pi / 2 - 0.05], [-np.pi / 2 + 0.05]])
        d = mean_shift_cluster(centers, pred, np.ones(2))[0]
        assert abs(abs(d.trajectory.headings[0]) - np.pi / 2) < 1e-9


def scattered(seed, n=60):
    rng = np.random.default_rng(seed)
    hubs = rng.uniform(-20, 20, (4, 2))
    centers = hubs[rng.integers(0, 4, n)] + rng.normal(scale=0.4, size=(n, 2))
    return centers, predictions(centers, rng), rng.uniform(0.3, 1.0, n)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        centers, pred, probs = scattered(seed)
        perm = np.random.default_rng(seed + 1).permutation(len(centers))
        a = mean_shift_cluster(centers, pred, probs)
        b = mean_shift_cluster(centers[perm], {k: v[perm] for k, v in pred.items()}, probs[perm])
        assert sorted(map(as_tuple, a)) == sorted(map(as_tuple, b))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(-50, 50))
    def test_translation_equivariance(self, seed, vx, vy):
        centers, pred, probs = scattered(seed)
        v = np.array([vx, vy])
        shifted = dict(pred, centers=pred["centers"] + v)
        a = mean_shift_cluster(centers, pred, probs, origin=np.zeros(2))
        b = mean_shift_cluster(centers + v, shifted, probs, origin=v)
        assert len(a) == len(b)
        ka = sorted(a, key=lambda d: tuple(np.round(d.trajectory.centers[0], 6)))
        kb = sorted(b, key=lambda d: tuple(np.round(d.trajectory.centers[0] - v, 6)))
        for da, db in zip(ka, kb):
            np.testing.assert_allclose(db.trajectory.centers, da.trajectory.centers + v, atol=1e-9)
            assert db.num_points == da.num_points

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
    def test_center_near_support(self, seed, bw):
        centers, pred, probs = scattered(seed)
        keep = probs >= 0.5
        for d in mean_shift_cluster(centers, pred, probs, bandwidth=bw):
            gap = np.min(np.linalg.norm(centers[keep] - d.trajectory.centers[0], axis=1))
            assert gap <= bw + 1e-9


class TestDetection:
    def test_validation(self):
        t = BoxTrajectory(np.zeros((1, 2)), np.zeros(1), 4.0, 2.0)
        with pytest.raises(ValueError):
            Detection(1.5, 1, t)
        with pytest.raises(ValueError):
            Detection(0.5, 1, t, 0)

    def test_json_round_trip(self):
        t = BoxTrajectory(np.ones((2, 2)), np.zeros(2), 4.0, 2.0, np.ones(2), np.ones(2))
        d = Detection.from_json(Detection(0.7, 2, t, 12).to_json())
        assert (d.score, d.class_id, d.num_points) == (0.7, 2, 12)
        np.testing.assert_array_equal(d.trajectory.centers, t.centers)


class TestNMS:
    def test_suppresses_overlap(self):
        def det(score, x):
            return Detection(score, 1, BoxTrajectory(np.array([[x, 0.0]]), np.zeros(1), 4.0, 2.0))

        kept = non_max_suppression([det(0.5, 0.5), det(0.9, 0.0), det(0.7, 10.0)])
        assert [d.score for d in kept] == [0.9, 0.7]
        assert non_max_suppression([]) == []
