import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laserflow.trajectory import (
    BoxTrajectory,
    HeadLayout,
    PerPointPrediction,
    TrajectoryConfig,
    corners_from_params,
    decode_step,
    decode_t0,
    decode_trajectories,
    encode_orientation,
    half_angle,
    rotate,
    rotate_to_track_frame,
    to_box_trajectory,
    trajectory_log_prob,
)


def random_prediction(rng, n=5, horizon=6):
    omega = rng.normal(size=(n, horizon + 1, 2))
    logits = rng.normal(size=(n, 3))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    return PerPointPrediction(probs, rng.uniform(3, 5, n), rng.uniform(1.5, 2.5, n),
                              rng.normal(size=(n, horizon + 1, 2)), omega, rng.normal(size=(n, horizon + 1, 2)))


class TestDecodeT0:
    def test_zero_displacement(self):
        c, h = decode_t0(np.array([3.0, 4.0]), 0.9, np.zeros(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(c, [3, 4])
        assert h == pytest.approx(0.9)

    def test_rotated_displacement(self):
        c, _ = decode_t0(np.array([0.0, 10.0]), math.pi / 2, np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(c, [0, 11], atol=1e-12)

    def test_quarter_pi_heading(self):
        _, h = decode_t0(np.zeros(2), 0.3, np.zeros(2), np.array([0.0, 1.0]))
        assert h == pytest.approx(0.3 + math.pi / 4)

    def test_zero_encoding_rejected(self):
        with pytest.raises(ValueError):
            decode_t0(np.zeros(2), 0.0, np.zeros(2), np.zeros(2))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_heading_offset_range(self, wx, wy):
        if wx == 0 and wy == 0:
            return
        _, h = decode_t0(np.zeros(2), 0.0, np.zeros(2), np.array([wx, wy]))
        assert -math.pi / 2 <= h <= math.pi / 2


class TestDecodeStep:
    def test_static_trajectory(self):
        n, horizon = 3, 6
        pred = PerPointPrediction(np.full((n, 2), 0.5), np.full(n, 4.0), np.full(n, 2.0),
                                  np.zeros((n, horizon + 1, 2)), np.tile([1.0, 0.0], (n, horizon + 1, 1)),
                                  np.zeros((n, horizon + 1, 2)))
        dec = decode_trajectories(np.ones((n, 2)), np.zeros(n), pred)
        np.testing.assert_array_equal(dec["centers"], np.ones((n, horizon + 1, 2)))
        np.testing.assert_array_equal(dec["headings"], np.zeros((n, horizon + 1)))

    def test_constant_advance(self):
        c, h = np.zeros(2), 0.0
        for t in range(1, 4):
            c, h = decode_step(c, h, 0.0, np.array([2.0, 0.0]), np.array([1.0, 0.0]))
            np.testing.assert_allclose(c, [2.0 * t, 0])

    def test_constant_turn(self):
        omega = encode_orientation(0.1)
        h = 0.2
        for _ in range(6):
            _, h = decode_step(np.zeros(2), h, 0.0, np.zeros(2), omega)
        assert h == pytest.approx(0.2 + 0.6)

    def test_vectorized_equals_fold(self):
        rng = np.random.default_rng(0)
        pred = random_prediction(rng)
        pts, theta = rng.normal(size=(5, 2)) * 10, rng.uniform(-math.pi, math.pi, 5)
        dec = decode_trajectories(pts, theta, pred)
        for i in range(5):
            c, h = decode_t0(pts[i], theta[i], pred.displacement[i, 0], pred.orientation[i, 0])
            cs, hs = [c], [h]
            for t in range(1, 7):
                c, h = decode_step(c, h, theta[i], pred.displacement[i, t], pred.orientation[i, t])
                cs.append(c)
                hs.append(h)
            np.testing.assert_allclose(dec["centers"][i], cs, atol=1e-12)
            np.testing.assert_allclose(dec["headings"][i], hs, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-math.pi, math.pi))
    def test_rotation_equivariance(self, seed, psi):
        rng = np.random.default_rng(seed)
        pred = random_prediction(rng)
        pts, theta = rng.normal(size=(5, 2)) * 20, rng.uniform(-math.pi, math.pi, 5)
        a = decode_trajectories(pts, theta, pred)
        b = decode_trajectories(rotate(pts, psi), theta + psi, pred)
        np.testing.assert_allclose(b["centers"], rotate(a["centers"], psi), atol=1e-9)
        np.testing.assert_allclose(b["headings"], a["headings"] + psi, atol=1e-9)

    def test_heading_encoding_is_pi_periodic(self):
        for w in np.linspace(-3, 3, 13):
            np.testing.assert_allclose(encode_orientation(w), encode_orientation(w + math.pi), atol=1e-12)
            c1 = corners_from_params(np.zeros(2), half_angle(encode_orientation(w)), 4.0, 2.0)
            c2 = corners_from_params(np.zeros(2), half_angle(encode_orientation(w + math.pi)), 4.0, 2.0)
            np.testing.assert_allclose(c1, c2, atol=1e-12)


class TestCorners:
    def test_axis_aligned(self):
        c = corners_from_params(np.zeros(2), 0.0, 4.0, 2.0)
        np.testing.assert_allclose(c, [[2, 1], [2, -1], [-2, -1], [-2, 1]])

    def test_quarter_turn(self):
        c = corners_from_params(np.zeros(2), math.pi / 2, 4.0, 2.0)
        np.testing.assert_allclose(c, [[-1, 2], [1, 2], [1, -2], [-1, -2]], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-4, 4), st.floats(0.1, 10), st.floats(0.1, 10))
    def test_centroid_and_diagonal(self, x, y, phi, l, w):
        c = corners_from_params(np.array([x, y]), phi, l, w)
        np.testing.assert_allclose(c.mean(0), [x, y], atol=1e-9)
        assert np.linalg.norm(c[0] - c[2]) == pytest.approx(math.hypot(l, w))

    def test_track_frame_identity_and_alignment(self):
        c = corners_from_params(np.array([3.0, 1.0]), 0.0, 4.0, 2.0)
        np.testing.assert_array_equal(rotate_to_track_frame(c, 0.0), c)
        phi = 0.8
        center = np.array([3.0, -2.0])
        c = corners_from_params(center, phi, 4.0, 2.0)
        local = rotate_to_track_frame(c, phi) - rotate(center, -phi)
        np.testing.assert_allclose(local, [[2, 1], [2, -1], [-2, -1], [-2, 1]], atol=1e-12)

    def test_track_frame_preserves_distances(self):
        rng = np.random.default_rng(1)
        c = rng.normal(size=(4, 2))
        r = rotate_to_track_frame(c, rng.uniform(-3, 3))
        d1 = np.linalg.norm(c[:, None] - c[None], axis=-1)
        d2 = np.linalg.norm(r[:, None] - r[None], axis=-1)
        np.testing.assert_allclose(d1, d2, atol=1e-12)


class TestBoxTrajectory:
    def test_validation(self):
        with pytest.raises(ValueError):
            BoxTrajectory(np.zeros((3, 2)), np.zeros(2), 4.0, 2.0)
        with pytest.raises(ValueError):
            BoxTrajectory(np.zeros((2, 2)), np.zeros(2), 0.0, 2.0)
        with pytest.raises(ValueError):
            BoxTrajectory(np.zeros((2, 2)), np.zeros(2), 4.0, 2.0, np.array([1.0, -1.0]), np.ones(2))

    def test_json_round_trip(self):
        rng = np.random.default_rng(2)
        t = BoxTrajectory(rng.normal(size=(7, 2)), rng.normal(size=7), 4.2, 1.9, rng.uniform(0.1, 1, 7),
                          rng.uniform(0.1, 1, 7))
        doc = t.to_json(0.5)
        assert [d["t"] for d in doc] == [0.5 * k for k in range(7)]
        assert set(doc[0]) == {"t", "center", "heading", "corners", "l", "w", "b_along", "b_cross"}
        back = BoxTrajectory.from_json(doc)
        np.testing.assert_array_equal(back.centers, t.centers)
        np.testing.assert_array_equal(back.b_cross, t.b_cross)

    def test_transformed(self):
        t = BoxTrajectory(np.array([[1.0, 0.0]]), np.array([0.0]), 4.0, 2.0)
        u = t.transformed(math.pi / 2, np.array([1.0, 1.0]))
        np.testing.assert_allclose(u.centers, [[1.0, 2.0]], atol=1e-12)
        assert u.headings[0] == pytest.approx(math.pi / 2)

    def test_head_layout(self):
        lay = HeadLayout(2, 6)
        assert lay.channels == 2 + 2 + 42
        raw = np.random.default_rng(3).normal(size=(4, lay.channels))
        pred = lay.split(raw)
        np.testing.assert_allclose(pred.class_probs.sum(-1), 1.0, atol=1e-12)
        assert np.all(pred.scales > 0)
        assert pred.displacement.shape == (4, 7, 2)
        np.testing.assert_array_equal(pred.log_scale[:, 3], raw[:, 4 + 18 + 4:4 + 18 + 6])
        assert TrajectoryConfig().steps == 7
        with pytest.raises(ValueError):
            TrajectoryConfig(horizon=0)


class TestLogProb:
    def make(self, b=1.0, steps=7):
        rng = np.random.default_rng(4)
        return BoxTrajectory(rng.normal(size=(steps, 2)), rng.normal(size=steps), 4.0, 2.0, np.full(steps, b),
                             np.full(steps, b))

    def test_exact_mean(self):
        t = self.make()
        assert trajectory_log_prob(t, t) == pytest.approx(-7 * 8 * math.log(2))

    def test_doubling_scales(self):
        t, u = self.make(1.0), self.make(2.0)
        assert trajectory_log_prob(t, t) - trajectory_log_prob(u, t) == pytest.approx(7 * 8 * math.log(2))

    def test_matches_term_by_term_sum(self):
        rng = np.random.default_rng(5)
        pred = BoxTrajectory(rng.normal(size=(3, 2)), rng.normal(size=3), 4.0, 2.0, rng.uniform(0.2, 2, 3),
                             rng.uniform(0.2, 2, 3))
        obs = BoxTrajectory(pred.centers + rng.normal(size=(3, 2)) * 0.3, pred.headings + 0.05, 4.1, 1.9)
        total = 0.0
        for t in range(3):
            c, s = math.cos(pred.headings[t]), math.sin(pred.headings[t])
            for k in range(4):
                mp, mo = pred.corners[t, k], obs.corners[t, k]
                along = (c * mp[0] + s * mp[1], c * mo[0] + s * mo[1])
                cross = (-s * mp[0] + c * mp[1], -s * mo[0] + c * mo[1])
                total += -math.log(2 * pred.b_along[t]) - abs(along[1] - along[0]) / pred.b_along[t]
                total += -math.log(2 * pred.b_cross[t]) - abs(cross[1] - cross[0]) / pred.b_cross[t]
        assert trajectory_log_prob(pred, obs) == pytest.approx(total, abs=1e-9)

    def test_requires_scales(self):
        t = BoxTrajectory(np.zeros((2, 2)), np.zeros(2), 4.0, 2.0)
        with pytest.raises(ValueError):
            trajectory_log_prob(t, t)

    def test_to_box_trajectory(self):
        rng = np.random.default_rng(6)
        pred = random_prediction(rng)
        dec = decode_trajectories(rng.normal(size=(5, 2)), rng.normal(size=5), pred)
        t = to_box_trajectory(dec, 2)
        np.testing.assert_array_equal(t.centers, dec["centers"][2])
        np.testing.assert_array_equal(t.b_along, pred.scales[2, :, 0])
