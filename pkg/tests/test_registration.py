import itertools
import math

import numpy as np
import pytest

from tunnelloc.geometry import Pose2D
from tunnelloc.registration import (
    IcpDiverged,
    apply_planar,
    associate_landmarks,
    associate_lane,
    icp,
    ndt_match,
    ndt_score,
)
from tunnelloc.tunnel import FacilityKind, Landmark, LandmarkMap, LaneDistMap

from .conftest import deg


def cloud(n=80, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-10, 10, n), rng.uniform(-10, 10, n), rng.uniform(0, 3, n)])


def inverse_planar(dx, dy, dpsi):
    c, s = math.cos(dpsi), math.sin(dpsi)
    return -(c * dx + s * dy), -(-s * dx + c * dy), -dpsi


# ---------------------------------------------------------------- ICP


class TestIcp:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_recovers_inverse(self, seed):
        target = cloud(seed=seed)
        source = apply_planar(target, 0.5, 0.0, deg(2.0))
        res = icp(source, target)
        ex, ey, epsi = inverse_planar(0.5, 0.0, deg(2.0))
        assert res.converged
        assert res.dx == pytest.approx(ex, abs=1e-3)
        assert res.dy == pytest.approx(ey, abs=1e-3)
        assert res.dpsi == pytest.approx(epsi, abs=1e-4)

    def test_identity_in_one_iteration(self):
        pts = cloud()
        res = icp(pts, pts)
        assert res.converged and res.iterations == 1
        np.testing.assert_allclose(res.params, 0.0, atol=1e-12)

    @pytest.mark.parametrize("dof", [2, 3])
    def test_rms_never_grows(self, dof):
        rng = np.random.default_rng(5)
        target = cloud(200, seed=5)
        source = apply_planar(target, 0.4, 0.3, deg(4.0)) + rng.normal(0, 0.02, target.shape)
        res = icp(source, target, dof=dof)
        assert np.all(np.diff(res.history) <= 1e-12)
        assert res.history[-1] < res.history[0]

    def test_two_dof_keeps_y(self):
        target = cloud()
        res = icp(apply_planar(target, 0.3, 0.0, deg(1.0)), target, dof=2, init=(0.0, 0.7, 0.0))
        assert res.dy == 0.7

    def test_too_few_correspondences(self):
        target = cloud()
        with pytest.raises(IcpDiverged):
            icp(target + np.array([100.0, 0.0, 0.0]), target, max_corr_dist=1.0)

    @pytest.mark.parametrize("dof", [1, 4])
    def test_rejects_dof(self, dof):
        with pytest.raises(ValueError):
            icp(cloud(), cloud(), dof=dof)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            icp(np.zeros((0, 3)), cloud())


# ---------------------------------------------------------------- lane association


def random_lane_map(n=50, seed=0):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-20, 20, (n, 2))
    covs = []
    for _ in range(n):
        a = rng.uniform(0, math.pi)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        covs.append(R @ np.diag([rng.uniform(0.5, 4.0), rng.uniform(0.005, 0.05)]) @ R.T)
    return LaneDistMap(means, np.array(covs))


def brute_force_lane(points, lane_map, euclid_gate, maha_gate):
    pairs, maha = [], []
    for i, p in enumerate(points):
        d = [math.hypot(*(p - m)) for m in lane_map.means]
        j = int(np.argmin(d))
        if d[j] > euclid_gate:
            continue
        q = p - lane_map.means[j]
        m = math.sqrt(q @ np.linalg.inv(lane_map.covs[j]) @ q)
        if maha_gate is not None and m > maha_gate:
            continue
        pairs.append((i, j))
        maha.append(m)
    return pairs, maha


class TestAssociateLane:
    @pytest.mark.parametrize("maha_gate", [3.0, None])
    def test_matches_brute_force(self, maha_gate):
        lane_map = random_lane_map()
        pts = np.random.default_rng(1).uniform(-21, 21, (200, 2))
        got = associate_lane(pts, lane_map, 2.0, maha_gate)
        pairs, maha = brute_force_lane(pts, lane_map, 2.0, maha_gate)
        assert [tuple(p) for p in got.pairs] == pairs
        np.testing.assert_allclose(got.mahalanobis, maha, rtol=1e-9)
        assert len(pairs) > 10

    def test_point_at_mean(self):
        lane_map = random_lane_map()
        got = associate_lane(lane_map.means[[7]], lane_map)
        assert got.pairs.tolist() == [[0, 7]]
        assert got.mahalanobis[0] == pytest.approx(0.0, abs=1e-12)

    def test_far_point_unpaired(self):
        lane_map = random_lane_map()
        assert len(associate_lane(np.array([[100.0, 100.0]]), lane_map)) == 0

    def test_empty_inputs(self):
        assert len(associate_lane(np.zeros((0, 2)), random_lane_map())) == 0


# ---------------------------------------------------------------- NDT


def dashed_map(period=5.0, dash=2.0, lines=(-3.6, 3.6), reach=40.0, sigma_across=0.3):
    """Short dashes along y: every segment pins the along-line position too."""
    means, covs = [], []
    for x in lines:
        for y in np.arange(-reach, reach + 1e-9, period):
            means.append([x, y])
            covs.append(np.diag([sigma_across**2, dash**2 / 12.0]))
    return LaneDistMap(np.array(means), np.array(covs))


def solid_line_map(segment=10.0, reach=60.0):
    ys = np.arange(-reach, reach + 1e-9, segment)
    means = np.column_stack([np.zeros_like(ys), ys])
    covs = np.repeat(np.diag([0.075**2, segment**2 / 12.0])[None], len(ys), axis=0)
    return LaneDistMap(means, covs)


NORTH = Pose2D(0.0, 0.0, 0.5 * math.pi)  # vehicle frame coincides with the local frame


class TestNdt:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_and_hessian_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        lane_map = random_lane_map(30, seed)
        pts = lane_map.means + rng.normal(0, 0.3, lane_map.means.shape)
        center = rng.uniform(-2, 2, 2)
        x = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.05, 0.05)])
        args = (pts, lane_map.means, lane_map.inv_covs, center)
        _, g, H = ndt_score(x, *args)
        h = 1e-6
        g_fd = np.zeros(3)
        H_fd = np.zeros((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            sp, gp, _ = ndt_score(x + e, *args)
            sm, gm, _ = ndt_score(x - e, *args)
            g_fd[k] = (sp - sm) / (2 * h)
            H_fd[:, k] = (gp - gm) / (2 * h)
        assert np.linalg.norm(g - g_fd) <= 1e-4 * np.linalg.norm(g_fd)
        assert np.linalg.norm(H - H_fd) <= 1e-4 * np.linalg.norm(H_fd)

    def test_points_at_means(self):
        lane_map = dashed_map()
        pts_v = NORTH.to_vehicle(lane_map.means)
        res = ndt_match(pts_v, lane_map, NORTH)
        assert res.score == pytest.approx(len(lane_map), rel=1e-9)
        np.testing.assert_allclose(res.params, 0.0, atol=1e-9)

    @pytest.mark.parametrize(
        "delta", [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 5.0), (1.0, -1.0, 5.0), (-1.0, 1.0, -5.0)]
    )
    def test_dashed_map_recovers_offset(self, delta):
        lane_map = dashed_map()
        dx, dy, dyaw = delta
        truth = NORTH
        init = Pose2D(truth.x - dx, truth.y - dy, truth.psi - deg(dyaw))
        keep = np.abs(lane_map.means[:, 1]) <= 20.0
        pts_v = truth.to_vehicle(lane_map.means[keep])
        res = ndt_match(pts_v, lane_map, init, euclid_gate=3.0, maha_gate=None, max_iter=50)
        assert res.converged
        assert init.x + res.dx == pytest.approx(truth.x, abs=0.02)
        assert init.y + res.dy == pytest.approx(truth.y, abs=0.02)
        assert init.psi + res.dpsi == pytest.approx(truth.psi, abs=0.002)
        assert all(b >= a - 1e-12 for a, b in zip(res.history, res.history[1:]))

    def test_solid_line_is_degenerate_along_track(self):
        lane_map = solid_line_map()
        ys = np.arange(-30.0, 30.0, 0.25)
        pts = np.column_stack([np.zeros_like(ys), ys])
        assoc = associate_lane(pts, lane_map)
        j = assoc.pairs[:, 1]
        _, _, H = ndt_score(np.zeros(3), pts[assoc.pairs[:, 0]], lane_map.means[j], lane_map.inv_covs[j], np.zeros(2))
        along, across = abs(H[1, 1]), abs(H[0, 0])
        assert along <= 1e-3 * across

    def test_lateral_offset_on_solid_line(self):
        lane_map = solid_line_map()
        ys = np.arange(-30.0, 30.0, 0.25)
        pts_v = np.column_stack([np.zeros_like(ys), ys])
        init = Pose2D(-0.1, 0.0, NORTH.psi)
        res = ndt_match(pts_v, lane_map, init)
        assert init.x + res.dx == pytest.approx(0.0, abs=0.01)
        # nothing pins the along-track position, so it must not wander
        assert abs(res.dy) <= 0.05

    def test_too_few_points(self):
        res = ndt_match(np.zeros((3, 2)), dashed_map(), NORTH)
        assert not res.converged and res.params.tolist() == [0.0, 0.0, 0.0]

    def test_score_never_decreases(self):
        lane_map = dashed_map()
        rng = np.random.default_rng(3)
        pts_v = NORTH.to_vehicle(lane_map.means) + rng.normal(0, 0.1, lane_map.means.shape)
        res = ndt_match(pts_v, lane_map, Pose2D(0.3, -0.4, NORTH.psi + deg(1.0)))
        assert np.all(np.diff(res.history) >= -1e-12)


# ---------------------------------------------------------------- landmark association


def landmark_map(entries):
    return LandmarkMap([Landmark(k, np.array(p, dtype=float), 3.0) for k, p in entries])


def brute_force_landmarks(kinds, positions, lm, gate):
    """Exhaustive one-to-one assignment: most pairs first, then least total distance."""
    n, m = len(kinds), len(lm)
    best = (0, 0.0, [])
    for targets in itertools.product(range(-1, m), repeat=n):
        used = [t for t in targets if t >= 0]
        if len(used) != len(set(used)):
            continue
        pairs, total, ok = [], 0.0, True
        for i, j in enumerate(targets):
            if j < 0:
                continue
            d = math.hypot(*(positions[i] - lm.positions[j]))
            if FacilityKind(lm.kinds[j]) is not kinds[i] or d > gate:
                ok = False
                break
            pairs.append((i, j))
            total += d
        if ok and (len(pairs) > best[0] or (len(pairs) == best[0] and total < best[1] - 1e-12)):
            best = (len(pairs), total, pairs)
    return sorted(best[2])


class TestAssociateLandmarks:
    def test_close_detection_paired(self):
        lm = landmark_map([(FacilityKind.LAMP, (10.0, 0.0))])
        got = associate_landmarks([FacilityKind.LAMP], [[10.2, 0.0]], lm)
        assert got.pairs.tolist() == [[0, 0]]
        assert got.euclidean[0] == pytest.approx(0.2)

    def test_never_across_kinds(self):
        lm = landmark_map([(FacilityKind.EXIT_LIGHT, (10.0, 0.0))])
        assert len(associate_landmarks([FacilityKind.LAMP], [[10.0, 0.0]], lm)) == 0

    def test_gate(self):
        lm = landmark_map([(FacilityKind.LAMP, (10.0, 0.0))])
        assert len(associate_landmarks([FacilityKind.LAMP], [[13.01, 0.0]], lm, gate=3.0)) == 0

    def test_one_to_one(self):
        lm = landmark_map([(FacilityKind.LAMP, (10.0, 0.0))])
        got = associate_landmarks([FacilityKind.LAMP] * 2, [[10.5, 0.0], [10.1, 0.0]], lm)
        assert got.pairs.tolist() == [[1, 0]]

    @pytest.mark.parametrize("seed", range(30))
    def test_greedy_is_optimal_on_small_instances(self, seed):
        # map spacing is tunnel-like: same-kind units far apart relative to the gate
        rng = np.random.default_rng(seed)
        kinds = list(FacilityKind)[:4]
        entries = [(kinds[i % 4], (12.0 * i, rng.uniform(-6, 6))) for i in range(8)]
        lm = landmark_map(entries)
        n = rng.integers(1, 4)
        pick = rng.choice(len(entries), n, replace=False)
        det_kinds = [entries[k][0] for k in pick]
        det_pos = np.array([entries[k][1] for k in pick]) + rng.normal(0, 1.0, (n, 2))
        got = associate_landmarks(det_kinds, det_pos, lm)
        assert sorted(map(tuple, got.pairs.tolist())) == brute_force_landmarks(det_kinds, det_pos, lm, 3.0)
