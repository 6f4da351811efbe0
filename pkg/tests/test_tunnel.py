import math
from collections import Counter

import numpy as np
import pytest

from tunnelloc.geometry import Pose2D
from tunnelloc.tunnel import (
    PAINT_HALF_WIDTH,
    FacilityKind,
    FacilityRule,
    Landmark,
    TunnelSpec,
    WallSide,
    build_maps,
    ellipse_ring,
    place_facilities,
    virtual_cylinder,
)


def ellipse_eq(pts, spec):
    return pts[:, 0] ** 2 / spec.a**2 + pts[:, 2] ** 2 / spec.b**2


class TestSpec:
    def test_defaults(self, spec):
        assert (spec.a, spec.b, spec.lane_count, spec.lane_width) == (7.0, 6.8, 3, 3.6)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(a=5.0),  # narrower than three lanes
            dict(b=4.5),
            dict(length=0.0),
            dict(a=-1.0),
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TunnelSpec(**kwargs)

    def test_lane_geometry(self, spec):
        assert spec.lane_center(2) == pytest.approx(0.0)
        assert spec.lane_center(1) == pytest.approx(-3.6)
        np.testing.assert_allclose(spec.lane_lines(), [-5.4, -1.8, 1.8, 5.4])
        with pytest.raises(ValueError):
            spec.lane_center(4)

    def test_wall_u(self, spec):
        assert spec.wall_u(0.0) == pytest.approx(spec.a)
        assert spec.wall_u(spec.b) == pytest.approx(0.0)
        z = 2.75
        assert spec.wall_u(z) == pytest.approx(spec.a * math.sqrt(1 - (z / spec.b) ** 2))


class TestRule:
    def test_wall_side_consistency(self):
        with pytest.raises(ValueError):
            FacilityRule(FacilityKind.LAMP, 50.0, 2.75, (200, 220, 420), WallSide.LEFT)

    @pytest.mark.parametrize("interval, size", [(0.0, (1, 1, 1)), (10.0, (0, 1, 1))])
    def test_rejects_bad_numbers(self, interval, size):
        with pytest.raises(ValueError):
            FacilityRule(FacilityKind.LCS, interval, 5.25, size, WallSide.CEILING)

    def test_extents_orientation(self, spec):
        lamp = spec.rule(FacilityKind.LAMP).extents
        lcs = spec.rule(FacilityKind.LCS).extents
        # wall unit: depth (L) runs across the tunnel; ceiling unit: depth runs along it
        np.testing.assert_allclose(lamp, [0.22, 0.20, 0.42])
        np.testing.assert_allclose(lcs, [0.80, 0.25, 0.80])

    def test_landmark_kind_restricted(self):
        with pytest.raises(ValueError):
            Landmark(FacilityKind.JET_FAN, np.zeros(2), 5.5)


class TestEllipse:
    def test_extremes(self, spec):
        ring = ellipse_ring(spec, 5.0)
        np.testing.assert_allclose(ring[0], [spec.a, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(ring[-1], [-spec.a, 0.0, 0.0], atol=1e-9)
        apex = ring[np.argmax(ring[:, 2])]
        np.testing.assert_allclose(apex, [0.0, 0.0, spec.b], atol=1e-12)

    @pytest.mark.parametrize("res", [1.0, 2.0, 5.0, 45.0])
    def test_on_ellipse(self, spec, res):
        ring = ellipse_ring(spec, res)
        assert np.all(np.abs(ellipse_eq(ring, spec) - 1.0) < 1e-9)
        assert np.all(ring[:, 2] >= 0.0)
        assert ring.shape[0] == round(180 / res) + 1

    @pytest.mark.parametrize("res", [0.0, -1.0, 46.0])
    def test_rejects_resolution(self, spec, res):
        with pytest.raises(ValueError):
            ellipse_ring(spec, res)

    def test_cylinder_single_ring(self, spec):
        np.testing.assert_allclose(virtual_cylinder(spec, 5.0, 2.0, 0.0), ellipse_ring(spec, 5.0))

    def test_cylinder_ring_count(self, spec):
        ring = ellipse_ring(spec, 5.0)
        cyl = virtual_cylinder(spec, 5.0, 2.0, 40.0)
        assert cyl.shape[0] == 21 * ring.shape[0]
        ys = np.unique(np.round(cyl[:, 1], 9))
        np.testing.assert_allclose(ys, np.arange(-20.0, 20.1, 2.0))
        assert np.all(np.abs(ellipse_eq(cyl, spec) - 1.0) < 1e-9)

    def test_cylinder_rejects_spacing(self, spec):
        with pytest.raises(ValueError):
            virtual_cylinder(spec, 5.0, 0.0, 10.0)


class TestPlacement:
    def test_counts(self, spec):
        placed = place_facilities(spec, seed=3)
        c = Counter(f.kind for f in placed)
        # offset + k * interval below 1500 m
        assert c[FacilityKind.LAMP] == 30
        assert c[FacilityKind.EXIT_LIGHT] == 30
        assert c[FacilityKind.EXIT_SIGN] == 6
        assert c[FacilityKind.LCS] == 3 * spec.lane_count
        assert len({round(f.s) for f in placed if f.kind is FacilityKind.LCS}) == 3
        assert c[FacilityKind.JET_FAN] == len(np.arange(87.5, 1500, 175.0))
        assert c[FacilityKind.TUNNEL_LIGHT] == len(np.arange(3.75, 1500, 7.5))

    def test_deterministic(self, spec):
        a = place_facilities(spec, seed=9)
        b = place_facilities(spec, seed=9)
        assert [(f.kind, f.s, f.u) for f in a] == [(f.kind, f.s, f.u) for f in b]
        c = place_facilities(spec, seed=10)
        assert [f.s for f in a] != [f.s for f in c]

    def test_sides_heights_and_jitter(self, spec):
        for f in place_facilities(spec, seed=2):
            rule = spec.rule(f.kind)
            assert f.z == rule.height
            if f.kind is FacilityKind.LAMP:
                assert f.u > spec.road_half_width
            elif f.kind is FacilityKind.EXIT_LIGHT:
                assert f.u < -spec.road_half_width
            nominal = rule.offset + round((f.s - rule.offset) / rule.interval) * rule.interval
            assert abs(f.s - nominal) <= 0.5 + 1e-12

    def test_lcs_above_lane_centres(self, spec):
        centres = {spec.lane_center(k) for k in range(1, 4)}
        us = {round(f.u, 9) for f in place_facilities(spec) if f.kind is FacilityKind.LCS}
        assert us == {round(c, 9) for c in centres}

    def test_wall_units_inside_tunnel(self, spec):
        for f in place_facilities(spec):
            if f.kind in (FacilityKind.LAMP, FacilityKind.EXIT_LIGHT):
                top = f.z + 0.5 * f.extents[2]
                outer = abs(f.u) + 0.5 * f.extents[0]
                assert outer < spec.wall_u(top)


class TestMaps:
    def test_landmark_bijection(self, spec):
        placed = place_facilities(spec, seed=1)
        lm, _ = build_maps(spec, placed)
        usable = [f for f in placed if f.kind.usable]
        assert len(lm) == len(usable)
        assert FacilityKind.JET_FAN not in lm.kinds
        np.testing.assert_allclose(lm.positions, [f.xy for f in usable])

    def test_same_kind_spacing(self, spec):
        lm, _ = build_maps(spec, place_facilities(spec, seed=5))
        s, u = spec.centerline.project(lm.positions)
        for kind in {FacilityKind(k) for k in lm.kinds}:
            idx = lm.indices(kind)
            interval = spec.rule(kind).interval
            # units sharing a mounting line (LCS repeat across lanes at the same station)
            for line in np.unique(np.round(u[idx], 3)):
                sel = np.sort(s[idx][np.round(u[idx], 3) == line])
                if sel.size > 1:
                    assert np.min(np.diff(sel)) >= 0.5 * interval

    def test_straight_lane_gaussians(self):
        spec = TunnelSpec(length=100.0)
        _, lanes = build_maps(spec, place_facilities(spec), segment_len=5.0)
        assert len(lanes) == 20 * (spec.lane_count + 1)
        for c in lanes.covs:
            w, v = np.linalg.eigh(c)
            major = v[:, 1]
            angle = math.atan2(abs(major[1]), abs(major[0]))
            assert angle < 1e-6  # tunnel runs along +x
            assert math.sqrt(w[0]) == pytest.approx(PAINT_HALF_WIDTH, rel=1e-9)
            np.linalg.cholesky(c)
            assert 1e-4 <= w[0] and w[1] <= 25.0

    def test_curved_lane_gaussians_follow_line(self):
        spec = TunnelSpec(length=300.0, curvature=1.0 / 800.0, entry_pose=Pose2D(5.0, -3.0, 0.4))
        _, lanes = build_maps(spec, place_facilities(spec))
        s, u = spec.centerline.project(lanes.means)
        for c, si in zip(lanes.covs, s):
            major = np.linalg.eigh(c)[1][:, 1]
            heading = float(spec.centerline.heading(si))
            cross = abs(major[0] * math.sin(heading) - major[1] * math.cos(heading))
            assert cross < 1e-3
        # a 5 m chord of an 800 m arc sits ~4 mm inside the arc
        assert np.max(np.min(np.abs(u[:, None] - spec.lane_lines()[None, :]), axis=1)) < 5e-3

    @pytest.mark.parametrize("seg", [0.5, 11.0])
    def test_rejects_segment_len(self, spec, seg):
        with pytest.raises(ValueError):
            build_maps(spec, place_facilities(spec), segment_len=seg)

    def test_rejects_empty_placement(self, spec):
        with pytest.raises(ValueError):
            build_maps(spec, [])

    def test_restricted(self, spec):
        lm, _ = build_maps(spec, place_facilities(spec))
        only = lm.restricted({FacilityKind.LAMP})
        assert set(only.kinds) == {FacilityKind.LAMP}
        assert len(only) == 30


class TestCenterline:
    def test_project_inverts_to_global(self):
        spec = TunnelSpec(curvature=1.0 / 600.0, entry_pose=Pose2D(100.0, 50.0, 1.0))
        rng = np.random.default_rng(0)
        s = rng.uniform(-50.0, 1400.0, 300)
        u = rng.uniform(-6.0, 6.0, 300)
        s2, u2 = spec.centerline.project(spec.centerline.to_global(s, u))
        np.testing.assert_allclose(s2, s, atol=1e-6)
        np.testing.assert_allclose(u2, u, atol=1e-6)

    def test_right_is_positive(self, spec):
        # heading east, so right is south
        p = spec.centerline.to_global(np.array([10.0]), np.array([2.0]))[0]
        np.testing.assert_allclose(p, [10.0, -2.0], atol=1e-12)
