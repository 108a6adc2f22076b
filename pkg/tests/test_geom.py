"""Pose math and oriented-box overlap, checked against independent oracles."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hilsim.geom import (
    Pose,
    normalize_angle,
    obb_overlap_2d,
    rotation_matrix,
    rpy_from_matrix,
)


def test_normalize_angle_known_values():
    assert normalize_angle(0.0) == 0.0
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert abs(normalize_angle(2 * math.pi)) < 1e-15
    assert normalize_angle(3 * math.pi) == pytest.approx(math.pi)
    assert normalize_angle(-0.5) == -0.5


@given(st.floats(-1e6, 1e6))
def test_normalize_angle_preserves_direction(a):
    w = normalize_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-6)
    assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-6)


@given(st.floats(-3, 3), st.floats(-1.4, 1.4), st.floats(-3, 3))
def test_rotation_matrix_orthonormal(roll, pitch, yaw):
    r = rotation_matrix(roll, pitch, yaw)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(-3, 3), st.floats(-1.4, 1.4), st.floats(-3, 3))
def test_rpy_round_trip(roll, pitch, yaw):
    r = rotation_matrix(roll, pitch, yaw)
    rr, pp, yy = rpy_from_matrix(r)
    assert np.allclose(rotation_matrix(rr, pp, yy), r, atol=1e-9)


def _homogeneous(pose: Pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = pose.rotation()
    m[:3, 3] = pose.position
    return m


@given(
    st.lists(st.floats(-10, 10), min_size=6, max_size=6),
    st.lists(st.floats(-10, 10), min_size=6, max_size=6),
)
def test_compose_matches_homogeneous_product(a, b):
    pa = Pose(a[0], a[1], a[2], a[3] * 0.2, a[4] * 0.1, a[5] * 0.3)
    pb = Pose(b[0], b[1], b[2], b[3] * 0.2, b[4] * 0.1, b[5] * 0.3)
    got = _homogeneous(pa.compose(pb))
    want = _homogeneous(pa) @ _homogeneous(pb)
    assert np.allclose(got, want, atol=1e-9)


def test_compose_identity():
    p = Pose(1.0, 2.0, 3.0, 0.1, -0.2, 0.3)
    q = p.compose(Pose())
    assert np.allclose(q.position, p.position)
    assert q.rpy == pytest.approx(p.rpy)


def test_pose_normalizes_angles_on_construction():
    p = Pose(yaw=3 * math.pi)
    assert p.yaw == pytest.approx(math.pi)


# --- oriented-box overlap -------------------------------------------------
#
# Independent oracle: convex quadrilateral overlap via corner containment
# plus proper edge crossings (no separating-axis machinery).


def _corners(cx, cy, yaw, hx, hy):
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for lx, ly in ((hx, hy), (hx, -hy), (-hx, -hy), (-hx, hy)):
        out.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
    return out


def _point_in_quad(p, quad):
    pos = neg = False
    for k in range(4):
        ax, ay = quad[k]
        bx, by = quad[(k + 1) % 4]
        cross = (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)
        if cross > 1e-12:
            pos = True
        elif cross < -1e-12:
            neg = True
    return not (pos and neg)


def _segments_cross(p1, p2, p3, p4):
    def d(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = d(p3, p4, p1), d(p3, p4, p2)
    d3, d4 = d(p1, p2, p3), d(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and all(
        abs(x) > 1e-12 for x in (d1, d2, d3, d4)
    )


def _quad_overlap_oracle(qa, qb):
    if any(_point_in_quad(p, qb) for p in qa):
        return True
    if any(_point_in_quad(p, qa) for p in qb):
        return True
    for i in range(4):
        for j in range(4):
            if _segments_cross(qa[i], qa[(i + 1) % 4], qb[j], qb[(j + 1) % 4]):
                return True
    return False


def test_obb_overlap_fixed_cases():
    # identical boxes
    assert obb_overlap_2d((0, 0), 0.0, (1, 1), (0, 0), 0.0, (1, 1))
    # clearly separated
    assert not obb_overlap_2d((0, 0), 0.0, (1, 1), (5, 0), 0.0, (1, 1))
    # touching edges count as overlap
    assert obb_overlap_2d((0, 0), 0.0, (1, 1), (2, 0), 0.0, (1, 1))
    # rotated diamond poking into an axis-aligned box
    assert obb_overlap_2d((0, 0), 0.0, (1, 1), (2.2, 0), math.pi / 4, (1, 1))
    # same diamond pulled out of reach (corner at 2.9 - sqrt(2) > 1)
    assert not obb_overlap_2d((0, 0), 0.0, (1, 1), (2.9, 0), math.pi / 4, (1, 1))
    # long thin box crossing another without holding any corner inside
    assert obb_overlap_2d((0, 0), 0.0, (5, 0.2), (0, 0), math.pi / 2, (5, 0.2))


@settings(max_examples=300)
@given(
    st.floats(-4, 4), st.floats(-4, 4), st.floats(-math.pi, math.pi),
    st.floats(0.1, 3), st.floats(0.1, 3),
    st.floats(-4, 4), st.floats(-4, 4), st.floats(-math.pi, math.pi),
    st.floats(0.1, 3), st.floats(0.1, 3),
)
def test_obb_overlap_matches_quad_oracle(ax, ay, ayaw, ahx, ahy, bx, by, byaw, bhx, bhy):
    got = obb_overlap_2d((ax, ay), ayaw, (ahx, ahy), (bx, by), byaw, (bhx, bhy))
    qa = _corners(ax, ay, ayaw, ahx, ahy)
    qb = _corners(bx, by, byaw, bhx, bhy)
    want = _quad_overlap_oracle(qa, qb)
    if got != want:
        # tangency: nudge the boxes and require the oracle to follow
        grown = _quad_overlap_oracle(
            _corners(ax, ay, ayaw, ahx * (1 + 1e-6), ahy * (1 + 1e-6)), qb
        )
        shrunk = _quad_overlap_oracle(
            _corners(ax, ay, ayaw, ahx * (1 - 1e-6), ahy * (1 - 1e-6)), qb
        )
        assert grown if got else not shrunk
