import math

import numpy as np
import pytest

from deltarrs.kinematics import (
    AZIMUTHS,
    DeltaParams,
    RrsConfig,
    RrsGeometry,
    condition_number,
    delta_inverse_kinematics,
    delta_knee_points,
    delta_pin_tip,
    delta_workspace_contains,
    min_singular_value,
    rrs_config_valid,
    rrs_jacobian,
    rrs_limb_angles,
    rrs_limb_joint_angle,
    rrs_platform_points,
    singular_values,
)

DELTA = DeltaParams()
RRS = RrsGeometry()


def unit_dirs():
    return np.stack([np.cos(AZIMUTHS), np.sin(AZIMUTHS)], axis=1)


def delta_arm_residuals(p, phi, g):
    """Independent closure check: knee position from phi, distance to the
    platform attachment minus the passive rod length, per arm."""
    u = unit_dirs()
    res = np.empty(3)
    for i in range(3):
        knee = np.array(
            [
                (g.base_radius + g.active_rod_len * math.cos(phi[i])) * u[i, 0],
                (g.base_radius + g.active_rod_len * math.cos(phi[i])) * u[i, 1],
                -g.active_rod_len * math.sin(phi[i]),
            ]
        )
        attach = np.array([p[0] + g.platform_radius * u[i, 0],
                           p[1] + g.platform_radius * u[i, 1],
                           p[2]])
        res[i] = abs(np.linalg.norm(attach - knee) - g.passive_rod_len)
    return res


def rrs_attach_points(c, g):
    """Platform ball joints from scratch (own rotation matrix)."""
    cr, sr = math.cos(c.roll), math.sin(c.roll)
    cp, sp = math.cos(c.pitch), math.sin(c.pitch)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]], dtype=float)
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]], dtype=float)
    u = unit_dirs()
    pts = (rx @ ry) @ (g.platform_radius * np.column_stack([u[:, 0], u[:, 1], np.zeros(3)]).T)
    pts = pts.T
    pts[:, 2] += c.z
    return pts


def rrs_limb_residuals(c, theta, g):
    u = unit_dirs()
    b = rrs_attach_points(c, g)
    res = np.empty(3)
    for i in range(3):
        elbow = np.array(
            [
                (g.base_radius + g.proximal_len * math.cos(theta[i])) * u[i, 0],
                (g.base_radius + g.proximal_len * math.cos(theta[i])) * u[i, 1],
                g.proximal_len * math.sin(theta[i]),
            ]
        )
        res[i] = abs(np.linalg.norm(b[i] - elbow) - g.distal_len)
    return res


def rrs_closure_margin(c, g):
    """Smallest slack rho - |e| over the limbs; negative means no closure."""
    u = unit_dirs()
    b = rrs_attach_points(c, g)
    l1, l2 = g.proximal_len, g.distal_len
    worst = np.inf
    for i in range(3):
        d = b[i] - np.array([g.base_radius * u[i, 0], g.base_radius * u[i, 1], 0.0])
        dr = d[0] * u[i, 0] + d[1] * u[i, 1]
        e = (l1 * l1 + d @ d - l2 * l2) / (2.0 * l1)
        worst = min(worst, math.hypot(dr, d[2]) - abs(e))
    return worst


# ---------------------------------------------------------------- Delta


def test_workspace_lower_boundary_inclusive():
    assert delta_workspace_contains((0.0, 0.0, -0.9), DELTA)


def test_workspace_radial_bound():
    # r_max = 0.8 * 0.3 = 0.24
    assert not delta_workspace_contains((0.25, 0.0, -0.5), DELTA)


def test_workspace_interior_point():
    assert delta_workspace_contains((0.1, 0.1, -0.6), DELTA)


def test_delta_ik_symmetric_pose():
    # Straight-arm height for the default geometry: the arm chain spans
    # sqrt((l_a+l_p)^2 - (R_b - r_p)^2) below the base plane.
    z0 = -math.sqrt(0.9**2 - 0.1**2)
    phi = delta_inverse_kinematics((0.0, 0.0, z0), DELTA)
    assert phi is not None
    assert np.ptp(phi) < 1e-12
    assert delta_arm_residuals((0.0, 0.0, z0), phi, DELTA).max() < 1e-9


def test_delta_ik_unreachable_pose():
    assert delta_inverse_kinematics((0.0, 0.0, -1.5), DELTA) is None


def test_delta_ik_cyclic_symmetry():
    p = np.array([0.12, -0.05, -0.62])
    c, s = math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3)
    p_rot = np.array([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
    phi = delta_inverse_kinematics(p, DELTA)
    phi_rot = delta_inverse_kinematics(p_rot, DELTA)
    np.testing.assert_allclose(phi_rot, np.roll(phi, 1), atol=1e-12)


def test_delta_ik_residuals_random_sweep():
    # Either no solution or sub-nanometre closure, and angles in [0, pi].
    rng = np.random.default_rng(11)
    n_solved = 0
    for _ in range(10_000):
        r = 0.24 * math.sqrt(rng.uniform())
        a = rng.uniform(0.0, 2.0 * math.pi)
        p = (r * math.cos(a), r * math.sin(a), rng.uniform(-0.9, 0.3))
        phi = delta_inverse_kinematics(p, DELTA)
        if phi is None:
            continue
        n_solved += 1
        assert np.all(phi >= 0.0) and np.all(phi <= math.pi)
        assert delta_arm_residuals(p, phi, DELTA).max() < 1e-9
    assert n_solved > 1000


def test_delta_knee_points_match_reference():
    phi = np.array([0.3, 1.1, 2.0])
    knees = delta_knee_points(phi, DELTA)
    u = unit_dirs()
    for i in range(3):
        radial = DELTA.base_radius + DELTA.active_rod_len * math.cos(phi[i])
        expect = np.array([radial * u[i, 0], radial * u[i, 1],
                           -DELTA.active_rod_len * math.sin(phi[i])])
        np.testing.assert_allclose(knees[i], expect, atol=1e-15)


@pytest.mark.parametrize(
    "p,pin,tip",
    [
        ((0.0, 0.0, -0.5), 0.1, (0.0, 0.0, -0.6)),
        ((0.1, 0.2, -0.4), 0.1, (0.1, 0.2, -0.5)),
        ((0.3, -0.2, -0.7), 0.0, (0.3, -0.2, -0.7)),
    ],
)
def test_pin_tip(p, pin, tip):
    g = DeltaParams(pin_length=pin)
    np.testing.assert_allclose(delta_pin_tip(p, g), tip, atol=1e-15)


# ---------------------------------------------------------------- 3-RRS

# Tall variant used for the full-extension boundary cases: h_max raised so
# the fully stretched symmetric pose stays inside the height box.
TALL = RrsGeometry(0.2, 0.12, 0.16, 0.22, 0.10, 0.45)
Z_STRETCH = math.sqrt((TALL.proximal_len + TALL.distal_len) ** 2
                      - (TALL.base_radius - TALL.platform_radius) ** 2)


def test_rrs_valid_home():
    assert rrs_config_valid(RrsConfig(0.0, 0.0, 0.2), RRS)


def test_rrs_invalid_roll_beyond_box():
    assert not rrs_config_valid(RrsConfig(math.pi / 3, 0.0, 0.2), RRS)


def test_rrs_full_extension_is_valid():
    assert rrs_config_valid(RrsConfig(0.0, 0.0, Z_STRETCH), TALL)


def test_rrs_full_extension_collinear():
    c = RrsConfig(0.0, 0.0, Z_STRETCH)
    theta = rrs_limb_angles(c, TALL)
    assert theta is not None
    # Proximal and distal collinear: the joint angle points straight at the
    # platform attachment.
    dr = TALL.platform_radius - TALL.base_radius
    np.testing.assert_allclose(theta, math.atan2(Z_STRETCH, dr), atol=1e-9)
    assert rrs_limb_residuals(c, theta, TALL).max() < 1e-9


def test_rrs_home_angles_equal():
    c = RrsConfig(0.0, 0.0, 0.2)
    theta = rrs_limb_angles(c, RRS)
    assert np.ptp(theta) < 1e-12
    for i in range(3):
        assert rrs_limb_joint_angle(i, c, RRS) == pytest.approx(theta[i], abs=1e-15)


def test_rrs_limb_joint_angle_unreachable():
    assert rrs_limb_joint_angle(0, RrsConfig(0.0, 0.0, 0.9), TALL) is None


def test_rrs_closure_residuals_random_sweep():
    rng = np.random.default_rng(5)
    n_solved = 0
    for _ in range(2000):
        c = RrsConfig(rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7),
                      rng.uniform(0.10, 0.30))
        theta = rrs_limb_angles(c, RRS)
        if theta is None:
            continue
        n_solved += 1
        assert rrs_limb_residuals(c, theta, RRS).max() < 1e-9
    assert n_solved > 500


def test_rrs_mirror_symmetry():
    # Reflecting through the limb-0 plane negates roll and swaps the two
    # off-axis limbs.
    rng = np.random.default_rng(9)
    for _ in range(50):
        c = RrsConfig(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                      rng.uniform(0.12, 0.28))
        a = rrs_limb_angles(c, RRS)
        b = rrs_limb_angles(RrsConfig(-c.roll, c.pitch, c.z), RRS)
        assert (a is None) == (b is None)
        if a is not None:
            np.testing.assert_allclose(b[[0, 2, 1]], a, atol=1e-12)


def test_rrs_jacobian_home_structure():
    J = rrs_jacobian(RrsConfig(0.0, 0.0, 0.2), RRS)
    assert np.all(np.isfinite(J))
    # Roll and pitch columns sum to zero over the limbs by symmetry; pure
    # heave moves all three limbs identically.
    assert abs(J[:, 0].mean()) < 1e-8
    assert abs(J[:, 1].mean()) < 1e-8
    assert np.ptp(J[:, 2]) < 1e-7


def test_rrs_jacobian_boundary_raises():
    with pytest.raises(ValueError):
        rrs_jacobian(RrsConfig(0.0, 0.0, Z_STRETCH), TALL)


def test_rrs_jacobian_matches_forward_differences():
    # Oracle: one-sided differences with a 10x larger step, compared on
    # configs with comfortable closure margin (the angle map has a
    # square-root cusp at the margin, where any difference scheme degrades).
    rng = np.random.default_rng(3)
    h = 1e-5
    n_checked = 0
    for _ in range(2000):
        c = RrsConfig(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                      rng.uniform(0.12, 0.28))
        if not rrs_config_valid(c, RRS) or rrs_closure_margin(c, RRS) < 0.06:
            continue
        J = rrs_jacobian(c, RRS)
        base = rrs_limb_angles(c, RRS)
        cols = []
        for j in range(3):
            d = [0.0, 0.0, 0.0]
            d[j] = h
            hi = rrs_limb_angles(RrsConfig(c.roll + d[0], c.pitch + d[1], c.z + d[2]), RRS)
            assert hi is not None
            cols.append((hi - base) / h)
        J_fwd = np.stack(cols, axis=1)
        assert np.linalg.norm(J - J_fwd) / np.linalg.norm(J) < 1e-4
        n_checked += 1
    assert n_checked > 1000


def test_rrs_sigma_continuity():
    rng = np.random.default_rng(17)
    n_checked = 0
    for _ in range(500):
        c = RrsConfig(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                      rng.uniform(0.12, 0.28))
        if not rrs_config_valid(c, RRS) or rrs_closure_margin(c, RRS) < 0.01:
            continue
        step = rng.uniform(-1e-4, 1e-4, size=3)
        c2 = RrsConfig(c.roll + step[0], c.pitch + step[1], c.z + step[2])
        if not rrs_config_valid(c2, RRS):
            continue
        try:
            s1 = min_singular_value(rrs_jacobian(c, RRS))
            s2 = min_singular_value(rrs_jacobian(c2, RRS))
        except ValueError:
            continue
        assert abs(s1 - s2) < 1e-2
        n_checked += 1
    assert n_checked > 200


def test_platform_points_match_reference():
    c = RrsConfig(0.21, -0.34, 0.23)
    np.testing.assert_allclose(rrs_platform_points(c, RRS),
                               rrs_attach_points(c, RRS), atol=1e-14)


# ------------------------------------------------------- singular values


def test_singular_values_identity():
    assert min_singular_value(np.eye(3)) == pytest.approx(1.0, abs=1e-12)
    assert condition_number(np.eye(3)) == pytest.approx(1.0, abs=1e-12)


def test_singular_values_rank_deficient():
    m = np.diag([2.0, 1.0, 0.0])
    assert min_singular_value(m) == pytest.approx(0.0, abs=1e-12)
    assert condition_number(m) == math.inf


def test_singular_values_against_svd():
    rng = np.random.default_rng(23)
    for k in range(300):
        m = rng.normal(size=(3, 3))
        if k % 3 == 1:
            m *= 1e-3
        elif k % 3 == 2:
            m *= 1e3
        got = singular_values(m)
        want = np.sort(np.linalg.svd(m, compute_uv=False))
        scale = max(want[-1], 1e-300)
        assert np.max(np.abs(got - want)) / scale < 1e-10
        assert condition_number(m) == pytest.approx(want[-1] / want[0], rel=1e-9)
