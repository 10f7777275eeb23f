"""Analytic kinematics for the Delta arm and the 3-RRS platform.

Frames and conventions
----------------------
Both mechanisms use a right-handed frame with z up and the base plane at
z = 0.  Arm/limb i sits at azimuth 0, 120 or 240 degrees; its unit radial
direction is u_i = (cos a_i, sin a_i, 0).

Delta: base hinges at radius ``base_radius`` on the base plane, platform
attachments at radius ``platform_radius`` around the moving platform
centre p.  The platform only translates, so arm i reduces to a planar
two-link problem in the vertical plane spanned by u_i and z.  The active
joint angle phi_i is measured from the horizontal outward direction u_i,
positive rotating downward, which puts every elbow-out solution of a
hanging platform in [0, pi] (phi = pi/2 is straight down).

3-RRS: base revolute joints J_i at radius ``base_radius``, platform ball
joints at radius ``platform_radius`` in the platform frame.  The platform
pose is R_x(roll) R_y(pitch) plus a pure z translation z_R.  The proximal
link of limb i swings in the fixed vertical plane through u_i; its angle
theta_i is measured from the horizontal u_i direction toward +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AZIMUTHS = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
# Radial unit directions (cos a_i, sin a_i) as exact constants: the y-mirror
# that swaps limbs 1 and 2 is then exact in floating point.
_HALF_SQRT3 = math.sqrt(3.0) / 2.0
_U = np.array([[1.0, 0.0], [-0.5, _HALF_SQRT3], [-0.5, -_HALF_SQRT3]])

# Conservative planar workspace factor for the Delta.
DELTA_RADIAL_FACTOR = 0.8

# Tolerance on the circle-intersection discriminant; keeps boundary configs
# (fully stretched or folded limbs) valid while holding closure residuals
# comfortably below 1e-9.
_DISC_TOL = 1e-9


@dataclass(frozen=True)
class DeltaParams:
    """Delta geometry. Lengths in meters; the peg extends along -z."""

    active_rod_len: float = 0.3
    passive_rod_len: float = 0.6
    base_radius: float = 0.15
    platform_radius: float = 0.05
    pin_length: float = 0.1


@dataclass(frozen=True)
class RrsGeometry:
    """3-RRS geometry. Limb azimuths are fixed at 0/120/240 degrees.

    The defaults are a deliberately conservative starting point: the
    orientation workspace is usable but narrow, and its conditioning
    degrades quickly past ~18 degrees of tilt. See atlas.optimize_design
    for the tuned counterpart.
    """

    base_radius: float = 0.304
    platform_radius: float = 0.144
    proximal_len: float = 0.096
    distal_len: float = 0.256
    h_min: float = 0.10
    h_max: float = 0.30


@dataclass(frozen=True)
class RrsConfig:
    """Roll-pitch-heave configuration of the 3-RRS platform."""

    roll: float
    pitch: float
    z: float


def delta_workspace_contains(p, g: DeltaParams) -> bool:
    """True iff p lies in the conservative Delta workspace.

    z in [-(l_a + l_p), -(l_a - l_p)] and planar radius <= 0.8 min(l_a, l_p).
    """
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    la, lp = g.active_rod_len, g.passive_rod_len
    # Small slack keeps mathematically-on-boundary poses inside even when
    # the bound itself rounds (0.3 + 0.6 != 0.9 in floating point).
    tol = 1e-12
    if not (-(la + lp) - tol <= z <= -(la - lp) + tol):
        return False
    r_max = DELTA_RADIAL_FACTOR * min(la, lp)
    return math.hypot(x, y) <= r_max + tol


def delta_ik_batch(p: np.ndarray, g: DeltaParams):
    """Vectorized Delta inverse kinematics over N platform centres.

    Args:
        p: array (N, 3) of platform centres.
        g: Delta geometry.

    Returns:
        (phi, ok): phi shaped (N, 3) with the elbow-out joint angles (NaN
        rows where unsolved), ok a boolean (N,) mask of fully solvable
        poses with all angles in [0, pi].
    """
    p = np.asarray(p, dtype=float)
    la, lp = g.active_rod_len, g.passive_rod_len
    # d_i = P_i - B_i with in-plane components (radial, vertical) and an
    # out-of-plane part that only enters through ||d||^2.
    dr = (g.platform_radius - g.base_radius) + np.outer(p[:, 0], _U[:, 0]) \
        + np.outer(p[:, 1], _U[:, 1])
    dt = -np.outer(p[:, 0], _U[:, 1]) + np.outer(p[:, 1], _U[:, 0])
    dz = p[:, 2:3]
    d2 = dr * dr + dt * dt + dz * dz
    e = (la * la + d2 - lp * lp) / (2.0 * la)
    rho = np.hypot(dr, dz)
    closes = np.abs(e) <= rho + _DISC_TOL
    # Knee direction cos(phi) u_i - sin(phi) z; solve rho cos(phi + psi) = e.
    psi = np.arctan2(dz, dr)
    half = np.arccos(np.clip(e / np.maximum(rho, 1e-300), -1.0, 1.0))
    cand0 = -psi - half
    cand1 = -psi + half
    # Elbow out: the root whose knee points outward (larger cos phi).
    phi = np.where(np.cos(cand0) >= np.cos(cand1), cand0, cand1)
    phi = np.arctan2(np.sin(phi), np.cos(phi))
    in_range = (phi >= -_DISC_TOL) & (phi <= np.pi + _DISC_TOL)
    ok = np.all(closes & in_range, axis=1)
    phi = np.clip(phi, 0.0, np.pi)
    phi[~ok] = np.nan
    return phi, ok


def delta_inverse_kinematics(p, g: DeltaParams):
    """Per-arm inverse kinematics of the Delta, elbow-out branch.

    Args:
        p: platform centre (x, y, z) in the global frame.
        g: Delta geometry.

    Returns:
        Array of three active joint angles in [0, pi], or None when any
        arm's circle-sphere intersection has no elbow-out solution.
    """
    phi, ok = delta_ik_batch(np.asarray(p, dtype=float)[None, :], g)
    return phi[0] if ok[0] else None


def delta_knee_points(phi, g: DeltaParams) -> np.ndarray:
    """Knee (elbow) positions for given active joint angles, shape (3, 3)."""
    s, c = np.sin(phi), np.cos(phi)
    knees = np.zeros((3, 3))
    knees[:, 0] = (g.base_radius + g.active_rod_len * c) * _U[:, 0]
    knees[:, 1] = (g.base_radius + g.active_rod_len * c) * _U[:, 1]
    knees[:, 2] = -g.active_rod_len * s
    return knees


def delta_pin_tip(p, g: DeltaParams) -> np.ndarray:
    """Peg-tip position: platform centre shifted by pin_length along -z."""
    return np.array([p[0], p[1], p[2] - g.pin_length], dtype=float)


def rotation_rpy(roll: float, pitch: float) -> np.ndarray:
    """R_x(roll) R_y(pitch) as a 3x3 matrix."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    return np.array(
        [
            [cp, 0.0, sp],
            [sr * sp, cr, -sr * cp],
            [-cr * sp, sr, cr * cp],
        ]
    )


def rrs_platform_points(c: RrsConfig, g: RrsGeometry) -> np.ndarray:
    """Global ball-joint positions B_i of the platform, shape (3, 3)."""
    rot = rotation_rpy(c.roll, c.pitch)
    local = np.zeros((3, 3))
    local[:, 0] = g.platform_radius * _U[:, 0]
    local[:, 1] = g.platform_radius * _U[:, 1]
    pts = local @ rot.T
    pts[:, 2] += c.z
    return pts


def _rrs_limb_geometry(c: RrsConfig, g: RrsGeometry):
    """In-plane components (d_r, d_z) and ||d||^2 of J_i -> B_i per limb."""
    b = rrs_platform_points(c, g)
    dx = b[:, 0] - g.base_radius * _U[:, 0]
    dy = b[:, 1] - g.base_radius * _U[:, 1]
    dz = b[:, 2]
    dr = dx * _U[:, 0] + dy * _U[:, 1]
    dt = -dx * _U[:, 1] + dy * _U[:, 0]
    return dr, dz, dr * dr + dt * dt + dz * dz


def rrs_limb_angles(c: RrsConfig, g: RrsGeometry):
    """Active joint angles of all three limbs, elbow-out branch.

    Returns an array of three angles (radians, measured from the horizontal
    outward direction toward +z) or None when any limb's vertical-plane
    circle intersection has no solution.
    """
    l1, l2 = g.proximal_len, g.distal_len
    dr, dz, d2 = _rrs_limb_geometry(c, g)
    e = (l1 * l1 + d2 - l2 * l2) / (2.0 * l1)
    rho = np.hypot(dr, dz)
    if np.any(np.abs(e) > rho + _DISC_TOL):
        return None
    psi = np.arctan2(dz, dr)
    half = np.arccos(np.clip(e / np.maximum(rho, 1e-300), -1.0, 1.0))
    cand = np.stack([psi - half, psi + half])
    coss = np.cos(cand)
    theta = np.where(coss[0] >= coss[1], cand[0], cand[1])
    return np.arctan2(np.sin(theta), np.cos(theta))


def rrs_limb_joint_angle(i: int, c: RrsConfig, g: RrsGeometry):
    """Active base-revolute angle of limb i, or None when unreachable."""
    angles = rrs_limb_angles(c, g)
    return None if angles is None else float(angles[i])


def rrs_limb_angles_batch(roll, pitch, z, g: RrsGeometry):
    """Vectorized limb angles over parallel roll/pitch/z arrays.

    Returns (angles, ok): angles shaped (3,) + broadcast shape with NaN
    where a limb fails to close, ok a boolean mask of configs with all
    three limbs closing.  Box bounds are not applied here.
    """
    roll = np.asarray(roll, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    l1, l2 = g.proximal_len, g.distal_len
    ang = np.empty((3,) + np.shape(roll))
    ok = np.ones(np.shape(roll), dtype=bool)
    for i in range(3):
        ci, si = _U[i, 0], _U[i, 1]
        bx = g.platform_radius * (cp * ci)
        by = g.platform_radius * (sr * sp * ci + cr * si)
        bz = g.platform_radius * (-cr * sp * ci + sr * si) + z
        dx = bx - g.base_radius * ci
        dy = by - g.base_radius * si
        dr = dx * ci + dy * si
        dt = -dx * si + dy * ci
        d2 = dr * dr + dt * dt + bz * bz
        e = (l1 * l1 + d2 - l2 * l2) / (2.0 * l1)
        rho = np.hypot(dr, bz)
        good = np.abs(e) <= rho + _DISC_TOL
        ok &= good
        psi = np.arctan2(bz, dr)
        half = np.arccos(np.clip(e / np.maximum(rho, 1e-300), -1.0, 1.0))
        cand0 = psi - half
        cand1 = psi + half
        theta = np.where(np.cos(cand0) >= np.cos(cand1), cand0, cand1)
        theta = np.arctan2(np.sin(theta), np.cos(theta))
        ang[i] = np.where(good, theta, np.nan)
    return ang, ok


def rrs_elbow_points(theta, g: RrsGeometry) -> np.ndarray:
    """Elbow positions for given proximal angles, shape (3, 3)."""
    s, c = np.sin(theta), np.cos(theta)
    pts = np.zeros((3, 3))
    pts[:, 0] = (g.base_radius + g.proximal_len * c) * _U[:, 0]
    pts[:, 1] = (g.base_radius + g.proximal_len * c) * _U[:, 1]
    pts[:, 2] = g.proximal_len * s
    return pts


def rrs_config_valid(c: RrsConfig, g: RrsGeometry) -> bool:
    """True iff c is inside the 3-RRS workspace box and every limb closes.

    Box bounds: max(|roll|, |pitch|) <= pi/4 and z_R in [h_min, h_max].
    Limb closure is the vertical-plane intersection test used by
    rrs_limb_angles, boundary inclusive.
    """
    # Same slack as the Delta workspace predicate: values accumulated on
    # the command lattice may overshoot a bound by a few ulps.
    tol = 1e-12
    if max(abs(c.roll), abs(c.pitch)) > np.pi / 4.0 + tol:
        return False
    if not (g.h_min - tol <= c.z <= g.h_max + tol):
        return False
    return rrs_limb_angles(c, g) is not None


_FD_STEP = 1e-6


def rrs_jacobian(c: RrsConfig, g: RrsGeometry) -> np.ndarray:
    """3x3 Jacobian d theta_i / d (roll, pitch, z_R) by central differences.

    Raises ValueError when any perturbed configuration loses limb closure
    (the config sits on the validity boundary).
    """
    h = _FD_STEP
    cols = []
    for j in range(3):
        delta = [0.0, 0.0, 0.0]
        delta[j] = h
        hi = rrs_limb_angles(
            RrsConfig(c.roll + delta[0], c.pitch + delta[1], c.z + delta[2]), g
        )
        lo = rrs_limb_angles(
            RrsConfig(c.roll - delta[0], c.pitch - delta[1], c.z - delta[2]), g
        )
        if hi is None or lo is None:
            raise ValueError("Jacobian undefined: perturbed config invalid")
        cols.append((hi - lo) / (2.0 * h))
    return np.stack(cols, axis=1)


def _sym3_eigvals(s: np.ndarray) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 matrices by cyclic Jacobi sweeps.

    Accepts a (..., 3, 3) stack and returns (..., 3) eigenvalues in
    ascending order.  Rotations run elementwise, so batches vectorize.
    """
    a = np.array(s, dtype=float, copy=True)
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        return np.zeros(a.shape[:-2] + (3,))
    for _ in range(20):
        off = (
            a[..., 0, 1] ** 2 + a[..., 0, 2] ** 2 + a[..., 1, 2] ** 2
        )
        if np.max(off) <= (1e-16 * scale) ** 2:
            break
        for p, q, r in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
            apq = a[..., p, q]
            ang = 0.5 * np.arctan2(2.0 * apq, a[..., q, q] - a[..., p, p])
            cj, sj = np.cos(ang), np.sin(ang)
            app = a[..., p, p].copy()
            aqq = a[..., q, q].copy()
            arp = a[..., r, p].copy()
            arq = a[..., r, q].copy()
            a[..., p, p] = cj * cj * app - 2.0 * sj * cj * apq + sj * sj * aqq
            a[..., q, q] = sj * sj * app + 2.0 * sj * cj * apq + cj * cj * aqq
            a[..., p, q] = 0.0
            a[..., q, p] = 0.0
            a[..., r, p] = cj * arp - sj * arq
            a[..., p, r] = a[..., r, p]
            a[..., r, q] = sj * arp + cj * arq
            a[..., q, r] = a[..., r, q]
    eig = np.stack([a[..., 0, 0], a[..., 1, 1], a[..., 2, 2]], axis=-1)
    return np.sort(eig, axis=-1)


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of (..., 3, 3) matrices, ascending, via eig(m^T m)."""
    m = np.asarray(m, dtype=float)
    mtm = np.swapaxes(m, -1, -2) @ m
    eig = _sym3_eigvals(mtm)
    return np.sqrt(np.clip(eig, 0.0, None))


def min_singular_value(m: np.ndarray) -> float:
    return float(singular_values(m)[..., 0])


def condition_number(m: np.ndarray) -> float:
    """sigma_max / sigma_min; +inf for a singular matrix."""
    sv = singular_values(m)
    smin, smax = float(sv[..., 0]), float(sv[..., 2])
    return math.inf if smin == 0.0 else smax / smin
