"""Orientation-workspace atlas and geometric design optimization of the 3-RRS.

The atlas samples the roll-pitch grid at a fixed platform height, evaluates
the active-joint Jacobian at every (jittered) cell, and classifies cells by
the smallest singular value.  The design search maximizes the area of the
singularity-free region over the dimensionless parameters (lambda_1,
lambda_2) with a Nelder-Mead simplex and a death penalty on infeasible
designs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .kinematics import RrsGeometry, rrs_limb_angles_batch, singular_values

SIGMA_OMEGA = 0.15          # manipulability floor defining the good region
SIGMA_SINGULAR = 1e-6       # loci detection threshold
GRID_STEP = math.radians(1.0)
GRID_HALF_RANGE = math.pi / 3.0
BOX_TILT = math.pi / 4.0    # roll/pitch box bound of the reachable set
DEFAULT_L2_RATIO = 1.6      # distal_len / eta of the default geometry

_FD_STEP = 1e-6

# Endpoint of optimize_design started from the default RrsGeometry (1 degree
# grid at z = 0.20, jitter seed 0), rounded to 0.1 mm.  Frozen here so
# consumers that only need the tuned geometry can skip the search.
OPTIMIZED_RRS = RrsGeometry(
    base_radius=0.2226,
    platform_radius=0.1679,
    proximal_len=0.1248,
    distal_len=0.256,
    h_min=0.10,
    h_max=0.30,
)


@dataclass(frozen=True)
class DimensionlessDesign:
    """Scale-free 3-RRS design: lambda_1 + lambda_2 + lambda_3 = 4."""

    lambda1: float
    lambda2: float
    lambda3: float
    scale: float

    def feasible(self) -> bool:
        if abs(self.lambda1 + self.lambda2 + self.lambda3 - 4.0) > 1e-12:
            return False
        return (
            self.lambda3 > 0.0
            and self.lambda3 < self.lambda1
            and self.lambda1 < 2.0
            and self.lambda2 > 0.0
        )


@dataclass(frozen=True)
class OrientationGrid:
    """Square roll-pitch grid, symmetric about zero, at one platform height."""

    half_range: float = GRID_HALF_RANGE
    step: float = GRID_STEP
    z: float = 0.20
    jitter_seed: int | None = 0

    def axes(self) -> np.ndarray:
        # Mirrored construction keeps the axis exactly antisymmetric, so
        # cells straddling the box bound behave identically on both sides.
        n = int(round(self.half_range / self.step))
        pos = np.linspace(0.0, self.half_range, n + 1)
        return np.concatenate([-pos[:0:-1], pos])


@dataclass
class AtlasResult:
    """Per-grid statistics of the singularity-free region Omega."""

    area: float                     # rad^2
    n_omega: int
    min_sigma: float                # over Omega; nan when Omega is empty
    max_roll_deg: float
    max_pitch_deg: float
    kappa_variation_pct: float
    joint_min_deg: float
    joint_max_deg: float
    sigma_map: np.ndarray = field(repr=False)
    kappa_map: np.ndarray = field(repr=False)
    in_omega: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    theta_x: np.ndarray = field(repr=False)
    theta_y: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {
            "area_rad2": self.area,
            "n_omega": self.n_omega,
            "min_sigma": self.min_sigma,
            "max_roll_deg": self.max_roll_deg,
            "max_pitch_deg": self.max_pitch_deg,
            "kappa_variation_pct": self.kappa_variation_pct,
            "joint_min_deg": self.joint_min_deg,
            "joint_max_deg": self.joint_max_deg,
        }


def to_dimensionless(g: RrsGeometry) -> DimensionlessDesign:
    """eta = (R_b + 2 L_1 + R_p) / 4 and the lambda ratios."""
    eta = (g.base_radius + 2.0 * g.proximal_len + g.platform_radius) / 4.0
    return DimensionlessDesign(
        lambda1=g.base_radius / eta,
        lambda2=2.0 * g.proximal_len / eta,
        lambda3=g.platform_radius / eta,
        scale=eta,
    )


def from_dimensionless(
    d: DimensionlessDesign, l2_ratio: float, h_min: float, h_max: float
) -> RrsGeometry:
    """Rebuild a dimensional geometry; distal length is l2_ratio * eta.

    Raises ValueError when the design violates the lambda constraints.
    """
    if not d.feasible():
        raise ValueError("infeasible dimensionless design")
    eta = d.scale
    return RrsGeometry(
        base_radius=d.lambda1 * eta,
        platform_radius=d.lambda3 * eta,
        proximal_len=d.lambda2 * eta / 2.0,
        distal_len=l2_ratio * eta,
        h_min=h_min,
        h_max=h_max,
    )


def _grid_evaluate(g: RrsGeometry, roll, pitch, z):
    """Joint angles, sigma_min and kappa at each sample; NaN when invalid.

    A sample is valid when it obeys the box bounds, all limbs close, and
    the Jacobian stencil stays closed.
    """
    roll = np.asarray(roll, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    ang, ok = rrs_limb_angles_batch(roll, pitch, z, g)
    box = np.maximum(np.abs(roll), np.abs(pitch)) <= BOX_TILT
    box &= (g.h_min <= z) & (z <= g.h_max)
    valid = ok & box

    h = _FD_STEP
    jac = np.full(roll.shape + (3, 3), np.nan)
    stencil_ok = valid.copy()
    cols = []
    for j in range(3):
        dr = h if j == 0 else 0.0
        dp = h if j == 1 else 0.0
        dz = h if j == 2 else 0.0
        hi, ok_hi = rrs_limb_angles_batch(roll + dr, pitch + dp, z + dz, g)
        lo, ok_lo = rrs_limb_angles_batch(roll - dr, pitch - dp, z - dz, g)
        stencil_ok &= ok_hi & ok_lo
        cols.append((hi - lo) / (2.0 * h))
    for j in range(3):
        jac[..., :, j] = np.moveaxis(cols[j], 0, -1)

    sigma = np.full(roll.shape, np.nan)
    kappa = np.full(roll.shape, np.nan)
    if np.any(stencil_ok):
        sv = singular_values(jac[stencil_ok])
        smin, smax = sv[..., 0], sv[..., 2]
        sigma[stencil_ok] = smin
        with np.errstate(divide="ignore"):
            kappa[stencil_ok] = np.where(smin > 0.0, smax / np.maximum(smin, 1e-300), np.inf)
    return ang, stencil_ok, sigma, kappa


def _sample_points(grid: OrientationGrid):
    axes = grid.axes()
    tx, ty = np.meshgrid(axes, axes, indexing="ij")
    if grid.jitter_seed is None:
        return axes, tx, ty
    rng = np.random.default_rng(grid.jitter_seed)
    jit = rng.uniform(-grid.step / 2.0, grid.step / 2.0, size=(2,) + tx.shape)
    return axes, tx + jit[0], ty + jit[1]


def compute_atlas(
    g: RrsGeometry, grid: OrientationGrid, sigma_threshold: float = SIGMA_OMEGA
) -> AtlasResult:
    """Classify every jittered grid cell and integrate the Omega area."""
    axes, tx, ty = _sample_points(grid)
    ang, valid, sigma, kappa = _grid_evaluate(g, tx, ty, grid.z)
    omega = valid & (sigma >= sigma_threshold)
    n_omega = int(np.count_nonzero(omega))
    area = n_omega * grid.step**2
    if n_omega:
        sig_o = sigma[omega]
        kap_o = kappa[omega]
        ang_o = ang[:, omega]
        kmean = float(np.mean(kap_o))
        kvar = 100.0 * float(np.std(kap_o)) / kmean if kmean > 0 else float("nan")
        stats = dict(
            min_sigma=float(np.min(sig_o)),
            max_roll_deg=float(np.degrees(np.max(np.abs(tx[omega])))),
            max_pitch_deg=float(np.degrees(np.max(np.abs(ty[omega])))),
            kappa_variation_pct=kvar,
            joint_min_deg=float(np.degrees(np.nanmin(ang_o))),
            joint_max_deg=float(np.degrees(np.nanmax(ang_o))),
        )
    else:
        stats = dict(
            min_sigma=float("nan"),
            max_roll_deg=0.0,
            max_pitch_deg=0.0,
            kappa_variation_pct=float("nan"),
            joint_min_deg=float("nan"),
            joint_max_deg=float("nan"),
        )
    return AtlasResult(
        area=area,
        n_omega=n_omega,
        sigma_map=sigma,
        kappa_map=kappa,
        in_omega=omega,
        valid=valid,
        theta_x=axes,
        theta_y=axes,
        **stats,
    )


def singularity_loci(g: RrsGeometry, grid: OrientationGrid) -> np.ndarray:
    """Boolean map: cell is singular (sigma_min < 1e-6) or invalid."""
    _, tx, ty = _sample_points(grid)
    _, valid, sigma, _ = _grid_evaluate(g, tx, ty, grid.z)
    return ~valid | (sigma < SIGMA_SINGULAR)


@dataclass
class OptimizeResult:
    design: DimensionlessDesign
    geometry: RrsGeometry
    atlas: AtlasResult
    initial_atlas: AtlasResult
    area_mean: float
    area_std: float
    seed_areas: list
    iterations: int

    def improvement_pct(self) -> float:
        base = self.initial_atlas.area
        return 100.0 * (self.atlas.area - base) / base if base > 0 else float("inf")


def reseeded_areas(
    g: RrsGeometry, grid: OrientationGrid, sigma_threshold: float, n_seeds: int = 10
):
    """A_w under n fresh jitter seeds (Monte Carlo spread of the estimate)."""
    base = 0 if grid.jitter_seed is None else grid.jitter_seed
    areas = []
    for k in range(n_seeds):
        grid_k = OrientationGrid(grid.half_range, grid.step, grid.z, base + 1 + k)
        areas.append(compute_atlas(g, grid_k, sigma_threshold).area)
    return np.array(areas)


def optimize_design(
    initial: DimensionlessDesign,
    grid: OrientationGrid,
    sigma_threshold: float = SIGMA_OMEGA,
    l2_ratio: float | None = None,
    h_min: float = 0.10,
    h_max: float = 0.30,
    max_iter: int = 200,
    simplex_edge: float = 0.1,
) -> OptimizeResult:
    """Maximize A_w over (lambda_1, lambda_2) with lambda_3 = 4 - l1 - l2.

    The jitter seed is frozen for the whole search so the objective is
    deterministic; infeasible designs score -1 (death penalty).  Final
    statistics are averaged over 10 fresh jitter seeds.
    """
    if not initial.feasible():
        raise ValueError("initial design violates the lambda constraints")
    if l2_ratio is None:
        l2_ratio = DEFAULT_L2_RATIO

    def build(x):
        lam1, lam2 = float(x[0]), float(x[1])
        d = DimensionlessDesign(lam1, lam2, 4.0 - lam1 - lam2, initial.scale)
        return d if d.feasible() else None

    def objective(x):
        d = build(x)
        if d is None:
            return 1.0  # A_w = -1 death penalty, minimized as -A_w
        geom = from_dimensionless(d, l2_ratio, h_min, h_max)
        return -compute_atlas(geom, grid, sigma_threshold).area

    x0 = np.array([initial.lambda1, initial.lambda2])
    simplex = np.array([x0, x0 + [simplex_edge, 0.0], x0 + [0.0, simplex_edge]])
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options=dict(
            initial_simplex=simplex,
            xatol=1e-3,
            fatol=np.inf,
            maxiter=max_iter,
            maxfev=100000,
        ),
    )
    best = build(res.x)
    if best is None:  # pragma: no cover - x0 is feasible, NM keeps the best
        best = initial
    geom = from_dimensionless(best, l2_ratio, h_min, h_max)
    atlas = compute_atlas(geom, grid, sigma_threshold)
    init_geom = from_dimensionless(initial, l2_ratio, h_min, h_max)
    init_atlas = compute_atlas(init_geom, grid, sigma_threshold)
    areas = reseeded_areas(geom, grid, sigma_threshold)
    return OptimizeResult(
        design=best,
        geometry=geom,
        atlas=atlas,
        initial_atlas=init_atlas,
        area_mean=float(np.mean(areas)),
        area_std=float(np.std(areas)),
        seed_areas=[float(a) for a in areas],
        iterations=int(res.nit),
    )
