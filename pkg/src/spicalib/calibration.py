"""Single-view calibration from a cube pointmap and an absolute phase map.

The camera matrix comes from a normalised DLT over the pointmap's
pixel/world pairs; the seven grating parameters come from the linear system
``b . m_s = 1`` built from world points and their grating coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateConfiguration,
    RankDeficient,
    SinglePlaneOnly,
    TooFewPoints,
)
from .geometry import (
    ProjectionMatrix,
    ReducedSpdgVector,
    project_many,
    spdg_design_rows,
    spdg_residual,
)
from .phase import phase_to_vs

FILTER_TOL_MM = 0.01
MIN_MP_POINTS = 6
MIN_MS_POINTS = 7
MIN_FACE_POINTS = 3
DEGENERACY_RATIO = 1e3
RANK_RTOL = 1e-10
SUBSAMPLE_TRIGGER = 50_000
SUBSAMPLE_SIZE = 20_000
SUBSAMPLE_SEED = 0


@dataclass
class CorrespondenceSet:
    world: np.ndarray  # (n, 3) mm
    pixels: np.ndarray  # (n, 2) as (u, v)

    def __post_init__(self):
        self.world = np.asarray(self.world, dtype=np.float64).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if len(self.world) != len(self.pixels):
            raise ConfigError("world and pixel arrays differ in length")
        if not (np.all(np.isfinite(self.world)) and np.all(np.isfinite(self.pixels))):
            raise ConfigError("correspondences must be finite")
        if len(np.unique(self.pixels, axis=0)) != len(self.pixels):
            raise ConfigError("duplicate pixels in correspondence set")

    def __len__(self):
        return len(self.world)


@dataclass
class SpdgCorrespondenceSet:
    world: np.ndarray  # (n, 3) mm
    vs: np.ndarray  # (n,)
    missing: list = field(default_factory=list)  # pixels dropped for lack of phase

    def __post_init__(self):
        self.world = np.asarray(self.world, dtype=np.float64).reshape(-1, 3)
        self.vs = np.asarray(self.vs, dtype=np.float64).reshape(-1)
        if len(self.world) != len(self.vs):
            raise ConfigError("world and vs arrays differ in length")
        if not (np.all(np.isfinite(self.world)) and np.all(np.isfinite(self.vs))):
            raise ConfigError("correspondences must be finite")

    def __len__(self):
        return len(self.world)


@dataclass
class CalibrationResult:
    mp: ProjectionMatrix
    ms: ReducedSpdgVector
    reprojection_rmse_px: float
    spdg_residual_rms: float
    num_points: int
    cube_side_mm: float
    period_T: float
    frames_used: int | None = None

    def to_dict(self) -> dict:
        d = {
            "Mp": self.mp.to_list(),
            "ms": self.ms.to_list(),
            "reprojection_rmse_px": float(self.reprojection_rmse_px),
            "spdg_residual_rms": float(self.spdg_residual_rms),
            "num_points": int(self.num_points),
            "cube_side_mm": float(self.cube_side_mm),
            "period_T": float(self.period_T),
        }
        if self.frames_used is not None:
            d["frames_used"] = int(self.frames_used)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        try:
            return cls(
                ProjectionMatrix.from_list(d["Mp"]),
                ReducedSpdgVector.from_list(d["ms"]),
                float(d["reprojection_rmse_px"]),
                float(d["spdg_residual_rms"]),
                int(d["num_points"]),
                float(d["cube_side_mm"]),
                float(d["period_T"]),
                d.get("frames_used"),
            )
        except KeyError as exc:
            raise ConfigError(f"calibration file missing field {exc.args[0]!r}") from None


def cube_surface_distance(points, side: float) -> np.ndarray:
    """Unsigned distance from each point to the surface of the cube ``[0, side]^3``."""
    q = np.abs(np.asarray(points, dtype=np.float64) - side / 2.0)
    h = side / 2.0
    outside = np.linalg.norm(np.maximum(q - h, 0.0), axis=-1)
    inside = np.min(h - q, axis=-1)
    return np.where(np.any(q > h, axis=-1), outside, inside)


def nearest_face(points, side: float) -> np.ndarray:
    """Index ``2*axis + (coord > side/2)`` of the closest face plane."""
    p = np.asarray(points, dtype=np.float64)
    d = np.concatenate([np.abs(p), np.abs(p - side)], axis=-1)[..., [0, 3, 1, 4, 2, 5]]
    return np.argmin(d, axis=-1)


def filter_pointmap(pm, cube, tol_mm: float = FILTER_TOL_MM) -> CorrespondenceSet:
    """Keep pointmap pixels lying within ``tol_mm`` of the ideal cube surface.

    ``cube`` is a :class:`~spicalib.twin.CubeModel` or the side length in mm.
    """
    side = float(getattr(cube, "side", cube))
    coords = np.asarray(pm.coords, dtype=np.float64)
    mask = np.asarray(pm.mask, dtype=bool) & np.all(np.isfinite(coords), axis=-1)
    rows, cols = np.nonzero(mask)
    world = coords[rows, cols] * side
    keep = cube_surface_distance(world, side) < tol_mm
    world, rows, cols = world[keep], rows[keep], cols[keep]
    if len(world) < MIN_MP_POINTS:
        raise TooFewPoints(f"{len(world)} pointmap entries pass the {tol_mm} mm filter, need {MIN_MP_POINTS}")
    faces = np.bincount(nearest_face(world, side), minlength=6)
    if np.sum(faces >= MIN_FACE_POINTS) < 2:
        raise SinglePlaneOnly("all surviving points lie on one cube face")
    return CorrespondenceSet(world, np.column_stack([cols, rows]))


def _similarity(points: np.ndarray) -> np.ndarray:
    """Hartley conditioning: centre at the origin, mean distance sqrt(dim)."""
    dim = points.shape[1]
    c = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - c, axis=1))
    s = np.sqrt(dim) / mean_dist if mean_dist > 0 else 1.0
    T = np.eye(dim + 1)
    T[:dim, :dim] *= s
    T[:dim, dim] = -s * c
    return T


def _subsample(n: int) -> np.ndarray | None:
    if n <= SUBSAMPLE_TRIGGER:
        return None
    rng = np.random.default_rng(SUBSAMPLE_SEED)
    return np.sort(rng.choice(n, SUBSAMPLE_SIZE, replace=False))


def solve_mp(corrs: CorrespondenceSet) -> ProjectionMatrix:
    """Normalised DLT for the 3x4 camera matrix."""
    world, pix = corrs.world, corrs.pixels
    if len(world) < MIN_MP_POINTS:
        raise TooFewPoints(f"need {MIN_MP_POINTS} correspondences, got {len(world)}")
    idx = _subsample(len(world))
    if idx is not None:
        world, pix = world[idx], pix[idx]
    T3 = _similarity(world)
    T2 = _similarity(pix)
    X = np.column_stack([world, np.ones(len(world))]) @ T3.T
    x = np.column_stack([pix, np.ones(len(pix))]) @ T2.T
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -x[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -x[:, 1:2] * X
    _, sv, vt = np.linalg.svd(A, full_matrices=False)
    # floor the smallest value at round-off so exact degenerate data, where
    # both are noise, is not mistaken for a separated gap
    floor = max(sv[-1], np.finfo(float).eps * sv[0] * len(sv)) if sv.size else 0.0
    if sv.size < 12 or sv[-2] < DEGENERACY_RATIO * floor:
        raise DegenerateConfiguration(
            f"smallest singular values {sv[-2]:.3g}, {sv[-1]:.3g} are not separated (coplanar points?)")
    m = vt[-1].reshape(3, 4)
    return ProjectionMatrix(np.linalg.solve(T2, m @ T3))


def solve_ms(corrs: SpdgCorrespondenceSet) -> ReducedSpdgVector:
    """Least-squares solution of ``b . m_s = 1`` via QR on column-scaled rows."""
    if len(corrs) < MIN_MS_POINTS:
        raise RankDeficient(f"need {MIN_MS_POINTS} correspondences, got {len(corrs)}")
    world, vs = corrs.world, corrs.vs
    idx = _subsample(len(world))
    if idx is not None:
        world, vs = world[idx], vs[idx]
    B = spdg_design_rows(world, vs)
    scale = np.linalg.norm(B, axis=0)
    if np.any(scale == 0):
        raise RankDeficient("design matrix has an all-zero column")
    Bn = B / scale
    sv = np.linalg.svd(Bn, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    if rank < 7:
        raise RankDeficient(f"design matrix has numerical rank {rank} < 7")
    q, r = np.linalg.qr(Bn)
    y = np.linalg.solve(r, q.T @ np.ones(len(Bn)))
    return ReducedSpdgVector(y / scale)


def match_vs(corrs: CorrespondenceSet, absolute_phase, period_T: float,
             phase_mask=None) -> SpdgCorrespondenceSet:
    """Pair each world point with the grating coordinate of its pixel.

    Pixels outside ``phase_mask`` (or with non-finite phase) are dropped and
    listed in ``missing``.
    """
    phase = np.asarray(absolute_phase, dtype=np.float64)
    cols = corrs.pixels[:, 0].astype(int)
    rows = corrs.pixels[:, 1].astype(int)
    values = phase[rows, cols]
    ok = np.isfinite(values)
    if phase_mask is not None:
        ok &= np.asarray(phase_mask, dtype=bool)[rows, cols]
    missing = [(int(u), int(v)) for u, v in corrs.pixels[~ok]]
    return SpdgCorrespondenceSet(corrs.world[ok], phase_to_vs(values[ok], period_T), missing)


def reprojection_rmse(mp: ProjectionMatrix, corrs: CorrespondenceSet) -> float:
    u, v, _ = project_many(mp, corrs.world)
    return float(np.sqrt(np.mean((u - corrs.pixels[:, 0]) ** 2 + (v - corrs.pixels[:, 1]) ** 2)))


def calibrate(pointmap, absolute_phase, cube_side: float, period_T: float,
              phase_mask=None, tol_mm: float = FILTER_TOL_MM,
              frames_used: int | None = None) -> CalibrationResult:
    """Solve both devices from one pointmap and one absolute phase map."""
    corrs = filter_pointmap(pointmap, cube_side, tol_mm)
    mp = solve_mp(corrs)
    spdg = match_vs(corrs, absolute_phase, period_T, phase_mask)
    ms = solve_ms(spdg)
    resid = spdg_residual(ms, spdg.world, spdg.vs)
    return CalibrationResult(
        mp=mp,
        ms=ms,
        reprojection_rmse_px=reprojection_rmse(mp, corrs),
        spdg_residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        num_points=len(spdg),
        cube_side_mm=float(cube_side),
        period_T=float(period_T),
        frames_used=frames_used,
    )


def calibrate_scene(scene, phase_source: str = "analytic", shifts: int = 4) -> CalibrationResult:
    """Calibrate from one rendering of a twin scene.

    ``phase_source='analytic'`` uses the renderer's ground-truth phase for a
    single fringe image; ``'shift'`` runs phase shifting on ``shifts`` frames
    produced by the same rendering event.
    """
    from . import twin
    from .phase import recover_phase

    if phase_source == "analytic":
        out = twin.render(scene)
        phase, mask, frames = out.phase_true, out.mask & out.lit_mask, 1
    elif phase_source == "shift":
        out = twin.render(scene, shifts=shifts)
        maps = recover_phase(out.frames)
        phase, mask, frames = maps.absolute, maps.modulation_mask, maps.frames_used
    else:
        raise ConfigError(f"unknown phase source {phase_source!r}")
    pm = twin.generate_pointmap(out, scene)
    return calibrate(pm, phase, scene.cube.side, scene.fringe.period_T, mask, frames_used=frames)
