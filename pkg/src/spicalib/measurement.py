"""Point-cloud reconstruction and fitting of reference shapes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateInput, MismatchedDimensions, SegmentationFailed
from .geometry import triangulate_many
from .phase import phase_to_vs

PLANAR_RTOL = 1e-9


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) mm
    pixels: np.ndarray | None = None  # (n, 2) as (u, v)
    skipped: int = 0  # pixels dropped for ill-conditioned triangulation

    def __len__(self):
        return len(self.points)


@dataclass
class FitReport:
    kind: str
    params: dict
    rmse_mm: float
    inlier_count: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"model": self.kind, "params": self.params, "rmse_mm": self.rmse_mm,
             "inlier_count": self.inlier_count}
        d.update(self.extra)
        return d


def reconstruct(calib, absolute_phase, modulation_mask) -> PointCloud:
    """Triangulate every masked pixel; ill-conditioned pixels are skipped and counted."""
    phase = np.asarray(absolute_phase, dtype=np.float64)
    mask = np.asarray(modulation_mask, dtype=bool)
    if phase.shape != mask.shape:
        raise MismatchedDimensions(f"phase {phase.shape} and mask {mask.shape} differ")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 2)))
    vs = phase_to_vs(phase[rows, cols], calib.period_T)
    pts, ok = triangulate_many(calib.mp, calib.ms, cols.astype(float), rows.astype(float), vs)
    ok &= np.all(np.isfinite(pts), axis=1)
    return PointCloud(pts[ok], np.column_stack([cols, rows])[ok].astype(float), int(np.sum(~ok)))


def _points(points) -> np.ndarray:
    p = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    return p[np.all(np.isfinite(p), axis=1)]


def fit_plane(points) -> FitReport:
    """Total-least-squares plane ``n . x = offset`` with unit ``n``."""
    p = _points(points)
    if len(p) < 3:
        raise DegenerateInput(f"plane fit needs 3 points, got {len(p)}")
    c = p.mean(axis=0)
    _, sv, vt = np.linalg.svd(p - c, full_matrices=False)
    if sv[1] <= PLANAR_RTOL * max(sv[0], 1e-300):
        raise DegenerateInput("points are collinear")
    n = vt[2]
    # make the fitted normal deterministic: largest component positive
    if n[np.argmax(np.abs(n))] < 0:
        n = -n
    offset = float(n @ c)
    resid = p @ n - offset
    return FitReport("plane", {"normal": n.tolist(), "offset_mm": offset},
                     float(np.sqrt(np.mean(resid ** 2))), len(p))


def fit_sphere(points) -> FitReport:
    """Algebraic sphere fit followed by one Gauss-Newton pass on radial distance."""
    p = _points(points)
    if len(p) < 4:
        raise DegenerateInput(f"sphere fit needs 4 points, got {len(p)}")
    mu = p.mean(axis=0)
    q = p - mu
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[2] <= PLANAR_RTOL * sv[0]:
        raise DegenerateInput("points are coplanar")
    # |x|^2 = 2 c.x + (r^2 - |c|^2), solved in centred coordinates
    A = np.column_stack([2 * q, np.ones(len(q))])
    sol, *_ = np.linalg.lstsq(A, np.sum(q * q, axis=1), rcond=None)
    c = sol[:3]
    r = np.sqrt(sol[3] + c @ c)

    def cost(c_, r_):
        return np.sum((np.linalg.norm(q - c_, axis=1) - r_) ** 2)

    diff = q - c
    dist = np.linalg.norm(diff, axis=1)
    J = np.column_stack([-diff / dist[:, None], -np.ones(len(q))])
    res = dist - r
    step, *_ = np.linalg.lstsq(J, -res, rcond=None)
    base = cost(c, r)
    for _ in range(30):
        c_new, r_new = c + step[:3], r + step[3]
        if cost(c_new, r_new) <= base:
            c, r = c_new, r_new
            break
        step = step / 2

    resid = np.linalg.norm(q - c, axis=1) - r
    center = c + mu
    return FitReport("sphere", {"center_mm": center.tolist(), "radius_mm": float(r)},
                     float(np.sqrt(np.mean(resid ** 2))), len(p))


def _local_normals(p: np.ndarray, tree: cKDTree, k: int):
    _, nbr = tree.query(p, k=k)
    nb = p[nbr]
    cov = np.einsum("nki,nkj->nij", nb - nb.mean(axis=1, keepdims=True), nb - nb.mean(axis=1, keepdims=True))
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    flatness = w[:, 0] / np.maximum(w.sum(axis=1), 1e-300)
    return normals, flatness, nbr


def _region_grow(normals, flatness, nbr, angle_deg: float, max_flatness: float):
    n = len(normals)
    cos_t = np.cos(np.radians(angle_deg))
    labels = np.full(n, -1)
    order = np.argsort(flatness, kind="stable")
    current = 0
    for seed in order:
        if labels[seed] >= 0 or flatness[seed] > max_flatness:
            continue
        labels[seed] = current
        ref = normals[seed]
        stack = [seed]
        while stack:
            i = stack.pop()
            for j in nbr[i]:
                if labels[j] < 0 and flatness[j] <= max_flatness and abs(normals[j] @ ref) >= cos_t:
                    labels[j] = current
                    stack.append(j)
        current += 1
    return labels


def _box_signed_distance(q: np.ndarray, h: float) -> np.ndarray:
    a = np.abs(q) - h
    outside = np.linalg.norm(np.maximum(a, 0.0), axis=1)
    inside = np.minimum(np.max(a, axis=1), 0.0)
    return outside + inside


def fit_cube(points, side: float, k: int = 12, angle_deg: float = 12.0) -> FitReport:
    """Fit a cube of known side to a scan of two or three of its faces.

    Faces are segmented by region growing on local PCA normals; the cube
    orientation is initialised from the segment normals (orthogonalised
    jointly) and then the full pose is refined against the signed distance to
    the ideal cube surface.  The reported RMSE pools all points.
    """
    p = _points(points)
    if len(p) < 3 * k:
        raise SegmentationFailed(f"too few points ({len(p)}) to segment")
    tree = cKDTree(p)
    normals, flatness, nbr = _local_normals(p, tree, k)
    max_flat = max(np.quantile(flatness, 0.5) * 4.0, 1e-12)
    labels = _region_grow(normals, flatness, nbr, angle_deg, max_flat)
    min_size = max(k, int(0.03 * len(p)))
    sizes = np.bincount(labels[labels >= 0]) if np.any(labels >= 0) else np.zeros(0, int)
    clusters = [c for c in np.argsort(-sizes, kind="stable") if sizes[c] >= min_size]

    planes = []  # (normal, member points)
    for c in clusters:
        members = p[labels == c]
        n = np.array(fit_plane(members).params["normal"])
        if all(abs(n @ m) < np.cos(np.radians(60)) for m, _ in planes):
            planes.append((n, members))
        if len(planes) == 3:
            break
    if len(planes) < 2:
        raise SegmentationFailed(f"found {len(planes)} stable planar cluster(s), need 2")

    dihedral = float(np.degrees(np.arccos(np.clip(abs(planes[0][0] @ planes[1][0]), 0, 1))))
    # outward normals point away from the other faces of a convex cube
    centroids = [m.mean(axis=0) for _, m in planes]
    targets = []
    for i, (n, _) in enumerate(planes):
        others = np.mean([c for j, c in enumerate(centroids) if j != i], axis=0)
        targets.append(n if n @ (centroids[i] - others) > 0 else -n)
    targets = np.array(targets)

    # joint orthogonal frame closest to the outward normals (Kabsch)
    H = np.eye(3)[: len(targets)].T @ targets
    u, _, vt = np.linalg.svd(H)
    d = 1.0 if np.linalg.det(u @ vt) > 0 else -1.0
    R = (u @ np.diag([1.0, 1.0, d]) @ vt).T  # columns are cube axes in world

    h = side / 2.0
    center = np.zeros(3)
    for i in range(3):
        a = R[:, i]
        if i < len(planes):
            center += a * (np.mean(planes[i][1] @ a) - h)
        else:
            proj = p @ a
            center += a * 0.5 * (proj.min() + proj.max())

    def residuals(x):
        rot = Rotation.from_rotvec(x[:3]).as_matrix() @ R
        q = (p - x[3:]) @ rot
        return _box_signed_distance(q, h)

    x0 = np.concatenate([np.zeros(3), center])
    sol = optimize.least_squares(residuals, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    resid = residuals(sol.x)
    rot = Rotation.from_rotvec(sol.x[:3]).as_matrix() @ R
    return FitReport(
        "cube",
        {"center_mm": sol.x[3:].tolist(), "rotation": rot.tolist(), "side_mm": float(side)},
        float(np.sqrt(np.mean(resid ** 2))),
        len(p),
        {"planes_found": len(planes), "dihedral_deg": dihedral},
    )
