"""Pinhole projection, back-projection and projector/grating triangulation.

Conventions used throughout the package:

* world coordinates are millimetres, image coordinates are pixels;
* pixel ``(row i, col j)`` has its centre at ``(u, v) = (j, i)``;
* the depth ``s`` used by :func:`back_project` is the camera-frame z, i.e. the
  third homogeneous component of ``A [R t] [x; 1]``;
* projection matrices are kept unnormalised.  Comparisons go through
  :func:`normalize_matrix` (unit Frobenius norm, largest-magnitude entry
  positive).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import (
    ConfigError,
    DegenerateNormalizer,
    DegenerateRays,
    DepthAtInfinity,
    SingularIntrinsics,
)

DEPTH_EPS = 1e-12
NORMALIZER_EPS = 1e-12
MAX_TRIANGULATION_COND = 1e12
ORTHO_TOL = 1e-9


class _ArrayEq:
    """Exact equality and hashing over the array fields of a frozen dataclass."""

    def _arrays(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays()))

    def __hash__(self):
        return hash(tuple(a.tobytes() for a in self._arrays()))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fu: float
    fv: float
    gamma: float = 0.0
    u0: float = 0.0
    v0: float = 0.0

    def __post_init__(self):
        vals = (self.fu, self.fv, self.gamma, self.u0, self.v0)
        if not all(np.isfinite(vals)):
            raise ConfigError(f"non-finite intrinsics {vals}")
        if not (self.fu > 0 and self.fv > 0):
            raise SingularIntrinsics(f"focal lengths must be positive, got fu={self.fu}, fv={self.fv}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fu, self.gamma, self.u0], [0.0, self.fv, self.v0], [0.0, 0.0, 1.0]]
        )

    def normalized_rays(self, u, v) -> np.ndarray:
        """``A^-1 [u v 1]^T`` for arrays of pixel coordinates, shape ``(..., 3)``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        y = (v - self.v0) / self.fv
        x = (u - self.u0 - self.gamma * y) / self.fu
        return np.stack(np.broadcast_arrays(x, y, np.ones_like(x)), axis=-1)

    def to_dict(self) -> dict:
        return {"fu": self.fu, "fv": self.fv, "gamma": self.gamma, "u0": self.u0, "v0": self.v0}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fu"]), float(d["fv"]), float(d.get("gamma", 0.0)),
                   float(d["u0"]), float(d["v0"]))


@dataclass(frozen=True, eq=False)
class Pose(_ArrayEq):
    """Rigid transform mapping world points into the device frame: ``x_dev = R x_w + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _frozen(self.R)
        t = _frozen(self.t).reshape(3)
        if R.shape != (3, 3):
            raise ConfigError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ConfigError("non-finite pose")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ConfigError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def compose(self, inner: "Pose") -> "Pose":
        """Return the pose ``self o inner`` (apply ``inner`` first)."""
        return Pose(self.R @ inner.R, self.R @ inner.t + self.t)

    @property
    def center(self) -> np.ndarray:
        """Device centre expressed in world coordinates."""
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


@dataclass(frozen=True, eq=False)
class ProjectionMatrix(_ArrayEq):
    m: np.ndarray

    def __post_init__(self):
        m = _frozen(self.m).reshape(3, 4)
        if not np.all(np.isfinite(m)):
            raise ConfigError("projection matrix has non-finite entries")
        if not np.any(m):
            raise ConfigError("projection matrix is all zeros")
        object.__setattr__(self, "m", m)

    def to_list(self) -> list[float]:
        return [float(x) for x in self.m.ravel()]

    @classmethod
    def from_list(cls, values) -> "ProjectionMatrix":
        values = list(values)
        if len(values) != 12:
            raise ConfigError(f"projection matrix needs 12 values, got {len(values)}")
        return cls(np.array(values, dtype=np.float64).reshape(3, 4))

    def scaled(self, c: float) -> "ProjectionMatrix":
        return ProjectionMatrix(self.m * c)


@dataclass(frozen=True, eq=False)
class ReducedSpdgVector(_ArrayEq):
    """Seven grating/detector parameters ``(m31, m32, m33, m34, m21, m22, m23) / m24``."""

    v: np.ndarray = field()

    def __post_init__(self):
        v = _frozen(self.v).reshape(-1)
        if v.shape != (7,):
            raise ConfigError(f"reduced SPDG vector needs 7 values, got {v.size}")
        if not np.all(np.isfinite(v)) or not np.any(v):
            raise ConfigError("reduced SPDG vector must be finite and nonzero")
        object.__setattr__(self, "v", v)

    def to_list(self) -> list[float]:
        return [float(x) for x in self.v]

    @classmethod
    def from_list(cls, values) -> "ReducedSpdgVector":
        return cls(np.array(list(values), dtype=np.float64))


def compose_projection(intr: CameraIntrinsics, pose: Pose) -> ProjectionMatrix:
    a = intr.matrix
    rt = np.hstack([pose.R, pose.t[:, None]])
    m = np.empty((3, 4))
    for i in range(3):
        for j in range(4):
            m[i, j] = a[i, 0] * rt[0, j] + a[i, 1] * rt[1, j] + a[i, 2] * rt[2, j]
    return ProjectionMatrix(m)


def project_many(m, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection without the depth check: returns ``(u, v, s)``."""
    m = m.m if isinstance(m, ProjectionMatrix) else np.asarray(m, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    h = p @ m[:, :3].T + m[:, 3]
    s = h[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return h[..., 0] / s, h[..., 1] / s, s


def project(m, p):
    """Project world point(s) through a 3x4 matrix.

    Returns ``(u, v, s)`` where ``s`` is the third homogeneous component.
    Raises DepthAtInfinity when ``|s| < 1e-12`` for any input point.
    """
    u, v, s = project_many(m, p)
    if np.any(np.abs(s) < DEPTH_EPS):
        raise DepthAtInfinity("homogeneous depth is zero")
    if np.ndim(s) == 0:
        return float(u), float(v), float(s)
    return u, v, s


def back_project(intr: CameraIntrinsics, pose: Pose, u, v, s) -> np.ndarray:
    """World point(s) seen at pixel ``(u, v)`` with camera-frame depth ``s``."""
    if not isinstance(intr, CameraIntrinsics):
        a = np.asarray(intr, dtype=np.float64)
        if abs(np.linalg.det(a)) < DEPTH_EPS:
            raise SingularIntrinsics("intrinsic matrix is singular")
        rays = np.stack(np.broadcast_arrays(
            np.asarray(u, float), np.asarray(v, float), np.ones_like(np.asarray(u, float))), axis=-1)
        rays = rays @ np.linalg.inv(a).T
    else:
        rays = intr.normalized_rays(u, v)
    cam = rays * np.asarray(s, dtype=np.float64)[..., None]
    # R^-1 = R^T for a rotation
    return (cam - pose.t) @ pose.R


def reduce_spdg(ms_full) -> ReducedSpdgVector:
    m = ms_full.m if isinstance(ms_full, ProjectionMatrix) else np.asarray(ms_full, dtype=float)
    m24 = m[1, 3]
    if abs(m24) < NORMALIZER_EPS:
        raise DegenerateNormalizer(f"m24 = {m24:g}")
    return ReducedSpdgVector(np.array([m[2, 0], m[2, 1], m[2, 2], m[2, 3], m[1, 0], m[1, 1], m[1, 2]]) / m24)


def spdg_design_rows(points, vs) -> np.ndarray:
    """Rows ``b = (vs x, vs y, vs z, vs, -x, -y, -z)``, shape ``(n, 7)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vs = np.asarray(vs, dtype=np.float64).reshape(-1)
    return np.column_stack([vs[:, None] * p, vs, -p])


def spdg_residual(ms: ReducedSpdgVector, points, vs) -> np.ndarray:
    """``b . m_s - 1`` for each point; zero for data consistent with ``ms``."""
    return spdg_design_rows(points, vs) @ ms.v - 1.0


def triangulation_system(mp, ms: ReducedSpdgVector, up, vp, vs) -> tuple[np.ndarray, np.ndarray]:
    """Build the stacked 3x3 systems ``C X = d`` for each pixel."""
    m = mp.m if isinstance(mp, ProjectionMatrix) else np.asarray(mp, dtype=float)
    up, vp, vs = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (up, vp, vs)))
    w = ms.v
    C = np.empty(up.shape + (3, 3))
    C[..., 0, :] = m[0, :3] - up[..., None] * m[2, :3]
    C[..., 1, :] = m[1, :3] - vp[..., None] * m[2, :3]
    C[..., 2, :] = w[4:7] - vs[..., None] * w[0:3]
    d = np.stack([up * m[2, 3] - m[0, 3], vp * m[2, 3] - m[1, 3], vs * w[3] - 1.0], axis=-1)
    return C, d


def solve3(C: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve stacked 3x3 systems by the adjugate.

    Returns ``(x, cond)`` with ``cond = |C|_F |C^-1|_F``; singular systems give
    ``inf`` condition and NaN solutions.
    """
    a, b, c = C[..., 0, :], C[..., 1, :], C[..., 2, :]
    # columns of the adjugate are cross products of row pairs
    bc = np.cross(b, c)
    ca = np.cross(c, a)
    ab = np.cross(a, b)
    det = np.einsum("...i,...i->...", a, bc)
    adj = np.stack([bc, ca, ab], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = adj / det[..., None, None]
        x = np.einsum("...ij,...j->...i", inv, d)
        cond = np.linalg.norm(C, axis=(-2, -1)) * np.linalg.norm(inv, axis=(-2, -1))
    cond = np.where(np.isfinite(cond), cond, np.inf)
    return x, cond


def triangulate_many(mp, ms: ReducedSpdgVector, up, vp, vs) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised triangulation; returns ``(points, ok)`` where ``ok`` flags well-conditioned rays."""
    C, d = triangulation_system(mp, ms, up, vp, vs)
    x, cond = solve3(C, d)
    return x, cond <= MAX_TRIANGULATION_COND


def triangulate(mp, ms: ReducedSpdgVector, up, vp, vs) -> np.ndarray:
    """Intersect the camera ray through ``(up, vp)`` with the grating plane ``vs``."""
    x, ok = triangulate_many(mp, ms, up, vp, vs)
    if not np.all(ok):
        raise DegenerateRays("triangulation system is ill-conditioned (cond > 1e12)")
    return x


def normalize_matrix(m) -> np.ndarray:
    """Unit Frobenius norm with the largest-magnitude entry made positive."""
    m = np.asarray(m.m if isinstance(m, ProjectionMatrix) else m, dtype=np.float64)
    n = m / np.linalg.norm(m)
    k = np.argmax(np.abs(n))
    return n if n.flat[k] > 0 else -n


def relative_error_up_to_scale(a, b) -> float:
    na, nb = normalize_matrix(a), normalize_matrix(b)
    return float(np.linalg.norm(na - nb) / np.linalg.norm(nb))


def rotation_xyz(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles in radians."""
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    cz, sz = np.cos(theta_z), np.sin(theta_z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx
