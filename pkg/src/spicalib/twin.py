"""Ray-cast digital twin of the fringe-projection calibration rig.

The rig is built around a fixed viewing geometry:

* the *camera* (the SPI projector, which images the scene) sits at
  ``WORKING_DISTANCE_MM`` from the look-at point, elevated by
  ``ELEVATION_DEG`` so that the top and two side faces of the cube are seen;
* the *grating projector* (single-pixel detector + grating) sits
  ``BASELINE_RATIO * WORKING_DISTANCE_MM`` above the camera and aims at the
  same point.  The baseline is perpendicular to the horizontal fringes, which
  is what makes the grating planes intersect the camera rays at a usable
  angle.

World coordinates are the calibration cube's own frame: the cube occupies
``[0, side]^3`` with one corner at the origin.  The cube pose factors
(rotations about the cube axes and image-plane shifts) are folded into the
camera and grating matrices, so the stored matrices are exactly the ones a
calibration should recover.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, CubeNotVisible, InsufficientFaces, InvalidRange, RenderError
from .geometry import (
    CameraIntrinsics,
    Pose,
    ProjectionMatrix,
    back_project,
    compose_projection,
    project_many,
    rotation_xyz,
)

SENSOR_WIDTH_MM = 36.0
WORKING_DISTANCE_MM = 150.0
BASELINE_RATIO = 0.2
ELEVATION_DEG = 30.0
# grating projector focal length in its own pixel units; phase 0 lies on its optical axis
SPDG_FOCAL_PX = 128 * 37.5 / SENSOR_WIDTH_MM
# 128 / 9.6 = 13.3 fringes at alpha = 1, 8 at alpha = 0.6
PERIOD_BASE = 9.6
MARKER_WIDTH_FRACTION = 0.06
MIN_FACE_PIXELS = 20
CUBE_SIDE_MM = 50.0
IMAGE_SIZE = 128

_render_events = 0


def render_events() -> int:
    """Number of :func:`render` calls made in this process."""
    return _render_events


def worker_count() -> int:
    """Thread cap from ``SPICALIB_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("SPICALIB_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SPICALIB_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("SPICALIB_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class TableRanges:
    """Sampling intervals of the randomised factors.  Angles in degrees, shifts in cm."""

    f_mm: tuple[float, float] = (25.0, 50.0)
    theta_x_deg: tuple[float, float] = (-5.0, 5.0)
    theta_y_deg: tuple[float, float] = (-5.0, 5.0)
    theta_z_deg: tuple[float, float] = (35.0, 60.0)
    delta_x_cm: tuple[float, float] = (-3.0, 3.0)
    delta_y_cm: tuple[float, float] = (-3.0, 3.0)
    alpha: tuple[float, float] = (0.6, 1.0)
    beta: tuple[float, float] = (0.2, 0.6)
    lam: tuple[float, float] = (0.0, 0.3)

    def __post_init__(self):
        for name, (lo, hi) in self.items():
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise InvalidRange(f"{name}: bounds must be finite")
            if lo > hi:
                raise InvalidRange(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.f_mm[0] <= 0:
            raise InvalidRange("f_mm: focal length must be positive")
        if self.alpha[0] <= 0:
            raise InvalidRange("alpha: must be positive")
        if self.beta[0] < 0 or self.beta[1] >= 1:
            raise InvalidRange("beta: must lie in [0, 1)")
        if self.lam[0] < 0 or self.lam[1] > 1:
            raise InvalidRange("lam: must lie in [0, 1]")

    def items(self):
        return [(k, tuple(v)) for k, v in asdict(self).items()]

    def midpoint(self) -> dict:
        return {k: 0.5 * (lo + hi) for k, (lo, hi) in self.items()}

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TableRanges":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown range field(s): {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            try:
                lo, hi = (float(x) for x in v)
            except (TypeError, ValueError):
                raise ConfigError(f"{k}: expected [lower, upper]") from None
            kwargs[k] = (lo, hi)
        return cls(**kwargs)


@dataclass(frozen=True)
class CubeModel:
    side: float
    pose: Pose  # cube frame -> rig frame

    def __post_init__(self):
        if not self.side > 0:
            raise ConfigError(f"cube side must be positive, got {self.side}")


@dataclass(frozen=True)
class SphereModel:
    """Sphere target expressed directly in world (cube-frame) millimetres."""

    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class FringeSpec:
    period_T: float
    alpha: float
    beta: float
    lambda_noise: float
    direction: str = "horizontal"
    marker_order: int = 0
    marker: bool = True
    shading: bool = True

    def __post_init__(self):
        if not self.period_T > 0:
            raise ConfigError("period_T must be positive")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        if not 0 <= self.lambda_noise <= 1:
            raise ConfigError("lambda_noise must lie in [0, 1]")
        if self.direction != "horizontal":
            raise ConfigError("only horizontal fringes are supported")
        if self.marker_order != 0:
            raise ConfigError("the marker always labels order 0")


@dataclass(frozen=True)
class SceneConfig:
    cube: CubeModel
    cam_intr: CameraIntrinsics
    cam_pose: Pose  # world -> camera
    spdg_full_matrix: ProjectionMatrix  # world -> grating projector
    fringe: FringeSpec
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE
    rng_seed: int = 0
    factors: dict = field(default_factory=dict, compare=False)
    sphere: SphereModel | None = None

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError(f"image must be at least 16x16, got {self.width}x{self.height}")

    @property
    def cam_matrix(self) -> ProjectionMatrix:
        return compose_projection(self.cam_intr, self.cam_pose)

    def with_noise(self, lam: float, seed: int | None = None) -> "SceneConfig":
        fringe = replace(self.fringe, lambda_noise=lam)
        return replace(self, fringe=fringe, rng_seed=self.rng_seed if seed is None else seed)

    def with_sphere(self, sphere: SphereModel | None) -> "SceneConfig":
        return replace(self, sphere=sphere)

    def to_dict(self) -> dict:
        d = {
            "cube": {"side_mm": self.cube.side, "pose": self.cube.pose.to_dict()},
            "cam_intr": self.cam_intr.to_dict(),
            "cam_pose": self.cam_pose.to_dict(),
            "spdg_full_matrix": self.spdg_full_matrix.to_list(),
            "fringe": asdict(self.fringe),
            "width": self.width,
            "height": self.height,
            "rng_seed": self.rng_seed,
            "factors": dict(self.factors),
            "units": {"world": "mm", "image": "px", "period_T": "grating projector px"},
        }
        if self.sphere is not None:
            d["sphere"] = {"center_mm": list(self.sphere.center), "radius_mm": self.sphere.radius}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        """Parse a scene.  A document holding only ``factors`` is rebuilt from them."""
        try:
            if "cam_pose" not in d and "factors" in d:
                f = dict(d["factors"])
                seed = int(d.get("rng_seed", 0))
                return build_scene(**f, seed=seed)
            sphere = None
            if d.get("sphere"):
                sphere = SphereModel(tuple(float(x) for x in d["sphere"]["center_mm"]),
                                     float(d["sphere"]["radius_mm"]))
            return cls(
                cube=CubeModel(float(d["cube"]["side_mm"]), Pose.from_dict(d["cube"]["pose"])),
                cam_intr=CameraIntrinsics.from_dict(d["cam_intr"]),
                cam_pose=Pose.from_dict(d["cam_pose"]),
                spdg_full_matrix=ProjectionMatrix.from_list(d["spdg_full_matrix"]),
                fringe=FringeSpec(**d["fringe"]),
                width=int(d["width"]),
                height=int(d["height"]),
                rng_seed=int(d["rng_seed"]),
                factors=dict(d.get("factors", {})),
                sphere=sphere,
            )
        except KeyError as exc:
            raise ConfigError(f"scene config missing field {exc.args[0]!r}") from None
        except TypeError as exc:
            raise ConfigError(f"scene config: {exc}") from None


def _view_rotation(elevation_rad: float) -> np.ndarray:
    # rig frame: x right, y forward (away from the camera), z up
    se, ce = math.sin(elevation_rad), math.cos(elevation_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, -se, -ce], [0.0, ce, -se]])


def build_scene(
    f_mm: float,
    theta_x_deg: float,
    theta_y_deg: float,
    theta_z_deg: float,
    delta_x_cm: float,
    delta_y_cm: float,
    alpha: float,
    beta: float,
    lam: float,
    side: float = CUBE_SIDE_MM,
    width: int = IMAGE_SIZE,
    height: int = IMAGE_SIZE,
    seed: int = 0,
    marker: bool = True,
    shading: bool = True,
) -> SceneConfig:
    """Assemble a scene from the randomised factors (degrees, cm as in the factor table)."""
    if not f_mm > 0:
        raise ConfigError("f_mm must be positive")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    factors = {
        "f_mm": f_mm, "theta_x_deg": theta_x_deg, "theta_y_deg": theta_y_deg,
        "theta_z_deg": theta_z_deg, "delta_x_cm": delta_x_cm, "delta_y_cm": delta_y_cm,
        "alpha": alpha, "beta": beta, "lam": lam, "side": side, "width": width,
        "height": height, "marker": marker, "shading": shading,
    }
    r_cube = rotation_xyz(*np.radians([theta_x_deg, theta_y_deg, theta_z_deg]))
    r_view = _view_rotation(math.radians(ELEVATION_DEG))
    center = np.full(3, side / 2.0)
    shift_cam = np.array([10.0 * delta_x_cm, 10.0 * delta_y_cm, 0.0])

    cube_pose = Pose(r_cube, -r_cube @ center + r_view.T @ shift_cam)
    rig_to_cam = Pose(r_view, np.array([0.0, 0.0, WORKING_DISTANCE_MM]))
    cam_pose = rig_to_cam.compose(cube_pose)

    fu = f_mm / SENSOR_WIDTH_MM * width
    cam_intr = CameraIntrinsics(fu, fu, 0.0, (width - 1) / 2.0, (height - 1) / 2.0)

    baseline = BASELINE_RATIO * WORKING_DISTANCE_MM
    tilt = math.atan2(baseline, WORKING_DISTANCE_MM)
    c, s = math.cos(tilt), math.sin(tilt)
    r_tilt = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    spdg_center = np.array([0.0, -baseline, 0.0])
    cam_to_spdg = Pose(r_tilt, -r_tilt @ spdg_center)
    spdg_intr = CameraIntrinsics(SPDG_FOCAL_PX, SPDG_FOCAL_PX, 0.0, 0.0, 0.0)
    spdg = compose_projection(spdg_intr, cam_to_spdg.compose(cam_pose))

    fringe = FringeSpec(PERIOD_BASE / alpha, alpha, beta, lam, marker=marker, shading=shading)
    return SceneConfig(CubeModel(side, cube_pose), cam_intr, cam_pose, spdg, fringe,
                       width, height, int(seed), factors)


def default_scene(lam: float = 0.0, seed: int = 0, **overrides) -> SceneConfig:
    """Mid-range scene of the default factor table."""
    mid = TableRanges().midpoint()
    mid["lam"] = lam
    mid.update(overrides)
    return build_scene(**mid, seed=seed)


_SAMPLE_ORDER = ("f_mm", "theta_x_deg", "theta_y_deg", "theta_z_deg",
                 "delta_x_cm", "delta_y_cm", "alpha", "beta", "lam")


def sample_scene(ranges: TableRanges, seed: int, **kwargs) -> SceneConfig:
    """Draw every factor independently and uniformly from its interval."""
    rng = np.random.default_rng(seed)
    bounds = dict(ranges.items())
    values = {}
    for name in _SAMPLE_ORDER:
        lo, hi = bounds[name]
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return build_scene(**values, seed=seed, **kwargs)


@dataclass
class RenderOutput:
    """Rendered images, all ``(height, width)`` arrays.

    ``frames`` holds the phase-shifted stack (frame ``n`` shifted by
    ``2 pi n / N``); ``fringe_image`` is frame 0.
    """

    fringe_image: np.ndarray
    depth_map: np.ndarray
    mask: np.ndarray
    phase_true: np.ndarray
    frames: np.ndarray
    face_id: np.ndarray
    marker_mask: np.ndarray
    lit_mask: np.ndarray
    world_points: np.ndarray


@dataclass
class Pointmap:
    coords: np.ndarray  # (H, W, 3), world / side
    mask: np.ndarray


def _pixel_grid(width: int, height: int, rows: slice) -> tuple[np.ndarray, np.ndarray]:
    vv, uu = np.mgrid[rows, 0:width]
    return uu.astype(np.float64), vv.astype(np.float64)


def _intersect_cube(origin, dirs, side):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (0.0 - origin) * inv
        t1 = (side - origin) * inv
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = dirs == 0
    inside = (origin >= 0) & (origin <= side)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    t_near = near.max(axis=-1)
    t_far = far.min(axis=-1)
    hit = (t_far >= t_near) & (t_near > 0)
    axis = near.argmax(axis=-1)
    d_axis = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
    # entering through the low face when travelling in +axis
    face = 2 * axis + (d_axis < 0)
    return np.where(hit, t_near, np.nan), hit, np.where(hit, face, -1)


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - np.asarray(center)
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * np.einsum("...i,...i->...", dirs, oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    hit &= t > 0
    return np.where(hit, t, np.nan), hit, np.where(hit, 6, -1)


def _face_normals() -> np.ndarray:
    n = np.zeros((6, 3))
    for axis in range(3):
        n[2 * axis, axis] = -1.0
        n[2 * axis + 1, axis] = 1.0
    return n


def _trace_rows(scene: SceneConfig, rows: slice):
    u, v = _pixel_grid(scene.width, scene.height, rows)
    pose = scene.cam_pose
    origin = pose.center
    dirs = scene.cam_intr.normalized_rays(u, v) @ pose.R  # R^T applied to each ray
    if scene.sphere is None:
        depth, hit, face = _intersect_cube(origin, dirs, scene.cube.side)
    else:
        depth, hit, face = _intersect_sphere(origin, dirs, scene.sphere.center, scene.sphere.radius)
    pts = back_project(scene.cam_intr, pose, u, v, np.where(hit, depth, 0.0))
    pts[~hit] = 0.0
    return depth, hit, face, pts


def _trace(scene: SceneConfig):
    workers = min(worker_count(), 8)
    h = scene.height
    if workers <= 1 or h < 32:
        return _trace_rows(scene, slice(0, h))
    bounds = np.linspace(0, h, workers + 1).astype(int)
    tiles = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda r: _trace_rows(scene, r), tiles))
    return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(4))


def _lit_faces(scene: SceneConfig, pts, face, hit) -> np.ndarray:
    """Pixels whose surface faces the grating projector (the rest are in shadow)."""
    spdg_center = np.linalg.lstsq(scene.spdg_full_matrix.m[:, :3], -scene.spdg_full_matrix.m[:, 3],
                                  rcond=None)[0]
    if scene.sphere is None:
        normals = _face_normals()[np.clip(face, 0, 5)]
    else:
        normals = pts - np.asarray(scene.sphere.center)
    return hit & (np.einsum("...i,...i->...", normals, spdg_center - pts) > 0)


def fringe_intensity(phase, beta: float, shift: float = 0.0):
    """Peak-normalised sinusoid with valley ``beta``."""
    return (1.0 + beta) / 2.0 + (1.0 - beta) / 2.0 * np.cos(phase - shift)


def render(scene: SceneConfig, shifts: int = 1) -> RenderOutput:
    """Ray-cast the scene and synthesise ``shifts`` phase-shifted fringe images.

    Counts as one rendering event regardless of ``shifts``.
    """
    global _render_events
    if shifts < 1:
        raise ConfigError("shifts must be >= 1")
    _render_events += 1

    depth, hit, face, pts = _trace(scene)
    if not hit.any():
        raise CubeNotVisible("no camera ray hits the target")
    if scene.sphere is None:
        counts = np.bincount(face[hit], minlength=6)
        visible = int(np.sum(counts >= MIN_FACE_PIXELS))
        if visible < 2:
            raise InsufficientFaces(f"only {visible} cube face(s) visible")

    fr = scene.fringe
    spdg = scene.spdg_full_matrix
    us, vs, _ = project_many(spdg, pts)
    phase = np.where(hit, 2.0 * np.pi * vs / fr.period_T, 0.0)
    lit = _lit_faces(scene, pts, face, hit)

    if fr.shading:
        z_near = np.min(depth[hit])
        shade = np.clip((z_near / np.where(hit, depth, np.inf)) ** 2, 0.0, 1.0)
    else:
        shade = np.where(hit, 1.0, 0.0)

    marker = np.zeros_like(hit)
    if fr.marker:
        half = 0.5 * MARKER_WIDTH_FRACTION * scene.width
        # the bright bar covers the dark fringe between the peaks of orders 0 and 1
        marker = lit & (np.abs(us) <= half) & (phase >= np.pi / 2) & (phase <= 1.5 * np.pi)

    rng = np.random.default_rng(scene.rng_seed)
    shape = (shifts, scene.height, scene.width)
    noise = rng.uniform(0.0, fr.lambda_noise, size=shape) if fr.lambda_noise > 0 else np.zeros(shape)
    frames = np.empty(shape)
    for n in range(shifts):
        base = fringe_intensity(phase, fr.beta, 2.0 * np.pi * n / shifts)
        img = np.where(marker, 1.0, base) * shade
        img = np.where(lit, img, 0.0)
        img = np.clip(img + noise[n], 0.0, 1.0)
        frames[n] = np.where(hit, img, 0.0)

    return RenderOutput(
        fringe_image=frames[0],
        depth_map=np.where(hit, depth, 0.0),
        mask=hit,
        phase_true=phase,
        frames=frames,
        face_id=face,
        marker_mask=marker,
        lit_mask=lit,
        world_points=pts,
    )


def generate_pointmap(out: RenderOutput, scene: SceneConfig) -> Pointmap:
    """Back-project every hit pixel with its depth and normalise by the cube side."""
    h, w = out.mask.shape
    v, u = np.mgrid[0:h, 0:w]
    pts = back_project(scene.cam_intr, scene.cam_pose, u, v, out.depth_map)
    coords = np.where(out.mask[..., None], pts / scene.cube.side, 0.0)
    return Pointmap(coords, out.mask.copy())


def analytic_phase(scene: SceneConfig) -> np.ndarray:
    """Ground-truth absolute phase for the scene (a perfect fringe analysis)."""
    return render(scene).phase_true


def write_render(out_dir, scene: SceneConfig, out: RenderOutput, pointmap: Pointmap,
                 prefix: str = "") -> list[str]:
    """Write the standard file set; returns the file names written."""
    d = io.ensure_dir(out_dir)
    names = []

    def put(name, writer, data):
        writer(d / (prefix + name), data)
        names.append(prefix + name)

    if out.frames.shape[0] == 1:
        put("fringe.pfm", io.write_pfm, out.fringe_image)
    else:
        for n, frame in enumerate(out.frames):
            put(f"fringe_{n:02d}.pfm", io.write_pfm, frame)
    put("depth.pfm", io.write_pfm, out.depth_map)
    put("phase.pfm", io.write_pfm, out.phase_true)
    put("pointmap.pfm", io.write_pfm, pointmap.coords)
    put("mask.pgm", io.write_pgm_mask, out.mask)
    put("scene.json", io.write_json, scene.to_dict())
    return names


def generate_dataset(ranges: TableRanges, count: int, seed: int, out_dir,
                     max_resamples: int = 1000) -> dict:
    """Render ``count`` random scenes into ``out_dir``.

    Scenes with fewer than two visible faces are redrawn; the number of
    redraws is recorded in the manifest.
    """
    if count < 0:
        raise ConfigError("count must be >= 0")
    manifest = {"count": count, "seed": seed, "ranges": ranges.to_dict(), "resamples": 0,
                "samples": []}
    if count == 0:
        return manifest
    out_dir = Path(out_dir)
    master = np.random.default_rng(seed)
    resamples = 0
    for i in range(count):
        while True:
            scene_seed = int(master.integers(0, 2**31 - 1))
            scene = sample_scene(ranges, scene_seed)
            try:
                out = render(scene)
                break
            except (InsufficientFaces, CubeNotVisible):
                resamples += 1
                if resamples > max_resamples:
                    raise RenderError(f"gave up after {resamples} resamples") from None
        pm = generate_pointmap(out, scene)
        try:
            files = write_render(out_dir, scene, out, pm, prefix=f"{i:05d}_")
        except OSError as exc:
            raise OSError(f"{exc.filename or out_dir}: {exc.strerror}") from exc
        manifest["samples"].append({"index": i, "scene_seed": scene_seed, "files": files})
    manifest["resamples"] = resamples
    io.write_json(out_dir / "manifest.json", manifest)
    return manifest
