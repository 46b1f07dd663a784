import json

import numpy as np
import pytest

from conftest import random_rig
from spicalib import calibration, default_scene, render
from spicalib.calibration import (
    CalibrationResult,
    CorrespondenceSet,
    SpdgCorrespondenceSet,
    calibrate,
    calibrate_scene,
    filter_pointmap,
    match_vs,
    solve_mp,
    solve_ms,
)
from spicalib.errors import (
    DegenerateConfiguration,
    RankDeficient,
    SinglePlaneOnly,
    TooFewPoints,
)
from spicalib.geometry import (
    ProjectionMatrix,
    ReducedSpdgVector,
    compose_projection,
    project_many,
    reduce_spdg,
    relative_error_up_to_scale,
)
from spicalib.twin import Pointmap, generate_pointmap


def exact_pairs(mp, n, rng, spread=25.0):
    world = rng.uniform(-spread, spread, size=(n, 3))
    u, v, _ = project_many(mp, world)
    return CorrespondenceSet(world, np.column_stack([u, v]))


def exact_vs(ms_full, n, rng, spread=25.0):
    world = rng.uniform(-spread, spread, size=(n, 3))
    _, vs, _ = project_many(ms_full, world)
    return SpdgCorrespondenceSet(world, vs)


@pytest.fixture(scope="module")
def pointmap(scene):
    return generate_pointmap(render(scene), scene)


# --- filter_pointmap ------------------------------------------------------

def test_filter_keeps_exact_pointmap(scene, pointmap):
    corrs = filter_pointmap(pointmap, scene.cube)
    assert len(corrs) == int(pointmap.mask.sum())
    assert len(corrs) > 2000


def test_filter_rejects_perturbed_entry(scene, pointmap):
    coords = pointmap.coords.copy()
    r, c = np.argwhere(pointmap.mask)[len(np.argwhere(pointmap.mask)) // 2]
    world = coords[r, c] * scene.cube.side
    # push the point 0.02 mm along the normal of its face
    axis = int(np.argmin(np.minimum(np.abs(world), np.abs(world - scene.cube.side))))
    world[axis] += 0.02 if world[axis] > scene.cube.side / 2 else -0.02
    coords[r, c] = world / scene.cube.side
    corrs = filter_pointmap(Pointmap(coords, pointmap.mask), scene.cube)
    assert len(corrs) == int(pointmap.mask.sum()) - 1
    assert not np.any(np.all(corrs.pixels == [c, r], axis=1))


def test_filter_single_face(scene, pointmap):
    out = render(scene)
    face = np.bincount(out.face_id[out.mask]).argmax()
    mask = pointmap.mask & (out.face_id == face)
    with pytest.raises(SinglePlaneOnly):
        filter_pointmap(Pointmap(pointmap.coords, mask), scene.cube)


def test_filter_too_few(scene, pointmap):
    mask = np.zeros_like(pointmap.mask)
    idx = np.argwhere(pointmap.mask)[:5]
    mask[idx[:, 0], idx[:, 1]] = True
    with pytest.raises(TooFewPoints):
        filter_pointmap(Pointmap(pointmap.coords, mask), scene.cube)


def test_filter_monotone_in_tolerance(scene):
    pm = generate_pointmap(render(scene), scene)
    rng = np.random.default_rng(0)
    noisy = pm.coords + rng.normal(0, 0.01 / scene.cube.side, pm.coords.shape)
    noisy = Pointmap(noisy, pm.mask)
    counts = [len(filter_pointmap(noisy, scene.cube, tol)) for tol in (0.05, 0.02, 0.01, 0.005, 0.002)]
    assert counts == sorted(counts, reverse=True)
    prev = None
    for tol in (0.05, 0.01, 0.002):
        px = {tuple(p) for p in filter_pointmap(noisy, scene.cube, tol).pixels}
        if prev is not None:
            assert px <= prev
        prev = px


# --- solve_mp -------------------------------------------------------------

def test_solve_mp_exact():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mp, _ = random_rig(rng)
        est = solve_mp(exact_pairs(mp, 200, rng))
        assert relative_error_up_to_scale(est.m, mp.m) < 1e-9


def test_solve_mp_minimal_six():
    rng = np.random.default_rng(2)
    mp, _ = random_rig(rng)
    est = solve_mp(exact_pairs(mp, 6, rng))
    assert relative_error_up_to_scale(est.m, mp.m) < 1e-9


def test_solve_mp_coplanar():
    rng = np.random.default_rng(3)
    mp, _ = random_rig(rng)
    world = rng.uniform(-25, 25, size=(100, 3))
    world[:, 2] = 0.0
    u, v, _ = project_many(mp, world)
    with pytest.raises(DegenerateConfiguration):
        solve_mp(CorrespondenceSet(world, np.column_stack([u, v])))


def test_solve_mp_too_few():
    rng = np.random.default_rng(4)
    mp, _ = random_rig(rng)
    with pytest.raises(TooFewPoints):
        solve_mp(exact_pairs(mp, 5, rng))


def test_solve_mp_conditioning_invariant():
    rng = np.random.default_rng(5)
    mp, _ = random_rig(rng)
    corrs = exact_pairs(mp, 100, rng)
    base = solve_mp(corrs)
    # similarity on the pixels, undone on the solved matrix
    a = rng.uniform(0.1, 10)
    th = rng.uniform(0, 2 * np.pi)
    S = np.array([[a * np.cos(th), -a * np.sin(th), rng.uniform(-500, 500)],
                  [a * np.sin(th), a * np.cos(th), rng.uniform(-500, 500)],
                  [0, 0, 1]])
    px = np.column_stack([corrs.pixels, np.ones(len(corrs))]) @ S.T
    moved = solve_mp(CorrespondenceSet(corrs.world, px[:, :2]))
    assert relative_error_up_to_scale(np.linalg.solve(S, moved.m), base.m) < 1e-9


# --- solve_ms -------------------------------------------------------------

def test_solve_ms_exact():
    rng = np.random.default_rng(6)
    for _ in range(20):
        _, ms_full = random_rig(rng)
        corrs = exact_vs(ms_full, 200, rng)
        est = solve_ms(corrs)
        truth = reduce_spdg(ms_full)
        assert np.linalg.norm(est.v - truth.v) / np.linalg.norm(truth.v) < 1e-9
        resid = calibration.spdg_residual(est, corrs.world, corrs.vs)
        assert np.max(np.abs(resid)) < 1e-9


def test_solve_ms_minimal_seven():
    rng = np.random.default_rng(7)
    _, ms_full = random_rig(rng)
    corrs = exact_vs(ms_full, 7, rng)
    est = solve_ms(corrs)
    assert np.max(np.abs(calibration.spdg_residual(est, corrs.world, corrs.vs))) < 1e-10


def test_solve_ms_line_rank_deficient():
    rng = np.random.default_rng(8)
    _, ms_full = random_rig(rng)
    t = rng.uniform(-20, 20, 30)
    world = np.array([1.0, 2.0, 3.0]) + t[:, None] * np.array([0.3, -0.5, 0.8])
    _, vs, _ = project_many(ms_full, world)
    with pytest.raises(RankDeficient):
        solve_ms(SpdgCorrespondenceSet(world, vs))


def test_solve_ms_too_few():
    rng = np.random.default_rng(9)
    _, ms_full = random_rig(rng)
    with pytest.raises(RankDeficient):
        solve_ms(exact_vs(ms_full, 6, rng))


# --- match_vs -------------------------------------------------------------

def test_match_vs_examples():
    corrs = CorrespondenceSet(np.array([[1.0, 2.0, 3.0]]), np.array([[4, 2]]))
    phase = np.zeros((5, 6))
    phase[2, 4] = 2 * np.pi
    out = match_vs(corrs, phase, 16.0)
    assert out.vs[0] == pytest.approx(16.0, abs=1e-12)
    assert out.missing == []


def test_match_vs_all_masked():
    world = np.arange(12, dtype=float).reshape(4, 3)
    pix = np.array([[0, 0], [1, 0], [2, 1], [3, 2]])
    corrs = CorrespondenceSet(world, pix)
    out = match_vs(corrs, np.ones((3, 4)), 16.0, np.zeros((3, 4), dtype=bool))
    assert len(out) == 0
    assert sorted(out.missing) == sorted(map(tuple, pix.tolist()))


def test_match_vs_against_forward_model(scene, render_out, pointmap):
    corrs = filter_pointmap(pointmap, scene.cube)
    out = match_vs(corrs, render_out.phase_true, scene.fringe.period_T, render_out.mask)
    _, vs, _ = project_many(scene.spdg_full_matrix, out.world)
    assert np.max(np.abs(out.vs - vs)) < 1e-3 * scene.fringe.period_T / (2 * np.pi)


# --- calibrate ------------------------------------------------------------

def test_calibrate_noiseless(scene, calib):
    assert calib.reprojection_rmse_px < 0.01
    assert calib.spdg_residual_rms < 1e-6
    assert calib.num_points > 2000
    truth_mp = compose_projection(scene.cam_intr, scene.cam_pose)
    assert relative_error_up_to_scale(calib.mp.m, truth_mp.m) < 1e-9
    truth_ms = reduce_spdg(scene.spdg_full_matrix)
    assert np.linalg.norm(calib.ms.v - truth_ms.v) / np.linalg.norm(truth_ms.v) < 1e-9


def test_calibrate_from_phase_shifting(scene):
    res = calibrate_scene(scene, phase_source="shift")
    assert res.frames_used == 4
    assert res.reprojection_rmse_px < 0.01
    assert res.spdg_residual_rms < 1e-6


def test_calibrate_noisy_succeeds():
    res = calibrate_scene(default_scene(0.3, 0), phase_source="shift")
    assert res.num_points > 2000
    assert res.reprojection_rmse_px < 0.01  # the pointmap itself is exact
    assert np.isfinite(res.spdg_residual_rms)


def test_calibrate_deterministic(scene):
    a = calibrate_scene(scene)
    b = calibrate_scene(scene)
    assert a.to_dict() == b.to_dict()
    assert a.mp == b.mp and a.ms == b.ms


def test_calibrate_unknown_source(scene):
    from spicalib.errors import ConfigError

    with pytest.raises(ConfigError):
        calibrate_scene(scene, phase_source="network")


# --- serialisation --------------------------------------------------------

REAL_MP = [[-0.645, 0.260, 0.001, -0.040],
           [-0.057, -0.070, 0.674, -0.026],
           [-0.128, -0.177, 0.003, -0.069]]
REAL_MS = [0.74, 0.48, -0.23, 0.25, -35.43, -27.03, -145.04]


def test_real_system_values_round_trip():
    res = CalibrationResult(ProjectionMatrix(np.array(REAL_MP)), ReducedSpdgVector(np.array(REAL_MS)),
                            0.0, 0.0, 2000, 50.6, 6.0)
    text = json.dumps(res.to_dict())
    back = CalibrationResult.from_dict(json.loads(text))
    assert back.mp.m.tolist() == REAL_MP
    assert back.ms.v.tolist() == REAL_MS
    assert back.to_dict() == res.to_dict()


def test_json_layout(calib):
    d = calib.to_dict()
    assert {"Mp", "ms", "reprojection_rmse_px", "spdg_residual_rms", "num_points",
            "cube_side_mm", "period_T"} <= set(d)
    assert len(d["Mp"]) == 12 and len(d["ms"]) == 7
    back = CalibrationResult.from_dict(json.loads(json.dumps(d)))
    assert back.mp == calib.mp and back.ms == calib.ms


def test_from_dict_missing_field(calib):
    from spicalib.errors import ConfigError

    d = calib.to_dict()
    del d["ms"]
    with pytest.raises(ConfigError):
        CalibrationResult.from_dict(d)


# --- subsampling ----------------------------------------------------------

def test_large_sets_subsampled_without_accuracy_loss():
    rng = np.random.default_rng(10)
    mp, ms_full = random_rig(rng)
    n = calibration.SUBSAMPLE_TRIGGER + 1000
    corrs = exact_pairs(mp, n, rng)
    assert relative_error_up_to_scale(solve_mp(corrs).m, mp.m) < 1e-9
    scorrs = exact_vs(ms_full, n, rng)
    truth = reduce_spdg(ms_full).v
    assert np.linalg.norm(solve_ms(scorrs).v - truth) / np.linalg.norm(truth) < 1e-9
    idx = calibration._subsample(n)
    assert len(idx) == calibration.SUBSAMPLE_SIZE
    assert np.array_equal(idx, calibration._subsample(n))
    assert calibration._subsample(calibration.SUBSAMPLE_TRIGGER) is None


def test_calibrate_with_pointmap_directly(scene, render_out, pointmap):
    res = calibrate(pointmap, render_out.phase_true, scene.cube.side, scene.fringe.period_T,
                    render_out.mask & render_out.lit_mask)
    assert res.reprojection_rmse_px < 0.01
