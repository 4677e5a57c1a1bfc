"""End-to-end acceptance checks, one test per criterion; each records a PASS/FAIL line."""

import time

import numpy as np
import pytest

from raylet_field.cli import EXIT_OK, main
from raylet_field.field import BLEND_MODES, TrainConfig, blend_distance, evaluate_rays, prepare_rays, train
from raylet_field.fusion import TsdfVolume, extract_mesh, fuse
from raylet_field.metrics import mesh_metrics, point_metrics, ray_metrics, sample_surface, scale_align
from raylet_field.render import angular_error_deg, render_distance, render_normals
from raylet_field.sampling import SceneModel, build_tile_index, ray_gaussian_t
from raylet_field.scene import Camera, GaussianSet, PointCloud, Ray
from raylet_field.synth import (
    OracleField, box_scene, make_gaussians, orbit_cameras, plane_scene, render_oracle_views, sample_points,
    sphere_in_box, sphere_scene,
)

import fuzzing
from gradcheck import check_gradients, tiny_problem
from test_metrics import square
from test_sampling import dense_argmax

T_VALUES = (1, 5, 10, 20)


def exhaustive_scan(origin, direction, centers, radii, T):
    """Vectorized O(N) scan of one ray, written independently of the library kernels."""
    t = (centers - origin) @ direction
    off = centers - (origin + t[:, None] * direction)
    perp = np.sqrt(np.einsum("ij,ij->i", off, off))
    hit = np.flatnonzero((t > 0) & (perp <= radii))
    order = np.lexsort((hit, t[hit], perp[hit]))
    return hit[order][:T]


def test_criterion_01_tile_route_matches_exhaustive_scan(report):
    rng = np.random.default_rng(2024)
    W, H = 160, 120
    mismatches = independent_mismatches = 0
    tile_seconds = 0.0
    for s in range(20):
        pts = rng.uniform(-2, 2, (10_000, 3))
        scene = SceneModel.from_point_cloud(PointCloud(pts))
        cam = Camera.look_at(rng.uniform(-4, 4, 3), rng.uniform(-1, 1, 3), 0.8 * W, 0.8 * W, W, H)
        uv = np.stack([rng.uniform(0, W, 1000), rng.uniform(0, H, 1000)], axis=1)
        d = cam.directions(uv)
        o = np.broadcast_to(cam.center, d.shape)
        t0 = time.perf_counter()
        tiles = build_tile_index(cam, scene, 16)
        got = {T: tiles.candidates(uv, T, d) for T in T_VALUES}
        tile_seconds += time.perf_counter() - t0
        ref = scene.candidates_multi(o, d, T_VALUES)
        for T in T_VALUES:
            if not (np.array_equal(got[T].index, ref[T].index) and np.array_equal(got[T].key, ref[T].key)):
                mismatches += 1
        # an independent per-ray scan on a subset of rays
        deep = got[20]
        for r in rng.choice(1000, 50, replace=False):
            expect = exhaustive_scan(cam.center, d[r], scene.balls.centers, scene.balls.radii, 20)
            if not np.array_equal(deep.index[r, : deep.count[r]], expect):
                independent_mismatches += 1
    ok = mismatches == 0 and independent_mismatches == 0 and tile_seconds < 60
    report(1, ok, f"20 scenes x 1000 rays x T{T_VALUES}: {mismatches} set mismatches, "
                  f"{independent_mismatches}/1000 scan mismatches, tile route {tile_seconds:.1f}s (<60s)")
    assert ok


def test_criterion_02_gaussian_peak_matches_dense_argmax(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    failures = 0
    for _ in range(1000):
        mean = rng.uniform(-2, 2, 3)
        gs = GaussianSet(mean[None], rng.uniform(0.05, 1.0, (1, 3)), rng.normal(size=(1, 4)), [0.8])
        d = rng.normal(size=3)
        ray = Ray(rng.uniform(-4, 4, 3), d / np.linalg.norm(d))
        err = abs(ray_gaussian_t(ray, gs[0]) - dense_argmax(ray, gs[0]))
        worst = max(worst, err)
        failures += err > 1e-3
    ok = failures == 0
    report(2, ok, f"1000 ray-Gaussian pairs: {failures} failures, worst |dt| = {worst:.2e} (<1e-3)")
    assert ok


def test_criterion_03_gradients_match_finite_differences(report):
    # "2 hidden layers" is checked both as two ReLU layers and as two hidden->hidden blocks
    total = 0
    failures = []
    for layers in (1, 2):
        for mode in BLEND_MODES:
            model, batch = tiny_problem(mode, hidden=8, layers=layers, K=2, C=4)
            n, bad = check_gradients(model, batch, h=1e-5, rel_tol=1e-4, abs_tol=1e-8)
            total += n
            failures += [(layers, mode, *b) for b in bad]
    ok = not failures
    report(3, ok, f"{total} parameters over {len(BLEND_MODES)} blend modes and 2 depths: {len(failures)} mismatches")
    assert ok, failures[:5]


def test_criterion_04_blend_contract(report):
    rng = np.random.default_rng(11)
    R, T = 10_000, 20
    values = rng.uniform(0.05, 10, (R, T))
    # scores on a 2^-16 grid so that integer shifts are exact additions
    scores = np.round(rng.normal(size=(R, T)) * 6 * 2**16) / 2**16
    t = rng.uniform(0.05, 10, (R, T))
    n = rng.integers(1, T + 1, R)
    mask = np.arange(T)[None] < n[:, None]
    lo = np.where(mask, values, np.inf).min(axis=1)
    hi = np.where(mask, values, -np.inf).max(axis=1)
    bounds_ok = True
    for mode in BLEND_MODES:
        D, _ = blend_distance(values, scores, mask, mode, t)
        bounds_ok &= bool(np.all((D >= lo) & (D <= hi)))
    D, _ = blend_distance(values, scores, mask, "softmax")
    perm = np.argsort(rng.uniform(size=(R, T)), axis=1)
    take = lambda a: np.take_along_axis(a, perm, axis=1)  # noqa: E731
    Dp, _ = blend_distance(take(values), take(scores), take(mask), "softmax")
    shift = rng.integers(-1000, 1000, (R, 1)).astype(float)
    Ds, _ = blend_distance(values, scores + shift, mask, "softmax")
    single = np.ones((R, 1), bool)
    direct = all(np.array_equal(blend_distance(values[:, :1], scores[:, :1], single, m, t[:, :1])[0], values[:, 0])
                 for m in BLEND_MODES)
    perm_ok, shift_ok = np.array_equal(D, Dp), np.array_equal(D, Ds)
    ok = bounds_ok and perm_ok and shift_ok and direct
    report(4, ok, f"10000 candidate sets: within [min,max]={bounds_ok}, permutation bitwise={perm_ok}, "
                  f"shift bitwise={shift_ok}, T=1 direct={direct}")
    assert ok


CLOSURE_SCENES = {
    "plane": (plane_scene, dict(radius=1.5, target=(0, 0, 2), elevation=(-80, -80))),
    "sphere": (sphere_scene, dict(radius=3.0)),
    "box": (box_scene, dict(radius=0.8)),
}


def test_criterion_05_oracle_closure(report):
    worst = 0.0
    pixels = 0
    for name, (make, cam_kw) in CLOSURE_SCENES.items():
        sc = make()
        cams = orbit_cameras(sc, 2, resolution=(160, 120), seed=1, **cam_kw)
        truth = render_oracle_views(sc, cams)
        for encoding in ("points", "gaussians"):
            if encoding == "points":
                scene = SceneModel.from_point_cloud(sample_points(sc, 10_000, 0))
            else:
                scene = SceneModel.from_gaussians(make_gaussians(sc, 10_000, 0))
            for cam, gt in zip(cams, truth):
                dm = render_distance(scene, OracleField(sc), cam, 5)
                both = dm.valid & gt.valid
                pixels += int(both.sum())
                worst = max(worst, float(np.abs(dm.values[both] - gt.values[both]).max()))
    ok = worst <= 1e-6
    report(5, ok, f"plane/sphere/box x points/gaussians, {pixels} pixels: max |D - D_exact| = {worst:.2e} (<=1e-6)")
    assert ok


@pytest.fixture(scope="module")
def desk_model():
    sc = sphere_in_box()
    scene = SceneModel.from_point_cloud(sample_points(sc, 10_000, 0))
    train_cams = orbit_cameras(sc, 30, 1.0, (160, 120), seed=0)
    rays = prepare_rays(scene, list(zip(train_cams, render_oracle_views(sc, train_cams))), 5, 5)
    cfg = TrainConfig(K=5, T_train=5, T_test=5, max_steps=800, epochs=100, batch_rays=512, seed=0)
    t0 = time.perf_counter()
    result = train(scene, None, cfg, rays=rays)
    seconds = time.perf_counter() - t0

    def held_out(seed):
        cams = orbit_cameras(sc, 5, 1.0, (160, 120), seed=seed, azimuth0=17)
        return prepare_rays(scene, list(zip(cams, render_oracle_views(sc, cams))), 5, 5)

    return result.model, seconds, held_out


def nearest_foot_baseline(rays):
    return np.where(rays.mask, rays.cand_t, np.inf).min(axis=1)


def test_criterion_06_desk_scale_learning(desk_model, report):
    model, seconds, held_out = desk_model
    rays = held_out(100)
    ade = float(np.mean(np.abs(evaluate_rays(model, rays, 5) - rays.gt)))
    base = float(np.mean(np.abs(nearest_foot_baseline(rays) - rays.gt)))
    ok = ade < base and ade < 0.5 * base and seconds <= 600
    report(6, ok, f"held-out ADE {ade:.4f} vs nearest-foot baseline {base:.4f} "
                  f"(ratio {ade / base:.2f}, need <0.5); trained in {seconds:.0f}s (<=600s)")
    assert ok


def test_criterion_07_more_raylets_help(desk_model, report):
    model, _, held_out = desk_model
    wins = []
    for seed in range(100, 105):
        rays = held_out(seed)
        a1 = np.mean(np.abs(evaluate_rays(model, rays, 1) - rays.gt))
        a5 = np.mean(np.abs(evaluate_rays(model, rays, 5) - rays.gt))
        wins.append((a5 <= a1, a1, a5))
    n_ok = sum(w for w, _, _ in wins)
    ok = n_ok >= 3
    detail = ", ".join(f"{a1:.3f}->{a5:.3f}" for _, a1, a5 in wins)
    report(7, ok, f"ADE(T=1)->ADE(T=5) on 5 held-out seeds: {detail}; {n_ok}/5 satisfy (majority needed)")
    assert ok


def test_criterion_08_normals(report):
    sc = plane_scene()
    scene = SceneModel.from_point_cloud(sample_points(sc, 10_000, 0))
    cam = Camera.look_at((0.3, 0.2, 0), (0.3, 0.2, 2), 100, 100, 160, 120, up=(0, 1, 0))
    nm = render_normals(scene, OracleField(sc), cam, 5)
    dm = render_distance(scene, OracleField(sc), cam, 5)
    plane_err = angular_error_deg(nm.normals[nm.valid], np.array([0.0, 0.0, -1.0]))
    plane_frac = float(np.mean(plane_err < 0.1))

    sc = sphere_scene()
    scene = SceneModel.from_point_cloud(sample_points(sc, 10_000, 0))
    cam = orbit_cameras(sc, 1, 3.0, (160, 120), seed=1)[0]
    nm_s = render_normals(scene, OracleField(sc), cam, 5)
    gt = render_oracle_views(sc, [cam])[0]
    o, d = cam.pixel_rays()
    true = sc.normal_at(o + gt.values.reshape(-1, 1) * d)
    true = np.where((np.sum(true * d, axis=1) > 0)[:, None], -true, true).reshape(nm_s.normals.shape)
    use = nm_s.valid & gt.valid
    sphere_med = float(np.median(angular_error_deg(nm_s.normals[use], true[use])))
    ok = plane_frac >= 0.99 and sphere_med < 1.0
    report(8, ok, f"plane: {plane_frac:.4f} of {int(nm.valid.sum())} normal-valid pixels within 0.1deg "
                  f"(stable on {nm.valid.sum() / dm.valid.sum():.3f} of rendered pixels); "
                  f"sphere median {sphere_med:.2e}deg (<1)")
    assert ok


def test_criterion_09_metric_golden_cases(report):
    checks = {}
    m = ray_metrics([1.0, 2.0], [1.0, 3.0])
    checks["ade-0.5"] = (m.ade, m.rmse, m.abs_rel, m.sq_rel, m.delta) == (0.5, np.sqrt(0.5), 1 / 6, 1 / 6, 0.5)
    checks["delta-edge"] = ray_metrics([1.0], [1.3]).delta == 0.0 and ray_metrics([1.1], [1.3]).delta == 1.0
    mm = mesh_metrics(square(0.03), square(0.0), n_samples=5000, threshold=0.05)
    tight = mesh_metrics(square(0.03), square(0.0), n_samples=5000, threshold=0.01)
    checks["parallel-squares"] = (
        abs(mm.chamfer_l1 - 0.03) < 1e-12 and (mm.precision, mm.recall, mm.f1) == (1.0, 1.0, 1.0)
        and (tight.precision, tight.recall, tight.f1) == (0.0, 0.0, 0.0)
    )
    self_m = mesh_metrics(square(0.0), square(0.0), n_samples=5000)
    checks["self-f1"] = self_m.f1 == 1.0 and self_m.chamfer_l1 == 0.0
    rng = np.random.default_rng(3)
    gt = rng.uniform(0.5, 5, 1001)
    worst = max(float(np.abs(scale_align(a * gt + b, gt) - gt).max())
                for a, b in rng.uniform([0.1, -3], [10, 3], (20, 2)))
    checks["scale-align"] = worst < 1e-12
    ok = all(checks.values())
    report(9, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()) + f" (align err {worst:.1e})")
    assert ok


def test_criterion_10_tsdf_sphere(report):
    sc = sphere_scene(1.0)
    cams = orbit_cameras(sc, 40, 3.0, (160, 120), seed=0, elevation=(-60, 60))
    vol = fuse(render_oracle_views(sc, cams), cams, TsdfVolume.from_bounds((-1.2,) * 3, (1.2,) * 3, 0.02))
    mesh = extract_mesh(vol)
    pts, nrm = sample_surface(mesh.vertices, mesh.triangles, 100_000, 0, mesh.normals)
    gt = sample_points(sc, 100_000, 1).positions
    m = point_metrics(pts, nrm, gt, gt, threshold=0.04)
    ok = m.chamfer_l1 < 0.04
    report(10, ok, f"40 views, voxel 0.02, {len(mesh)} triangles: chamfer-L1 {m.chamfer_l1:.4f} (<0.04), "
                   f"F1@0.04 {m.f1:.3f}, normal consistency {m.normal_consistency:.3f}")
    assert ok


def test_criterion_11_reproducibility_and_fuzzing(tmp_path, report, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--scene", "sphere_in_box", "--points", "3000", "--train-views", "4", "--test-views", "1",
                 "--width", "48", "--height", "36", "--out", str(data)]) == EXIT_OK
    args = ["--data", str(data), "--seed", "7", "--steps", "30", "--batch-rays", "128", "--hidden", "32", "--layers", "2"]
    assert main(["train", *args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["train", *args, "--out", str(tmp_path / "b")]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "run_config.json")
    identical = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    crashes = fuzzing.fuzz(1000, seed=7)
    ok = identical and not crashes
    report(11, ok, f"train --seed 7 twice: {names} identical={identical}; 1000 fuzz cases, {len(crashes)} non-ParseError failures")
    assert ok, crashes[:5]
