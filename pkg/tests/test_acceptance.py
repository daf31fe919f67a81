"""Acceptance suite: one test per shipped criterion, each printing a
pass/fail line. Frozen thresholds come from 20-seed calibration runs noted
next to each constant."""

from collections import defaultdict

import numpy as np

from conftest import matrix_exp_series, twist_matrix, fd_vector, random_pose
from pointline.ba import BaConfig, assemble_problem, hessian_spectrum, optimize
from pointline.errors import TriangulationDegeneracyError
from pointline.geometry import (
    CameraIntrinsics,
    Se3Pose,
    backproject,
    hat3,
    project,
    se3_exp,
    se3_generator,
    se3_log,
    so3_left_jacobian,
)
from pointline.harness import (
    HarnessConfig,
    evaluate_solution,
    generate_scene,
    run_drift_experiment,
    run_jacobian_check,
    run_matching_experiment,
    run_voma_pipeline,
)
from pointline.harness.experiments import ba_config, lm_schedule
from pointline.harness.scene import orbit_pose
from pointline.lines import (
    BackprojectedSegment,
    EndpointPairing,
    LineLandmark,
    LineObservation,
    associate_endpoints,
    backprojected_point_covariance,
    backprojection_distance_covariance,
    distance_2d,
    distance_3d,
    homogeneous_line,
    line_params_from_endpoints,
    triangulate_line_depth,
    triangulate_rectified,
)
from pointline.noise import DepthNoiseModel, PyramidNoiseTable, sigma_z
from pointline.point_errors import PointLandmark, PointObservation, rgbd_point_residual
from pointline.sparse_map import SparseMap, build_tile_index, match_descriptor
from pointline.voma import OctreeMap, PointCloud, VolumetricMapper, integrate_cloud, maps_equal

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, baseline=0.08)

# Criterion 6 floor: median aligned pose translation RMSE over the 20-seed
# calibration run of the same configuration (observed per-seed range
# 0.00123..0.00287 m, median 0.00173 m).
POSE_RMSE_FLOOR = 0.00173

# Criterion 7 factor: the calibration run gave a median-error ratio of ~249
# (per-seed minimum 138); frozen at 50 with margin.
DRIFT_FACTOR = 50.0

DRIFT_CONFIG = dict(
    keyframes=16, points=120, lines=40, extent=3.0, mono_fraction_lines=0.0,
    min_line_views=4, max_iters=30,
)


def _report(number: int, name: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number} ({name}): {detail}")
    assert ok, f"criterion {number} ({name}): {detail}"


def test_criterion_1_jacobian_suite():
    rows = run_jacobian_check(trials=1000, seed=0)
    worst = max(r["max_rel_err"] for r in rows)
    failures = sum(r["failures"] for r in rows)
    detail = f"{len(rows)} families x 1000 configs, worst rel err {worst:.2e}, {failures} failures"
    _report(1, "jacobian suite", failures == 0 and worst < 1e-5, detail)


def test_criterion_2_lie_group_suite():
    rng = np.random.default_rng(1)
    worst_exp = worst_round = worst_j = 0.0
    for _ in range(200):
        xi = rng.normal(size=6) * rng.uniform(0.1, 1.5)
        worst_exp = max(
            worst_exp,
            np.abs(se3_exp(xi).matrix() - matrix_exp_series(twist_matrix(xi))).max(),
        )
        phi = xi[:3]
        if np.linalg.norm(phi) < np.pi - 1e-3:
            back = se3_log(se3_exp(xi)).as_vector()
            worst_round = max(worst_round, np.abs(back - xi).max())
        k = hat3(phi)
        series_j = np.eye(3)
        acc = np.eye(3)
        for n in range(1, 30):
            acc = acc @ k / (n + 1)
            series_j = series_j + acc
        worst_j = max(worst_j, np.abs(so3_left_jacobian(phi) - series_j).max())
    worst_gen = 0.0
    eps = 1e-6
    for j in range(1, 7):
        e = np.zeros(6)
        e[j - 1] = eps
        fd = (se3_exp(e).matrix() - np.eye(4)) / eps
        worst_gen = max(worst_gen, np.abs(fd - se3_generator(j)).max())
    ok = worst_exp < 1e-10 and worst_round < 1e-8 and worst_gen < 1e-5 and worst_j < 1e-10
    detail = (
        f"exp vs series {worst_exp:.2e}, roundtrip {worst_round:.2e}, "
        f"generators {worst_gen:.2e}, closed-form J {worst_j:.2e}"
    )
    _report(2, "Lie-group suite", ok, detail)


def test_criterion_3_triangulation():
    rng = np.random.default_rng(2)
    k1 = CameraIntrinsics(500.0, 510.0, 320.0, 240.0)
    k2 = CameraIntrinsics(480.0, 470.0, 310.0, 250.0)
    worst_depth = 0.0
    false_flags = 0
    recovered = 0
    while recovered < 500:
        pose1, pose2 = random_pose(rng), random_pose(rng)
        p_w = rng.uniform(-1, 1, 3) + np.array([0, 0, 4.0])
        q_w = rng.uniform(-1, 1, 3) + np.array([0, 0, 4.0])
        cams = [(pose1, k1), (pose2, k2)]
        if any(pose.transform(x)[2] < 0.5 for pose, _ in cams for x in (p_w, q_w)):
            continue
        p2 = project(k2, pose2.transform(p_w))
        q2 = project(k2, pose2.transform(q_w))
        if np.linalg.norm(p2 - q2) < 10:
            continue
        l2 = homogeneous_line(p2, q2)
        # keep clearly away from the detector threshold: general position
        r21 = pose2.rotation @ pose1.rotation.T
        h21 = k2.matrix() @ r21 @ np.linalg.inv(k1.matrix())
        x_p = np.append(project(k1, pose1.transform(p_w)), 1.0)
        x_q = np.append(project(k1, pose1.transform(q_w)), 1.0)
        l2n = l2 / np.linalg.norm(l2[:2])
        if min(abs(l2n @ (h21 @ x_p)), abs(l2n @ (h21 @ x_q))) < 1e-3:
            continue
        try:
            for x, truth in ((x_p, pose1.transform(p_w)[2]), (x_q, pose1.transform(q_w)[2])):
                depth = triangulate_line_depth(pose1, pose2, k1, k2, l2, x)
                assert depth > 0
                worst_depth = max(worst_depth, abs(depth - truth) / abs(truth))
        except TriangulationDegeneracyError:
            false_flags += 1
        recovered += 1

    # rectified vs general
    worst_rect = 0.0
    b = 0.12
    pose1 = Se3Pose.identity()
    pose2 = Se3Pose(np.eye(3), np.array([-b, 0.0, 0.0]))
    count = 0
    while count < 200:
        p_w = rng.uniform(-1, 1, 3) + np.array([0, 0, 3.0])
        q_w = rng.uniform(-1, 1, 3) + np.array([0, 0, 3.0])
        p2 = project(k1, pose2.transform(p_w))
        q2 = project(k1, pose2.transform(q_w))
        if np.linalg.norm(p2 - q2) < 10:
            continue
        l2 = homogeneous_line(p2, q2)
        x = np.append(project(k1, pose1.transform(p_w)), 1.0)
        try:
            general = triangulate_line_depth(pose1, pose2, k1, k1, l2, x)
            depth, disparity = triangulate_rectified(b, k1.fx, l2, x)
        except TriangulationDegeneracyError:
            continue
        worst_rect = max(worst_rect, abs(general - depth) / max(abs(general), 1e-12))
        count += 1

    # constructed degeneracies: 50 infinite-solutions + 50 no-solution
    missed = 0
    wrong_subcase = 0
    built_inf = built_nosol = 0
    while built_inf < 50 or built_nosol < 50:
        pose1, pose2 = random_pose(rng), random_pose(rng)
        r21 = pose2.rotation @ pose1.rotation.T
        t21 = pose2.translation - r21 @ pose1.translation
        if np.linalg.norm(t21) < 0.05:
            continue
        k2m = k2.matrix()
        epipole = k2m @ t21
        h21 = k2m @ r21 @ np.linalg.inv(k1.matrix())
        x = np.append(rng.uniform(100, 500, 2), 1.0)
        if built_inf < 50:
            l2 = np.cross(epipole, h21 @ x)
            if np.linalg.norm(l2[:2]) > 1e-9:
                built_inf += 1
                try:
                    triangulate_line_depth(pose1, pose2, k1, k2, l2, x)
                    missed += 1
                except TriangulationDegeneracyError as err:
                    if not err.infinite_solutions:
                        wrong_subcase += 1
                continue
        l2 = np.cross(h21 @ x, rng.normal(size=3))
        if np.linalg.norm(l2[:2]) < 1e-6:
            continue
        l2n = l2 / np.linalg.norm(l2[:2])
        if abs(l2n @ epipole) < 1e-4:
            continue
        built_nosol += 1
        try:
            triangulate_line_depth(pose1, pose2, k1, k2, l2, x)
            missed += 1
        except TriangulationDegeneracyError as err:
            if err.infinite_solutions:
                wrong_subcase += 1

    ok = (
        worst_depth < 1e-9
        and worst_rect < 1e-12
        and false_flags == 0
        and missed == 0
        and wrong_subcase == 0
    )
    detail = (
        f"500 scenes worst depth rel {worst_depth:.2e}, rectified vs general {worst_rect:.2e}, "
        f"degenerate: {missed} missed, {false_flags} false flags, {wrong_subcase} wrong subcase"
    )
    _report(3, "triangulation", ok, detail)


def test_criterion_4_covariance_closed_forms():
    rng = np.random.default_rng(3)
    depth_model = DepthNoiseModel()
    worst = defaultdict(float)

    for _ in range(200):
        # backprojected-point covariance
        pixel = rng.uniform(0, 640, 2)
        depth = rng.uniform(0.3, 6.0)
        s_li, s_z = rng.uniform(0.3, 2.0), rng.uniform(0.001, 0.05)
        cov = backprojected_point_covariance(pixel, depth, K, s_li, s_z)
        j = fd_vector(lambda x: backproject(K, x[:2], x[2]), np.array([*pixel, depth]))
        numeric = j @ np.diag([s_li**2, s_li**2, s_z**2]) @ j.T
        worst["sigma_beta"] = max(
            worst["sigma_beta"], np.abs(cov - numeric).max() / np.abs(numeric).max()
        )

        # RGB-D stereo covariance
        lm = PointLandmark(np.append(rng.uniform(-1, 1, 2), depth))
        obs = PointObservation(pixel, depth=depth)
        _, cov = rgbd_point_residual(
            obs, Se3Pose.identity(), K, lm, PyramidNoiseTable(), depth_model, "propagated_cov"
        )
        j = fd_vector(
            lambda x: np.array([x[0], x[1], x[0] - K.baseline * K.fx / x[2]]),
            np.array([*pixel, depth]),
        )
        sz = sigma_z(depth_model, depth)
        numeric = j @ np.diag([1.0, 1.0, sz * sz]) @ j.T
        worst["sigma_ri"] = max(
            worst["sigma_ri"], np.abs(cov - numeric).max() / np.abs(numeric).max()
        )

        # 2D distance variance
        while True:
            p_px, q_px = rng.uniform(100, 540, 2), rng.uniform(100, 540, 2)
            if np.linalg.norm(p_px - q_px) >= 30:
                break
        obs_ln = LineObservation(
            p_px, q_px, depth_p=float(rng.uniform(1, 4)), depth_q=float(rng.uniform(1, 4))
        )
        pose = random_pose(rng, 0.2)
        x_w = pose.inverse().transform(np.append(rng.uniform(-1, 1, 2), rng.uniform(1, 4)))
        from pointline.lines import distance_2d_variance

        var = distance_2d_variance(obs_ln, pose, K, x_w, s_li)

        def f(pq):
            return distance_2d(line_params_from_endpoints(pq[:2], pq[2:]), pose, K, x_w)

        j = fd_vector(f, np.concatenate([obs_ln.p, obs_ln.q]))
        numeric = s_li * s_li * float(j @ j)
        worst["sigma_d2d"] = max(worst["sigma_d2d"], abs(var - numeric) / numeric)

        # backprojection-distance variance
        seg = BackprojectedSegment.from_observation(obs_ln, K)
        lm_ln = LineLandmark(
            pose.inverse().transform(seg.b_p + rng.normal(size=3) * 0.2),
            pose.inverse().transform(seg.b_q + rng.normal(size=3) * 0.2),
        )
        mu = 0.5
        assoc = associate_endpoints(seg, pose.transform(lm_ln.p), pose.transform(lm_ln.q))
        cov = backprojection_distance_covariance(
            obs_ln, pose, K, lm_ln, mu, assoc, s_li, depth_model
        )
        cov_p = backprojected_point_covariance(
            obs_ln.p, obs_ln.depth_p, K, s_li, sigma_z(depth_model, obs_ln.depth_p)
        )
        cov_q = backprojected_point_covariance(
            obs_ln.q, obs_ln.depth_q, K, s_li, sigma_z(depth_model, obs_ln.depth_q)
        )
        big = np.zeros((6, 6))
        big[:3, :3] = cov_p
        big[3:, 3:] = cov_q
        b0 = np.concatenate([seg.b_p, seg.b_q])
        for row, x_lm in enumerate((lm_ln.p, lm_ln.q)):
            x_c = pose.transform(x_lm)
            direct = assoc is EndpointPairing.DIRECT
            takes_bp = direct if row == 0 else not direct

            def f(b6):
                s = BackprojectedSegment(b6[:3], b6[3:])
                paired = b6[:3] if takes_bp else b6[3:]
                return distance_3d(x_c, s) + mu * np.linalg.norm(x_c - paired)

            j = fd_vector(f, b0, step=1e-7)
            numeric = float(j @ big @ j)
            worst["sigma_db"] = max(worst["sigma_db"], abs(cov[row, row] - numeric) / numeric)

    ok = all(v < 1e-5 for v in worst.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in sorted(worst.items()))
    _report(4, "covariance closed forms", ok, detail + " (200 configs each)")


def test_criterion_5_gauge_null_space():
    rng = np.random.default_rng(4)
    built = 0
    ratios_2d = []
    ratios_3d = []
    while built < 50:
        center = rng.uniform(-0.8, 0.8, 3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        length = rng.uniform(0.6, 1.2)
        p_w = center - direction * length / 2
        q_w = center + direction * length / 2
        poses = [orbit_pose(i, 5, 2.0) for i in range(5)]
        views = []
        for i, pose in enumerate(poses):
            t_p = rng.uniform(0.05, 0.25)
            t_q = rng.uniform(0.05, 0.25)
            p_obs = p_w + t_p * (q_w - p_w)
            q_obs = q_w - t_q * (q_w - p_w)
            p_c, q_c = pose.transform(p_obs), pose.transform(q_obs)
            if min(p_c[2], q_c[2]) < 0.4:
                continue
            p_px, q_px = project(K, p_c), project(K, q_c)
            if np.linalg.norm(p_px - q_px) < 20:
                continue
            views.append(
                (i, pose, LineObservation(p_px, q_px, depth_p=float(p_c[2]), depth_q=float(q_c[2])))
            )
        if len(views) < 3:
            continue
        smap = SparseMap(K)
        for i, pose, _ in views:
            smap.add_keyframe(pose, kf_id=i)
        line = smap.add_line(p_w, q_w)
        for i, _, obs in views:
            smap.add_line_observation(i, line.id, obs)
        prob = assemble_problem(smap, BaConfig(fix_all_poses=True, include_line_3d=False))
        eigs = hessian_spectrum(prob, ("line", [line.id]))
        ratios_2d.append(eigs[0] / eigs[-1])
        prob3 = assemble_problem(smap, BaConfig(fix_all_poses=True, mu=0.5))
        eigs3 = hessian_spectrum(prob3, ("line", [line.id]))
        ratios_3d.append(eigs3[0] / eigs3[-1])
        built += 1
    ratios_2d = np.array(ratios_2d)
    ratios_3d = np.array(ratios_3d)
    ok = np.all(ratios_2d <= 1e-8) and np.all(ratios_3d > 1e-4)
    detail = (
        f"50 lines: 2D-only eigenvalue ratio max {ratios_2d.max():.2e} (<= 1e-8), "
        f"with backprojection terms min {ratios_3d.min():.2e} (> 1e-4)"
    )
    _report(5, "gauge null space", ok, detail)


def test_criterion_6_ba_convergence():
    failures = []
    trans_worst = 0.0
    reproj_worst = 0.0
    for seed in range(20):
        cfg = HarnessConfig(
            seed=seed, keyframes=20, points=300, lines=50, pixel_sigma=1.0,
            perturb_translation=0.02, perturb_rotation_deg=1.0,
            perturb_points=0.02, perturb_lines=0.02, max_iters=15,
        )
        truth, smap = generate_scene(cfg)
        problem = assemble_problem(smap, ba_config(cfg))
        values, report = optimize(problem, lm_schedule(cfg))
        rep = evaluate_solution(truth, smap, values, report, f"seed{seed}")
        costs = report.accepted_costs()
        monotone = all(b <= a for a, b in zip(costs, costs[1:]))
        trans_worst = max(trans_worst, rep.pose_translation_rmse)
        reproj_worst = max(reproj_worst, rep.reprojection_rmse)
        if rep.reprojection_rmse > 1.3:
            failures.append(f"seed {seed}: reproj {rep.reprojection_rmse:.3f}")
        if rep.pose_translation_rmse > 2.0 * POSE_RMSE_FLOOR:
            failures.append(f"seed {seed}: trans {rep.pose_translation_rmse:.5f}")
        if not monotone:
            failures.append(f"seed {seed}: non-monotone accepted costs")
    detail = (
        f"20 seeds: worst reproj {reproj_worst:.3f} px (<= 1.3), worst trans "
        f"{trans_worst:.5f} m (<= {2 * POSE_RMSE_FLOOR:.5f}), monotone in all"
    )
    if failures:
        detail += "; failures: " + "; ".join(failures)
    _report(6, "BA convergence", not failures, detail)


def test_criterion_7_drift_experiment():
    along_2d = []
    along_full = []
    perp_full = []
    perp_2d = []
    runaway = []
    for seed in range(20):
        cfg = HarnessConfig(seed=seed, **DRIFT_CONFIG)
        rep_2d, rep_full = run_drift_experiment(cfg)
        along_2d.append(rep_2d.line_along_rmse)
        along_full.append(rep_full.line_along_rmse)
        perp_full.append(rep_full.line_perp_rmse)
        perp_2d.append(rep_2d.line_perp_rmse)
        if rep_full.line_along_rmse > 2.0 * rep_full.line_perp_rmse:
            runaway.append(seed)
    ratio = np.median(along_2d) / np.median(along_full)
    perp_ratio = np.median(perp_2d) / np.median(perp_full)
    ok = ratio >= DRIFT_FACTOR and not runaway and perp_ratio < 10.0
    detail = (
        f"20 seeds: median along-line ratio {ratio:.1f} (>= {DRIFT_FACTOR}), "
        f"full-model along <= 2x perp in all seeds ({'none' if not runaway else runaway} over), "
        f"perp same-order ratio {perp_ratio:.2f}"
    )
    _report(7, "drift experiment", ok, detail)


def test_criterion_8_voma():
    rng = np.random.default_rng(5)
    # octree centroids vs brute-force group-by means
    res = 0.07
    pts = rng.uniform(-1, 1, size=(5000, 3))
    tree = OctreeMap(res, max_extent=4.0)
    integrate_cloud(tree, PointCloud(pts), Se3Pose.identity())
    groups = defaultdict(list)
    for p in pts:
        groups[tuple(np.floor(p / res).astype(int))].append(p)
    cells = {tuple(i): c for i, c in tree.cells()}
    centroid_ok = set(cells) == set(groups) and all(
        np.abs(cells[k].position_sum / cells[k].count - np.mean(v, axis=0)).max() < 1e-12
        for k, v in groups.items()
    )

    # batching independence at the mapper level
    clouds = [PointCloud(rng.uniform(-1, 1, size=(400, 3))) for _ in range(6)]
    poses = [random_pose(rng, 0.1) for _ in range(6)]

    def run(batch):
        mapper = VolumetricMapper(OctreeMap(res, max_extent=4.0), batch_size=batch)
        for i, (c, p) in enumerate(zip(clouds, poses)):
            mapper.submit(i, c, p)
        mapper.process_batches(drain=True)
        return mapper.octree

    batch_ok = maps_equal(run(1), run(5), tol=0.0)

    # full pipeline: rebuild equivalence and planar normals
    cfg = HarnessConfig(
        keyframes=8, points=60, lines=12, seed=6, max_iters=8,
        voma_image_width=40, voma_image_height=30, voma_fx=38.0, voma_fy=38.0,
    )
    integrity, _ = run_voma_pipeline(cfg)
    ok = (
        centroid_ok
        and batch_ok
        and integrity.rebuild_equals_fresh
        and integrity.rebuild_identity_no_change
        and integrity.batch_independent
        and integrity.normal_fraction_within_half_degree >= 0.99
    )
    detail = (
        f"group-by centroids {'ok' if centroid_ok else 'MISMATCH'}, batching "
        f"{'identical' if batch_ok else 'DIFFERS'}, rebuild==fresh "
        f"{integrity.rebuild_equals_fresh}, planar normals within 0.5 deg: "
        f"{integrity.normal_fraction_within_half_degree:.4f} (>= 0.99)"
    )
    _report(8, "volumetric map", ok, detail)


def test_criterion_9_matching():
    rng = np.random.default_rng(7)
    # ratio-test semantics at the 0.8 threshold
    query = rng.random(256) < 0.5

    def candidate(distance, cand_id, offset=0.0):
        d = query.copy()
        d[:distance] = ~d[:distance]
        return (cand_id, LineObservation([10, 50 + offset], [90, 50 + offset], descriptor=d))

    accept = match_descriptor(query, [candidate(10, 0), candidate(30, 1)], ratio=0.8)
    reject = match_descriptor(query, [candidate(10, 0), candidate(11, 1)], ratio=0.8)
    single = match_descriptor(query, [candidate(10, 5)], ratio=0.8)
    query_line = line_params_from_endpoints([10, 50], [90, 50])
    gated = match_descriptor(
        query, [candidate(10, 0, offset=60.0)], ratio=0.8, max_line_dist=40.0,
        query_params=query_line,
    )
    ratio_ok = accept == 0 and reject is None and single == 5 and gated is None

    # tile partition property over 10^4 observations
    observations = []
    while len(observations) < 10_000:
        p, q = rng.uniform(0, 640, 2), rng.uniform(0, 480, 2)
        if np.linalg.norm(p - q) < 6:
            continue
        observations.append(LineObservation(p, q))
    index = build_tile_index(observations)
    partition_ok = (
        sum(len(v) for v in index.buckets.values()) == 10_000
        and sorted(i for b in index.buckets.values() for i in b) == list(range(10_000))
    )

    # synthetic descriptor matching at increasing bit-flip rates
    cfg = HarnessConfig(keyframes=10, points=30, lines=40, seed=8)
    rows = run_matching_experiment(cfg, flip_rates=(0.0, 0.05, 0.1))
    for row in rows:
        print(
            f"    flip rate {row['flip_rate']:.2f}: precision {row['precision']:.3f} "
            f"recall {row['recall']:.3f} ({row['queries']} queries)"
        )
    clean_ok = rows[0]["precision"] == 1.0 and rows[0]["queries"] > 100

    ok = ratio_ok and partition_ok and clean_ok
    detail = (
        f"ratio-test semantics {'ok' if ratio_ok else 'WRONG'}, partition over 1e4 "
        f"observations {'ok' if partition_ok else 'WRONG'}, precision at zero flips "
        f"{rows[0]['precision']:.3f}"
    )
    _report(9, "line matching", ok, detail)
