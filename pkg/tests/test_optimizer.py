from __future__ import annotations

import numpy as np
import pytest

from objslam.association import AssociationResult
from objslam.dataset import Detection
from objslam.factors import (
    BBoxFactor,
    CentroidPriorFactor,
    NoiseModel,
    OdometryFactor,
    OrientationPriorFactor,
    SizePriorFactor,
)
from objslam.geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    NonPositiveDepth,
    Pose,
    Quadric,
    between,
    compose,
    predict_bbox,
    so3_exp,
)
from objslam.optimizer import (
    FactorGraph,
    FactorPolicy,
    GraphValues,
    MissingVariable,
    SingularSystem,
    SolverConfig,
    add_keyframe,
    cost_breakdown,
    initialize_landmark,
    solve_batch,
    solve_incremental,
    total_cost,
)
from objslam.priors import OrientationClass, PriorRecord, PriorTable

from conftest import random_rotation


def looking_at_poses() -> list[Pose]:
    """Three nearby viewpoints with the quadric at (0, 0, 2) in front."""
    return [
        Pose.identity(),
        Pose.from_rotvec(np.array([0.0, -0.12, 0.0]), np.array([0.25, 0.0, 0.0])),
        Pose.from_rotvec(np.array([0.06, 0.10, 0.02]), np.array([-0.2, 0.1, -0.05])),
    ]


GT_QUADRIC = Quadric(np.array([0.1, -0.2, 0.3]), np.array([0.0, 0.0, 2.0]),
                     np.array([0.2, 0.3, 0.4]))


def three_view_graph(camera, noise_px: float = 0.0, rng=None):
    """Noise-free (or lightly noisy) single-quadric graph with GT priors."""
    poses = looking_at_poses()
    graph = FactorGraph()
    values = GraphValues()
    for i, x in enumerate(poses):
        values.poses[i] = x
    values.quadrics[0] = GT_QUADRIC
    odom_noise = NoiseModel.diagonal(np.array([1e-4] * 3 + [1e-4] * 3))
    bbox_noise = NoiseModel.isotropic(4, 10.0)
    for i in range(2):
        graph.add(OdometryFactor(i, i + 1, between(poses[i], poses[i + 1]), odom_noise))
    for i, x in enumerate(poses):
        box = predict_bbox(x, camera, GT_QUADRIC).as_array()
        if noise_px > 0.0:
            box = box + rng.normal(0.0, noise_px, size=4)
        graph.add(BBoxFactor(i, 0, BoundingBox2D(*box), camera, bbox_noise))
    graph.add(SizePriorFactor(0, np.sort(GT_QUADRIC.s), NoiseModel.isotropic(3, 0.1)))
    graph.add(
        OrientationPriorFactor(
            0, GT_QUADRIC.rotation_matrix(), NoiseModel.isotropic(3, 0.2)
        )
    )
    graph.add(CentroidPriorFactor(0, GT_QUADRIC.t, NoiseModel.isotropic(3, 0.5)))
    return graph, values


def perturbed(values: GraphValues, rng: np.random.Generator) -> GraphValues:
    out = values.copy()
    q = out.quadrics[0]
    delta = np.zeros(9)
    delta[0:3] = rng.normal(0.0, 0.05, size=3)
    delta[3:6] = 0.2 * rng.standard_normal(3) / np.sqrt(3)
    delta[6:9] = rng.normal(0.0, 0.05, size=3)
    out.quadrics[0] = q.retract(delta)
    return out


class TestTotalCost:
    def test_zero_at_ground_truth(self, camera):
        graph, values = three_view_graph(camera)
        assert total_cost(graph, values) == pytest.approx(0.0, abs=1e-9)

    def test_matches_brute_force_mahalanobis(self, camera, rng):
        graph, values = three_view_graph(camera)
        values = perturbed(values, rng)
        expected = 0.0
        for f in graph:
            r = f.residual_at(*[values.get(k) for k in f.variable_keys()])
            if r is None:
                continue
            expected += float(r @ np.linalg.inv(np.asarray(f.noise.covariance)) @ r)
        assert total_cost(graph, values) == pytest.approx(expected, rel=1e-12)

    def test_doubling_covariance_halves_contribution(self):
        values = GraphValues(quadrics={0: Quadric(np.zeros(3), np.zeros(3), np.ones(3))})
        target = np.array([1.0, 1.0, 2.0])
        g1, g2 = FactorGraph(), FactorGraph()
        g1.add(CentroidPriorFactor(0, target, NoiseModel.isotropic(3, 1.0)))
        g2.add(CentroidPriorFactor(0, target, NoiseModel(2.0 * np.eye(3))))
        assert total_cost(g2, values) == pytest.approx(total_cost(g1, values) / 2.0)

    def test_missing_variable(self):
        graph = FactorGraph()
        graph.add(CentroidPriorFactor(3, np.zeros(3), NoiseModel.isotropic(3, 1.0)))
        with pytest.raises(MissingVariable):
            total_cost(graph, GraphValues())

    def test_breakdown_keys(self, camera):
        graph, values = three_view_graph(camera)
        breakdown = cost_breakdown(graph, values)
        assert set(breakdown) == {
            "odometry", "bbox", "size_prior", "orientation_prior", "centroid",
        }


class TestInitializeLandmark:
    def test_pinhole_example(self):
        K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0)
        det = Detection(BoundingBox2D(300, 220, 340, 260), "mug", 0.9, center_depth=5.0)
        q = initialize_landmark(det, Pose.identity(), K)
        np.testing.assert_allclose(q.t, [0.0, 0.0, 5.0], atol=1e-12)
        np.testing.assert_allclose(q.s[:2], [1.0, 1.0], atol=1e-12)
        assert q.s[2] == pytest.approx(1.0)
        np.testing.assert_allclose(q.rotation_matrix(), np.eye(3), atol=1e-12)

    def test_translated_camera_same_world_centroid(self):
        K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0)
        det = Detection(BoundingBox2D(300, 220, 340, 260), "mug", 0.9, center_depth=5.0)
        x = Pose(np.eye(3), np.array([1.0, -2.0, 0.5]))
        q = initialize_landmark(det, x, K)
        np.testing.assert_allclose(q.t, [1.0, -2.0, 5.5], atol=1e-12)

    def test_missing_depth(self):
        K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0)
        det = Detection(BoundingBox2D(300, 220, 340, 260), "mug", 0.9)
        with pytest.raises(NonPositiveDepth):
            initialize_landmark(det, Pose.identity(), K)

    def test_prior_rotation_applied(self):
        K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0)
        # Wide box: the longest initial semi-axis is the camera x axis, so a
        # vertical prior must rotate it onto the world vertical.
        det = Detection(BoundingBox2D(200, 220, 440, 260), "bottle", 0.9, center_depth=5.0)
        record = PriorRecord("bottle", 0.1, 0.1, 0.3, OrientationClass.VERTICAL)
        q = initialize_landmark(det, Pose.identity(), K, record)
        R = q.rotation_matrix()
        longest = np.argmax(q.s)
        assert abs(R[:, longest] @ np.array([0.0, 0.0, 1.0])) == pytest.approx(1.0, abs=1e-9)


def det_at(box: BoundingBox2D, label="mug", conf=0.8, depth=2.0) -> Detection:
    return Detection(box, label, conf, center_depth=depth)


def no_matches(n: int) -> AssociationResult:
    return AssociationResult({}, tuple(range(n)), {})


class TestAddKeyframe:
    def test_first_keyframe_counts(self, camera):
        graph, values = FactorGraph(), GraphValues()
        priors = PriorTable()
        priors.add(PriorRecord("mug", 0.1, 0.1, 0.12, OrientationClass.VERTICAL))
        dets = [det_at(BoundingBox2D(300, 220, 340, 260))]
        mapping = add_keyframe(
            graph, values, 0, None, dets, no_matches(1), priors, camera
        )
        assert mapping == {0: 0}
        assert len(values.poses) == 1 and len(values.quadrics) == 1
        assert graph.counts_by_kind() == {
            "bbox": 1, "size_prior": 1, "orientation_prior": 1, "centroid": 1,
        }

    def test_reobservation_adds_only_bbox(self, camera):
        graph, values = FactorGraph(), GraphValues()
        dets = [det_at(BoundingBox2D(300, 220, 340, 260))]
        add_keyframe(graph, values, 0, None, dets, no_matches(1), None, camera)
        before = graph.counts_by_kind()
        mapping = add_keyframe(
            graph, values, 1, Pose.identity(), dets,
            AssociationResult({0: 0}, (), {0: 5.0}), None, camera,
        )
        after = graph.counts_by_kind()
        assert mapping == {0: 0}
        assert after["bbox"] == before["bbox"] + 1
        assert after["odometry"] == 1
        assert len(values.quadrics) == 1

    def test_empty_frame_adds_only_odometry(self, camera):
        graph, values = FactorGraph(), GraphValues()
        add_keyframe(graph, values, 0, None, [], no_matches(0), None, camera)
        assert len(graph) == 0
        u = Pose.from_rotvec(np.array([0.0, 0.01, 0.0]), np.array([0.1, 0.0, 0.0]))
        add_keyframe(graph, values, 1, u, [], no_matches(0), None, camera)
        assert graph.counts_by_kind() == {"odometry": 1}
        np.testing.assert_allclose(
            values.poses[1].matrix(), compose(values.poses[0], u).matrix(), atol=1e-12
        )

    def test_flags_disable_prior_factors(self, camera):
        priors = PriorTable()
        priors.add(PriorRecord("mug", 0.1, 0.1, 0.12, OrientationClass.VERTICAL))
        dets = [det_at(BoundingBox2D(300, 220, 340, 260))]
        policy = FactorPolicy(
            enable_size_prior=False,
            enable_orientation_prior=False,
            enable_centroid_factor=False,
        )
        graph, values = FactorGraph(), GraphValues()
        add_keyframe(graph, values, 0, None, dets, no_matches(1), priors, camera, policy)
        assert graph.counts_by_kind() == {"bbox": 1}

    def test_unknown_label_falls_back_and_flags(self, camera):
        priors = PriorTable()
        dets = [det_at(BoundingBox2D(300, 220, 340, 260), label="gizmo")]
        graph, values = FactorGraph(), GraphValues()
        add_keyframe(graph, values, 0, None, dets, no_matches(1), priors, camera)
        assert "gizmo" in priors.flagged
        assert graph.counts_by_kind()["size_prior"] == 1

    def test_detection_without_depth_is_deferred(self, camera):
        graph, values = FactorGraph(), GraphValues()
        dets = [Detection(BoundingBox2D(300, 220, 340, 260), "mug", 0.8)]
        mapping = add_keyframe(graph, values, 0, None, dets, no_matches(1), None, camera)
        assert mapping == {}
        assert len(values.quadrics) == 0 and len(graph) == 0

    def test_deterministic(self, camera):
        priors = PriorTable()
        priors.add(PriorRecord("mug", 0.1, 0.1, 0.12, OrientationClass.VERTICAL))
        dets = [
            det_at(BoundingBox2D(300, 220, 340, 260)),
            det_at(BoundingBox2D(100, 100, 160, 180), label="bottle", depth=3.0),
        ]
        results = []
        for _ in range(2):
            graph, values = FactorGraph(), GraphValues()
            mapping = add_keyframe(
                graph, values, 0, None, dets, no_matches(2), priors, camera
            )
            results.append((mapping, [f.kind for f in graph],
                            {k: q.t.tolist() for k, q in values.quadrics.items()}))
        assert results[0] == results[1]

    def test_duplicate_pose_id_rejected(self, camera):
        graph, values = FactorGraph(), GraphValues()
        add_keyframe(graph, values, 0, None, [], no_matches(0), None, camera)
        with pytest.raises(ValueError):
            add_keyframe(graph, values, 0, Pose.identity(), [], no_matches(0), None, camera)


class TestSolveBatch:
    def test_recovers_ground_truth(self, camera, rng):
        graph, gt_values = three_view_graph(camera)
        init = perturbed(gt_values, rng)
        solved, report = solve_batch(graph, init)
        assert report.converged
        assert report.final_cost <= report.initial_cost
        assert np.linalg.norm(solved.quadrics[0].t - GT_QUADRIC.t) < 1e-3
        np.testing.assert_allclose(
            np.sort(solved.quadrics[0].s), np.sort(GT_QUADRIC.s), atol=1e-3
        )

    def test_already_optimal_is_a_no_op(self, camera, rng):
        graph, gt_values = three_view_graph(camera)
        solved, _ = solve_batch(graph, perturbed(gt_values, rng))
        again, report = solve_batch(graph, solved)
        assert report.iterations == 0
        assert report.converged
        assert report.final_cost == pytest.approx(report.initial_cost, abs=1e-12)
        np.testing.assert_allclose(
            again.quadrics[0].t, solved.quadrics[0].t, atol=1e-12
        )

    def test_unary_only_converges_to_prior_targets(self, rng):
        target_R = random_rotation(rng)
        target_t = np.array([0.4, -0.3, 1.2])
        target_s = np.array([0.1, 0.2, 0.3])
        graph = FactorGraph()
        graph.add(SizePriorFactor(7, target_s, NoiseModel.isotropic(3, 0.1)))
        graph.add(OrientationPriorFactor(7, target_R, NoiseModel.isotropic(3, 0.1)))
        graph.add(CentroidPriorFactor(7, target_t, NoiseModel.isotropic(3, 0.1)))
        start = Quadric.from_rotation(
            target_R @ so3_exp(np.array([0.05, -0.03, 0.08])),
            target_t + np.array([0.1, 0.05, -0.08]),
            target_s[[1, 0, 2]] * 1.3,
        )
        values = GraphValues(quadrics={7: start})
        solved, report = solve_batch(graph, values)
        q = solved.quadrics[7]
        assert report.converged
        np.testing.assert_allclose(np.sort(q.s), target_s, atol=1e-6)
        np.testing.assert_allclose(q.t, target_t, atol=1e-6)
        np.testing.assert_allclose(q.rotation_matrix(), target_R, atol=1e-6)

    def test_first_pose_stays_anchored(self, camera, rng):
        graph, gt_values = three_view_graph(camera)
        init = perturbed(gt_values, rng)
        anchor = init.poses[0]
        solved, _ = solve_batch(graph, init)
        np.testing.assert_array_equal(solved.poses[0].rotation, anchor.rotation)
        np.testing.assert_array_equal(solved.poses[0].translation, anchor.translation)

    def test_semi_axes_stay_clamped(self):
        graph = FactorGraph()
        tiny = np.full(3, 1e-4)
        graph.add(SizePriorFactor(0, tiny, NoiseModel.isotropic(3, 0.01)))
        values = GraphValues(quadrics={0: Quadric(np.zeros(3), np.zeros(3), np.full(3, 0.3))})
        solved, _ = solve_batch(graph, values)
        assert np.all(solved.quadrics[0].s >= 1e-4 - 1e-15)

    def test_singular_system(self):
        class LyingFactor(SizePriorFactor):
            """Constant-slope Jacobian over a residual that only grows."""

            def residual_at(self, q):
                return np.array([1.0 + np.sqrt(abs(q.t[0]))])

            def jacobian_at(self, q, step=1e-6):
                J = np.zeros((1, 9))
                J[0, 3] = 1.0
                return self.residual_at(q), [J]

        graph = FactorGraph()
        graph.add(LyingFactor(0, np.full(3, 0.1), NoiseModel.isotropic(1, 1.0)))
        values = GraphValues(quadrics={0: Quadric(np.zeros(3), np.zeros(3), np.ones(3))})
        with pytest.raises(SingularSystem):
            solve_batch(graph, values)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)
        with pytest.raises(ValueError):
            SolverConfig(convergence_rel_decrease=1.5)
        with pytest.raises(ValueError):
            SolverConfig(damping_up=0.5)


class TestSolveIncremental:
    def test_single_keyframe_matches_batch(self, camera, rng):
        graph = FactorGraph()
        values = GraphValues()
        priors = PriorTable()
        priors.add(PriorRecord("mug", 0.2, 0.25, 0.3, OrientationClass.UNCERTAIN))
        dets = [det_at(BoundingBox2D(290, 210, 350, 270))]
        add_keyframe(graph, values, 0, None, dets, no_matches(1), priors, camera)
        inc, _ = solve_incremental(graph, values)
        bat, _ = solve_batch(graph, values)
        np.testing.assert_allclose(inc.quadrics[0].t, bat.quadrics[0].t, atol=1e-6)
        np.testing.assert_allclose(inc.quadrics[0].s, bat.quadrics[0].s, atol=1e-6)

    def test_never_increases_cost(self, camera, rng):
        graph, gt_values = three_view_graph(camera, noise_px=2.0, rng=rng)
        values = perturbed(gt_values, rng)
        cost = total_cost(graph, values)
        for _ in range(6):
            values, report = solve_incremental(graph, values)
            assert report.final_cost <= cost + 1e-12
            cost = report.final_cost

    def test_repeated_calls_reach_batch_cost(self, camera, rng):
        graph, gt_values = three_view_graph(camera, noise_px=2.0, rng=rng)
        init = perturbed(gt_values, rng)
        _, batch_report = solve_batch(graph, init)
        values = init
        report = None
        for _ in range(30):
            values, report = solve_incremental(graph, values)
            if report.converged:
                break
        rel = abs(report.final_cost - batch_report.final_cost) / max(
            batch_report.final_cost, 1e-12
        )
        assert rel < 1e-6

    def test_multi_keyframe_pipeline_matches_batch(self, camera, rng):
        gt_q = Quadric(np.array([0.0, 0.1, -0.1]), np.array([0.0, 0.0, 2.0]),
                       np.array([0.15, 0.2, 0.3]))
        priors = PriorTable()
        priors.add(PriorRecord("mug", 0.3, 0.4, 0.6, OrientationClass.UNCERTAIN))
        n = 8
        poses = []
        for i in range(n):
            angle = 0.05 * i
            poses.append(
                Pose.from_rotvec(
                    np.array([0.0, -angle, 0.0]),
                    np.array([0.5 * np.sin(angle * 2), 0.02 * i, -0.05 * i]),
                )
            )

        def frames():
            for i, x in enumerate(poses):
                box = predict_bbox(x, camera, gt_q).as_array()
                box = box + rng.normal(0.0, 1.0, size=4)
                yield i, x, [det_at(BoundingBox2D(*box))]

        def build(solve_each: bool):
            graph, values = FactorGraph(), GraphValues()
            for i, x, dets in frames():
                odom = None if i == 0 else between(poses[i - 1], poses[i])
                assoc = (
                    no_matches(1) if i == 0
                    else AssociationResult({0: 0}, (), {0: 5.0})
                )
                add_keyframe(graph, values, i, odom, dets, assoc, priors, camera)
                if solve_each:
                    values, _ = solve_incremental(graph, values)
            return graph, values

        rng_state = rng.bit_generator.state
        graph_inc, values_inc = build(solve_each=True)
        rng.bit_generator.state = rng_state
        graph_bat, values_bat = build(solve_each=False)
        values_bat, _ = solve_batch(graph_bat, values_bat)
        np.testing.assert_allclose(
            values_inc.quadrics[0].t, values_bat.quadrics[0].t, atol=0.05
        )
