from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
import pytest

from objslam.association import (
    AssociationConfig,
    EmbeddingTable,
    TrackerState,
    associate_long_term,
    association_weight,
    bbox_iou,
    predicted_box_or_none,
    semantic_indicator,
    solve_lsap,
    track_frame,
)
from objslam.dataset import Detection
from objslam.geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    Pose,
    Quadric,
    back_project_pixel,
    predict_bbox,
)

FIXTURE = Path(__file__).parent / "data" / "embeddings_50d.txt"


def brute_force_lsap(W: np.ndarray) -> tuple[float, dict[int, int]]:
    """Oracle: enumerate every injective assignment of the smaller axis."""
    k, n = W.shape
    best_value = -np.inf
    best: dict[int, int] = {}
    if k <= n:
        for cols in itertools.permutations(range(n), k):
            value = sum(W[r, c] for r, c in enumerate(cols))
            if value > best_value:
                best_value = value
                best = {r: c for r, c in enumerate(cols)}
    else:
        for rows in itertools.permutations(range(k), n):
            value = sum(W[r, c] for c, r in enumerate(rows))
            if value > best_value:
                best_value = value
                best = {r: c for c, r in enumerate(rows)}
    return best_value, best


def det(box: BoundingBox2D, label: str = "mug", conf: float = 0.9,
        depth: float | None = None) -> Detection:
    return Detection(box, label, conf, depth)


class TestBBoxIoU:
    def test_identical(self):
        b = BoundingBox2D(10, 20, 110, 220)
        assert bbox_iou(b, b) == 1.0

    def test_disjoint(self):
        assert bbox_iou(BoundingBox2D(0, 0, 1, 1), BoundingBox2D(5, 5, 6, 6)) == 0.0

    def test_unit_squares_offset_half(self):
        a = BoundingBox2D(0, 0, 1, 1)
        b = BoundingBox2D(0.5, 0, 1.5, 1)
        assert bbox_iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(83)
        for _ in range(500):
            x1, y1 = rng.uniform(0, 100, size=2)
            a = BoundingBox2D(x1, y1, x1 + rng.uniform(1, 50), y1 + rng.uniform(1, 50))
            x2, y2 = rng.uniform(0, 100, size=2)
            b = BoundingBox2D(x2, y2, x2 + rng.uniform(1, 50), y2 + rng.uniform(1, 50))
            v = bbox_iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == pytest.approx(bbox_iou(b, a), abs=1e-15)


class TestEmbeddings:
    def test_load_fixture(self):
        table = EmbeddingTable.load(FIXTURE)
        assert len(table.vectors) == 20
        assert table.vectors["mug"].shape == (50,)

    def test_semantic_indicator_groups(self):
        table = EmbeddingTable.load(FIXTURE)
        assert semantic_indicator("monitor", "tv", table, 4.0) == 1.0
        assert semantic_indicator("monitor", "mug", table, 4.0) == 0.0
        # Tighter threshold splits even in-group pairs.
        d = table.distance("monitor", "tv")
        assert semantic_indicator("monitor", "tv", table, d - 0.01) == 0.0

    def test_identical_labels_need_no_table(self):
        table = EmbeddingTable.empty()
        assert semantic_indicator("gizmo", "gizmo", table, 4.0) == 1.0

    def test_missing_token_scores_zero_and_flags(self):
        table = EmbeddingTable.load(FIXTURE)
        assert semantic_indicator("gizmo", "mug", table, 4.0) == 0.0
        assert "gizmo" in table.missing_tokens

    def test_distance_values(self):
        table = EmbeddingTable(
            {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]),
             "c": np.array([1.1, 0.1])}
        )
        assert table.distance("a", "b") == pytest.approx(np.sqrt(2.0))
        assert table.distance("a", "c") == pytest.approx(np.sqrt(0.02))


class TestAssociationWeight:
    def test_perfect_match_with_floored_distance(self, camera):
        # Sphere dead ahead: measured box equals the prediction, labels match,
        # and the back-projected center lands on the centroid, so the
        # distance term saturates at w_d / min_distance.
        cfg = AssociationConfig()
        q = Quadric(np.zeros(3), np.array([0.0, 0.0, 4.0]), np.full(3, 0.5))
        x = Pose.identity()
        predicted = predict_bbox(x, camera, q)
        d = det(predicted, label="mug", depth=4.0)
        w = association_weight(d, q, "mug", x, camera, EmbeddingTable.empty(), cfg)
        assert w == pytest.approx(1.0 + 0.3 + 0.2 / 0.05, abs=1e-6)

    def test_formula_consistency(self, camera):
        rng = np.random.default_rng(89)
        cfg = AssociationConfig()
        table = EmbeddingTable.load(FIXTURE)
        x = Pose.identity()
        for _ in range(50):
            q = Quadric(
                np.zeros(3),
                np.array([rng.uniform(-1, 1), rng.uniform(-0.7, 0.7), rng.uniform(3, 7)]),
                rng.uniform(0.1, 0.5, size=3),
            )
            center = rng.uniform([200, 150], [440, 330])
            box = BoundingBox2D(center[0] - 40, center[1] - 30, center[0] + 40, center[1] + 30)
            depth = float(rng.uniform(2, 6))
            d = det(box, label="cup", depth=depth)
            w = association_weight(d, q, "mug", x, camera, table, cfg)
            predicted = predicted_box_or_none(x, camera, q)
            expected = bbox_iou(box, predicted)
            expected += cfg.semantic_weight * semantic_indicator("cup", "mug", table, cfg.semantic_threshold)
            t_hat = back_project_pixel(camera, x, box.center(), depth)
            expected += cfg.distance_weight / max(np.linalg.norm(q.t - t_hat), cfg.min_distance)
            assert w == pytest.approx(expected, abs=1e-12)

    def test_no_depth_omits_distance_term(self, camera):
        cfg = AssociationConfig()
        q = Quadric(np.zeros(3), np.array([0.0, 0.0, 4.0]), np.full(3, 0.5))
        predicted = predict_bbox(Pose.identity(), camera, q)
        d = det(predicted, label="mug", depth=None)
        w = association_weight(d, q, "mug", Pose.identity(), camera, EmbeddingTable.empty(), cfg)
        assert w == pytest.approx(1.3, abs=1e-6)

    def test_invisible_landmark_keeps_semantic_term(self, camera):
        cfg = AssociationConfig()
        q = Quadric(np.zeros(3), np.array([0.0, 0.0, -4.0]), np.full(3, 0.5))
        d = det(BoundingBox2D(100, 100, 200, 200), label="mug")
        w = association_weight(d, q, "mug", Pose.identity(), camera, EmbeddingTable.empty(), cfg)
        assert w == pytest.approx(cfg.semantic_weight)


class TestLSAP:
    def test_square_example(self):
        result = solve_lsap(np.array([[0.9, 0.1], [0.2, 0.8]]), gate=0.2)
        assert result.matches == {0: 0, 1: 1}
        assert result.unmatched_detections == ()

    def test_rectangular_example(self):
        result = solve_lsap(np.array([[0.1, 0.9, 0.3], [0.8, 0.2, 0.7]]), gate=0.2)
        assert result.matches == {0: 1, 1: 0}

    def test_gate_blocks_weak_pairs(self):
        result = solve_lsap(np.array([[0.15]]), gate=0.2)
        assert result.matches == {}
        assert result.unmatched_detections == (0,)

    def test_empty_inputs(self):
        result = solve_lsap(np.zeros((0, 3)), gate=0.2)
        assert result.matches == {}
        result = solve_lsap(np.zeros((2, 0)), gate=0.2)
        assert result.unmatched_detections == (0, 1)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(97)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            n = int(rng.integers(1, 6))
            W = rng.uniform(0.0, 1.0, size=(k, n))
            result = solve_lsap(W, gate=0.0)
            value = sum(W[r, c] for r, c in result.matches.items())
            best_value, best = brute_force_lsap(W)
            assert value == pytest.approx(best_value, abs=1e-12)
            assert result.matches == best


class TestTracker:
    def test_continuity_and_fresh_ids(self):
        cfg = AssociationConfig()
        state = TrackerState.empty()
        d1 = [det(BoundingBox2D(10, 10, 60, 60)), det(BoundingBox2D(200, 200, 260, 280))]
        state, assign1 = track_frame(state, d1, cfg)
        assert assign1 == {0: 0, 1: 1}
        # Slightly shifted boxes keep their track ids.
        d2 = [det(BoundingBox2D(14, 12, 64, 62)), det(BoundingBox2D(205, 203, 265, 283))]
        state, assign2 = track_frame(state, d2, cfg)
        assert assign2 == {0: 0, 1: 1}
        # A far-away detection spawns a new id.
        d3 = [det(BoundingBox2D(400, 50, 460, 120))]
        state, assign3 = track_frame(state, d3, cfg)
        assert assign3 == {0: 2}

    def test_low_overlap_spawns_new_track(self):
        cfg = AssociationConfig()
        state, _ = track_frame(TrackerState.empty(), [det(BoundingBox2D(0, 0, 10, 10))], cfg)
        state, assign = track_frame(state, [det(BoundingBox2D(9, 9, 19, 19))], cfg)
        # IoU of the two boxes is ~0.005, far below the 0.3 threshold.
        assert assign == {0: 1}

    def test_track_survives_short_gap(self):
        cfg = AssociationConfig(track_max_age=2)
        box = BoundingBox2D(50, 50, 150, 150)
        state, _ = track_frame(TrackerState.empty(), [det(box)], cfg)
        state, _ = track_frame(state, [], cfg)
        state, _ = track_frame(state, [], cfg)
        state, assign = track_frame(state, [det(box)], cfg)
        assert assign == {0: 0}

    def test_track_retires_after_max_age(self):
        cfg = AssociationConfig(track_max_age=2)
        box = BoundingBox2D(50, 50, 150, 150)
        state, _ = track_frame(TrackerState.empty(), [det(box)], cfg)
        for _ in range(3):
            state, _ = track_frame(state, [], cfg)
        assert state.tracks == ()
        # The id is not reused by the next spawn.
        state, assign = track_frame(state, [det(box)], cfg)
        assert assign == {0: 1}

    def test_ids_never_reused(self):
        cfg = AssociationConfig(track_max_age=0)
        state = TrackerState.empty()
        seen: list[int] = []
        rng = np.random.default_rng(101)
        for _ in range(20):
            x, y = rng.uniform(0, 500, size=2)
            state, assign = track_frame(
                state, [det(BoundingBox2D(x, y, x + 20, y + 20))], cfg
            )
            seen.extend(assign.values())
            state, _ = track_frame(state, [], cfg)
        assert len(seen) == len(set(seen))


class TestLongTerm:
    def test_bijection_on_separated_landmarks(self, camera):
        cfg = AssociationConfig()
        x = Pose.identity()
        left = Quadric(np.zeros(3), np.array([-1.0, 0.0, 4.0]), np.full(3, 0.4))
        right = Quadric(np.zeros(3), np.array([1.0, 0.0, 4.0]), np.full(3, 0.4))
        landmarks = [(10, left, "mug"), (11, right, "bottle")]
        dets = [
            det(predict_bbox(x, camera, right), label="bottle", depth=4.0),
            det(predict_bbox(x, camera, left), label="mug", depth=4.0),
        ]
        result = associate_long_term(dets, landmarks, x, camera, EmbeddingTable.empty(), cfg)
        assert result.matches == {0: 11, 1: 10}
        assert result.unmatched_detections == ()

    def test_weak_pairs_stay_unmatched(self, camera):
        cfg = AssociationConfig()
        x = Pose.identity()
        lm = Quadric(np.zeros(3), np.array([-1.0, 0.0, 4.0]), np.full(3, 0.4))
        # Different label, disjoint box, no depth: weight is zero.
        d = det(BoundingBox2D(500, 350, 600, 450), label="lamp")
        result = associate_long_term([d], [(5, lm, "mug")], x, camera, EmbeddingTable.empty(), cfg)
        assert result.matches == {}
        assert result.unmatched_detections == (0,)

    def test_one_landmark_per_detection(self, camera):
        # Two detections of the same landmark: only one may claim it.
        cfg = AssociationConfig()
        x = Pose.identity()
        lm = Quadric(np.zeros(3), np.array([0.0, 0.0, 4.0]), np.full(3, 0.4))
        b = predict_bbox(x, camera, lm)
        dets = [det(b, label="mug", depth=4.0), det(b, label="mug", depth=4.0)]
        result = associate_long_term(dets, [(3, lm, "mug")], x, camera, EmbeddingTable.empty(), cfg)
        assert len(result.matches) == 1
        assert len(result.unmatched_detections) == 1
