"""Voxel index tests against brute-force set oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointmap_slam.covisibility import VoxelKeyframeIndex


def brute_force_voxels(points, confidence, size, floor):
    out = set()
    for p, c in zip(points, confidence):
        if c > floor:
            out.add(tuple(int(np.floor(v / size)) for v in p))
    return out


class TestInsert:
    def test_same_cell(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0, min_confidence=0.0)
        pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]])
        idx.insert(1, pts, np.ones(2))
        assert idx.per_keyframe[1] == {(0, 0, 0)}

    def test_floor_convention_on_negatives(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0, min_confidence=0.0)
        idx.insert(1, np.array([[-0.1, 0.0, 0.0]]), np.ones(1))
        assert idx.per_keyframe[1] == {(-1, 0, 0)}

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-5, 5, size=(10_000, 3))
        conf = rng.uniform(0, 1, size=10_000)
        idx = VoxelKeyframeIndex(voxel_size=0.33, min_confidence=0.1)
        idx.insert(7, pts, conf)
        assert idx.per_keyframe[7] == brute_force_voxels(pts, conf, 0.33, 0.1)

    def test_empty_valid_set_flagged(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0, min_confidence=0.5)
        ok = idx.insert(1, np.array([[1.0, 1.0, 1.0]]), np.zeros(1))
        assert not ok
        assert idx.per_keyframe[1] == set()

    def test_reinsert_replaces_atomically(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0, min_confidence=0.0)
        idx.insert(1, np.array([[0.5, 0.5, 0.5]]), np.ones(1))
        idx.insert(1, np.array([[5.5, 5.5, 5.5]]), np.ones(1))
        assert idx.per_keyframe[1] == {(5, 5, 5)}
        assert (0, 0, 0) not in idx.cells
        assert idx.check_consistency()


class TestOverlap:
    def make_index(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0, min_confidence=0.0)
        return idx

    def insert_cells(self, idx, kf, cells):
        pts = np.array([[c[0] + 0.5, c[1] + 0.5, c[2] + 0.5] for c in cells])
        idx.insert(kf, pts, np.ones(len(cells)))

    def test_self_overlap(self):
        idx = self.make_index()
        self.insert_cells(idx, 1, [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
        assert idx.overlap_score(1, 1) == 3

    def test_set_arithmetic(self):
        idx = self.make_index()
        self.insert_cells(idx, 1, [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
        self.insert_cells(idx, 2, [(1, 0, 0), (2, 0, 0), (3, 0, 0)])
        assert idx.overlap_score(1, 2) == 2

    def test_symmetry_and_oracle(self):
        rng = np.random.default_rng(1)
        idx = VoxelKeyframeIndex(voxel_size=0.5, min_confidence=0.0)
        clouds = {}
        for kf in range(12):
            pts = rng.uniform(-3, 3, size=(400, 3))
            clouds[kf] = pts
            idx.insert(kf, pts, np.ones(400))
        for a in range(12):
            for b in range(a, 12):
                oracle = len(
                    brute_force_voxels(clouds[a], np.ones(400), 0.5, 0.0)
                    & brute_force_voxels(clouds[b], np.ones(400), 0.5, 0.0)
                )
                assert idx.overlap_score(a, b) == oracle
                assert idx.overlap_score(a, b) == idx.overlap_score(b, a)

    def test_unknown_id_raises(self):
        idx = self.make_index()
        self.insert_cells(idx, 1, [(0, 0, 0)])
        with pytest.raises(KeyError):
            idx.overlap_score(1, 99)


class TestTopN:
    def insert_cells(self, idx, kf, cells):
        pts = np.array([[c + 0.5, 0.5, 0.5] for c in cells])
        idx.insert(kf, pts, np.ones(len(cells)))

    def test_only_query_exists(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0)
        self.insert_cells(idx, 5, [0, 1, 2])
        assert idx.top_n_candidates(5, 4) == []

    def test_tie_break_prefers_recent(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0)
        self.insert_cells(idx, 0, list(range(10)))  # query
        self.insert_cells(idx, 7, list(range(5)))  # score 5
        self.insert_cells(idx, 9, list(range(5)))  # score 5
        self.insert_cells(idx, 3, list(range(2)))  # score 2
        top = idx.top_n_candidates(0, 2)
        assert [c.keyframe_id for c in top] == [9, 7]
        assert [c.score for c in top] == [5, 5]

    def test_zero_scores_excluded(self):
        idx = VoxelKeyframeIndex(voxel_size=1.0)
        self.insert_cells(idx, 0, [0, 1])
        self.insert_cells(idx, 1, [50, 51])
        assert idx.top_n_candidates(0, 5) == []

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(2)
        idx = VoxelKeyframeIndex(voxel_size=0.5, min_confidence=0.0)
        clouds = {}
        for kf in range(50):
            pts = rng.uniform(-2.5, 2.5, size=(150, 3))
            clouds[kf] = pts
            idx.insert(kf, pts, np.ones(150))
        query = 49
        scores = {
            kf: idx.overlap_score(query, kf) for kf in range(49)
        }
        oracle = sorted(
            ((kf, s) for kf, s in scores.items() if s > 0),
            key=lambda item: (-item[1], -item[0]),
        )[:8]
        got = idx.top_n_candidates(query, 8)
        assert [(c.keyframe_id, c.score) for c in got] == oracle


class TestRefinement:
    def test_halving_bounds_and_ranking(self):
        # Halving the voxel size splits every cell into 8, so no pairwise
        # score may grow by more than 8x; clearly separated scores keep
        # their order.
        rng = np.random.default_rng(3)
        coarse = VoxelKeyframeIndex(voxel_size=0.5, min_confidence=0.0)
        fine = VoxelKeyframeIndex(voxel_size=0.25, min_confidence=0.0)
        centers = [np.zeros(3), np.array([0.3, 0, 0]), np.array([2.5, 0, 0])]
        for kf, c in enumerate(centers):
            pts = c + rng.uniform(-1, 1, size=(2000, 3))
            coarse.insert(kf, pts, np.ones(2000))
            fine.insert(kf, pts, np.ones(2000))
        for a in range(3):
            for b in range(3):
                sc, sf = coarse.overlap_score(a, b), fine.overlap_score(a, b)
                assert sf <= 8 * sc
        # kf1 overlaps kf0 far more than kf2 does; ratio > 2 must survive.
        assert coarse.overlap_score(0, 1) > 2 * max(coarse.overlap_score(0, 2), 1)
        assert fine.overlap_score(0, 1) > fine.overlap_score(0, 2)


@settings(max_examples=40, deadline=None)
@given(
    ops=st.lists(
        st.tuples(
            st.sampled_from(["insert", "remove"]),
            st.integers(min_value=0, max_value=6),
            st.integers(min_value=0, max_value=2**31),
        ),
        max_size=25,
    )
)
def test_consistency_under_random_op_sequences(ops):
    idx = VoxelKeyframeIndex(voxel_size=0.7, min_confidence=0.05)
    for kind, kf, seed in ops:
        if kind == "insert":
            rng = np.random.default_rng(seed)
            pts = rng.uniform(-2, 2, size=(30, 3))
            conf = rng.uniform(0, 1, size=30)
            idx.insert(kf, pts, conf)
        else:
            idx.remove(kf)
        assert idx.check_consistency()
