"""Voxel-indexed keyframe map for overlap scoring and candidate retrieval.

Each voxel cell (integer floor-divided coordinates) stores the set of
keyframe ids observing it; a reverse map stores each keyframe's voxel set.
Overlap between two keyframes is the cardinality of their voxel-set
intersection, which stays cheap and discriminative at room scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OverlapScore:
    keyframe_id: int
    score: int


class VoxelKeyframeIndex:
    """Bidirectional voxel <-> keyframe map.

    Single-writer use: the frontend mutates, the backend may read
    snapshots between mutations.
    """

    def __init__(self, voxel_size: float = 0.25, min_confidence: float = 0.1):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.min_confidence = float(min_confidence)
        self.cells: dict[tuple[int, int, int], set[int]] = {}
        self.per_keyframe: dict[int, set[tuple[int, int, int]]] = {}

    def voxels_of(self, points: np.ndarray, confidence: np.ndarray) -> set:
        """Voxel set of the confident points (floor convention, negatives
        round toward minus infinity)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        conf = np.asarray(confidence, dtype=float).reshape(-1)
        keep = conf > self.min_confidence
        if not np.any(keep):
            return set()
        cells = np.floor(pts[keep] / self.voxel_size).astype(np.int64)
        return set(map(tuple, np.unique(cells, axis=0)))

    def insert(self, keyframe_id: int, points: np.ndarray, confidence: np.ndarray) -> bool:
        """Index (or atomically re-index) a keyframe from its world-frame
        points. Returns False when no point clears the confidence floor."""
        if keyframe_id in self.per_keyframe:
            self.remove(keyframe_id)
        voxels = self.voxels_of(points, confidence)
        self.per_keyframe[keyframe_id] = voxels
        for cell in voxels:
            self.cells.setdefault(cell, set()).add(keyframe_id)
        return bool(voxels)

    def remove(self, keyframe_id: int) -> None:
        voxels = self.per_keyframe.pop(keyframe_id, set())
        for cell in voxels:
            members = self.cells.get(cell)
            if members is not None:
                members.discard(keyframe_id)
                if not members:
                    del self.cells[cell]

    def __contains__(self, keyframe_id: int) -> bool:
        return keyframe_id in self.per_keyframe

    def overlap_score(self, k: int, i: int) -> int:
        if k not in self.per_keyframe or i not in self.per_keyframe:
            raise KeyError(f"keyframe {k if k not in self.per_keyframe else i} not indexed")
        return len(self.per_keyframe[k] & self.per_keyframe[i])

    def top_n_candidates(self, last_keyframe_id: int, n: int) -> list[OverlapScore]:
        """Keyframes sharing voxels with the query, descending by shared
        count; ties go to the more recent (larger) id. Zero scores are
        dropped, the query itself excluded."""
        if last_keyframe_id not in self.per_keyframe:
            raise KeyError(f"keyframe {last_keyframe_id} not indexed")
        counts: dict[int, int] = {}
        for cell in self.per_keyframe[last_keyframe_id]:
            for member in self.cells.get(cell, ()):
                if member != last_keyframe_id:
                    counts[member] = counts.get(member, 0) + 1
        ranked = sorted(counts.items(), key=lambda item: (-item[1], -item[0]))
        return [OverlapScore(kf, score) for kf, score in ranked[:n]]

    def check_consistency(self) -> bool:
        """Bidirectional-map invariant; used by tests."""
        for kf, voxels in self.per_keyframe.items():
            for cell in voxels:
                if kf not in self.cells.get(cell, set()):
                    return False
        for cell, members in self.cells.items():
            if not members:
                return False
            for kf in members:
                if cell not in self.per_keyframe.get(kf, set()):
                    return False
        return True
