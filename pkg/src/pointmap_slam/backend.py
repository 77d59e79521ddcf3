"""Loop detection and global Sim(3) pose-graph optimization.

Loop retrieval ranks stored global descriptors by cosine similarity with
a temporal exclusion zone; candidates must survive geometric verification
(ray matching at the current relative pose estimate) before becoming
edges. The pose graph keeps absolute keyframe poses as nodes; every edge
carries a subsampled set of 3D correspondences between the two canonical
pointmaps and is scored with the same hybrid reprojection residual as the
frontend window.

The correspondence residual of an edge is invariant to jointly rescaling
the edge's relative scale and translation (the same gauge as the window
optimizer). A normalization pass pins each spanning-tree edge's scale
against the stored point magnitudes before every linearization, which
keeps the Gauss-Newton iteration off the flat directions.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraphError
from .geometry import PinholeIntrinsics, Sim3, sim3_exp
from .matching import CorrespondenceSet, KeyframeRecord, ray_match
from .optimizer import (
    OptimizerConfig,
    PairObservations,
    _confidence_factor,
    batch_residual_heads,
    batch_residuals,
    fix_pair_scale_gauge,
    huber_cost,
    huber_weight,
    point_action_jacobians,
)


@dataclass(frozen=True)
class LoopCandidate:
    keyframe_id: int
    similarity: float


class DescriptorDatabase:
    """Ordered store of (keyframe id, unit descriptor, insertion index)."""

    def __init__(self):
        self.ids: list[int] = []
        self.vectors: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.ids)

    def append(self, keyframe_id: int, descriptor: np.ndarray) -> None:
        self.ids.append(int(keyframe_id))
        self.vectors.append(np.asarray(descriptor, dtype=float))

    def query(
        self,
        descriptor: np.ndarray,
        temporal_exclusion: int = 20,
        sim_min: float = 0.9,
        top: int = 2,
    ) -> list[LoopCandidate]:
        """Top matches by cosine similarity, skipping entries within
        ``temporal_exclusion`` insertion slots of the query (which sits at
        the next insertion index). Unusable descriptors match nothing."""
        if not self.ids:
            return []
        descriptor = np.asarray(descriptor, dtype=float)
        if np.linalg.norm(descriptor) < 0.5:
            return []
        query_index = len(self.ids)
        sims = np.array([float(v @ descriptor) for v in self.vectors])
        order = np.argsort(-sims, kind="stable")
        out = []
        for idx in order:
            if query_index - idx < temporal_exclusion:
                continue
            if sims[idx] < sim_min:
                break
            out.append(LoopCandidate(self.ids[idx], float(sims[idx])))
            if len(out) == top:
                break
        return out


def loop_detect(
    keyframe_id: int,
    descriptor: np.ndarray,
    db: DescriptorDatabase,
    temporal_exclusion: int = 20,
    sim_min: float = 0.9,
) -> list[LoopCandidate]:
    """Retrieve up to two loop candidates, then append the query
    descriptor for future queries."""
    candidates = db.query(descriptor, temporal_exclusion, sim_min, top=2)
    db.append(keyframe_id, descriptor)
    return candidates


@dataclass
class GraphEdge:
    source: int
    target: int
    kind: str  # "sequential" or "loop"
    source_points: np.ndarray  # (n, 3) in source canonical frame
    target_points: np.ndarray  # (n, 3) in target canonical frame
    weights: np.ndarray
    intrinsics: PinholeIntrinsics

    def as_pair(self) -> PairObservations:
        return PairObservations(
            self.source, self.target, self.source_points, self.target_points,
            self.weights, self.intrinsics,
        )


@dataclass
class PoseGraph:
    nodes: dict[int, Sim3] = field(default_factory=dict)
    edges: list[GraphEdge] = field(default_factory=list)
    gauge_node: int | None = None

    def add_node(self, keyframe_id: int, pose: Sim3) -> None:
        if self.gauge_node is None:
            self.gauge_node = keyframe_id
        self.nodes[keyframe_id] = pose

    def has_edge(self, i: int, j: int) -> bool:
        return any(
            (e.source == i and e.target == j) or (e.source == j and e.target == i)
            for e in self.edges
        )

    def loop_edge_count(self) -> int:
        return sum(1 for e in self.edges if e.kind == "loop")


def edge_from_matches(
    source: KeyframeRecord,
    target: KeyframeRecord,
    matches: CorrespondenceSet,
    kind: str,
    cap: int = 1024,
) -> GraphEdge:
    """Snapshot an edge's 3D correspondences from the two canonical maps."""
    sub = matches.subsample(cap)
    sp = sub.source_pixels
    tp = sub.target_pixels
    return GraphEdge(
        source=source.id,
        target=target.id,
        kind=kind,
        source_points=source.pointmap[sp[:, 0], sp[:, 1]].copy(),
        target_points=target.pointmap[tp[:, 0], tp[:, 1]].copy(),
        weights=sub.weights.copy(),
        intrinsics=source.intrinsics,
    )


def add_edges(
    graph: PoseGraph,
    keyframe: KeyframeRecord,
    records: dict[int, KeyframeRecord],
    sequential_matches: CorrespondenceSet | None,
    loop_candidates: list[LoopCandidate],
    loop_verify_ratio: float = 0.3,
    edge_cap: int = 1024,
    match_kwargs: dict | None = None,
) -> list[GraphEdge]:
    """Insert the new keyframe's sequential edge (reusing frontend
    matches) and geometrically verified loop edges. Candidates whose
    fresh ray match falls below the verification ratio are dropped.
    Returns the edges actually added."""
    if keyframe.id not in graph.nodes:
        raise KeyError(f"keyframe {keyframe.id} is not a graph node")
    added = []
    if sequential_matches is not None and len(sequential_matches):
        src = records[sequential_matches.source_frame]
        tgt = records[sequential_matches.target_frame]
        if not graph.has_edge(src.id, tgt.id):
            edge = edge_from_matches(src, tgt, sequential_matches, "sequential", edge_cap)
            graph.edges.append(edge)
            added.append(edge)
    kwargs = match_kwargs or {}
    for cand in loop_candidates:
        if cand.keyframe_id not in graph.nodes or graph.has_edge(
            cand.keyframe_id, keyframe.id
        ):
            continue
        cand_rec = records[cand.keyframe_id]
        rel = cand_rec.pose.inverse().compose(keyframe.pose)
        matches = ray_match(
            cand_rec.pointmap, cand_rec.confidence, cand_rec.intrinsics,
            keyframe.pointmap, keyframe.confidence, rel,
            source_frame=cand_rec.id, target_frame=keyframe.id, **kwargs,
        )
        if matches.valid_ratio < loop_verify_ratio or len(matches) == 0:
            continue
        edge = edge_from_matches(cand_rec, keyframe, matches, "loop", edge_cap)
        graph.edges.append(edge)
        added.append(edge)
    return added


def _connected_components(node_ids: list[int], edges: list[GraphEdge]):
    parent = {n: n for n in node_ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        if e.source in parent and e.target in parent:
            ra, rb = find(e.source), find(e.target)
            if ra != rb:
                parent[ra] = rb
    groups: dict[int, list[int]] = {}
    for n in node_ids:
        groups.setdefault(find(n), []).append(n)
    return list(groups.values())


def _spanning_tree(graph: PoseGraph) -> list[tuple[GraphEdge, bool]]:
    """BFS tree from the gauge node: (edge, forward) pairs in visit order,
    forward meaning the edge's source is the parent. Sequential edges are
    preferred so the odometry backbone anchors the scale field and loop
    edges only ever close cycles."""
    adjacency: dict[int, list[tuple[GraphEdge, bool]]] = {n: [] for n in graph.nodes}
    for e in graph.edges:
        adjacency[e.source].append((e, True))
        adjacency[e.target].append((e, False))
    for lists in adjacency.values():
        lists.sort(key=lambda item: item[0].kind != "sequential")
    seen = {graph.gauge_node}
    order = []
    queue = deque([graph.gauge_node])
    while queue:
        node = queue.popleft()
        for edge, forward in adjacency[node]:
            child = edge.target if forward else edge.source
            if child not in seen:
                seen.add(child)
                order.append((edge, forward))
                queue.append(child)
    return order


def _normalize_tree_scales(
    graph: PoseGraph, poses: dict[int, Sim3], config: OptimizerConfig
) -> None:
    """Pin each spanning-tree edge's scale gauge against its stored
    correspondence magnitudes (cost-invariant reparameterization)."""
    for edge, forward in _spanning_tree(graph):
        parent = edge.source if forward else edge.target
        child = edge.target if forward else edge.source
        rel = poses[edge.source].inverse().compose(poses[edge.target])
        fixed = fix_pair_scale_gauge(edge.as_pair(), rel, config)
        if forward:
            poses[child] = poses[parent].compose(fixed)
        else:
            poses[child] = poses[parent].compose(fixed.inverse())


def _edge_rows(edge: GraphEdge, poses: dict[int, Sim3], config: OptimizerConfig,
               with_jacobian: bool):
    """Whitened residual rows of one edge and, on request, the Jacobian
    blocks with respect to the two node perturbations (J_i = -J_j)."""
    t_i = poses[edge.source]
    t_j = poses[edge.target]
    rel = t_i.inverse().compose(t_j)
    lam = config.lambda_pix(edge.intrinsics)
    sigma0 = config.sigma0(edge.intrinsics)
    r, active, y = batch_residuals(
        edge.source_points, edge.target_points, rel, edge.intrinsics, lam,
        config.residual_mode,
    )
    factor = _confidence_factor(edge.weights, config.weight_convention) / sigma0
    e = np.where(active, r * factor[:, None], 0.0)
    norms = np.linalg.norm(e, axis=1)
    cost = huber_cost(norms, config.huber_delta)
    if not with_jacobian:
        return None, None, cost
    hw = np.sqrt(huber_weight(norms, config.huber_delta))
    rows = (e * hw[:, None]).reshape(-1)
    heads, head_active = batch_residual_heads(y, edge.intrinsics, lam, config.residual_mode)
    # y = T_i^-1 T_j x; left-perturbing T_j moves the world point z = T_j x
    # by [I | -z^ | z], pulled back through T_i^-1; perturbing T_i gives
    # the negative of the same block.
    z = t_j.apply(edge.target_points)
    pullback = t_i.rotation.T / t_i.scale
    dy_dtau = np.einsum("ab,nbc->nac", pullback, point_action_jacobians(z))
    jac = np.einsum("nab,nbc->nac", heads, dy_dtau)
    jac = jac * (factor * hw)[:, None, None]
    jac = np.where((active & head_active)[:, :, None], jac, 0.0)
    return rows, jac.reshape(-1, 7), cost


def _total_cost(graph: PoseGraph, poses: dict[int, Sim3], config) -> float:
    return sum(_edge_rows(e, poses, config, False)[2] for e in graph.edges)


def pgo_solve(
    graph: PoseGraph,
    config: OptimizerConfig | None = None,
    max_iters: int = 25,
    node_step_tol: float = 1e-6,
) -> dict[int, Sim3]:
    """Robust Gauss-Newton over all node poses with the gauge node fixed.

    Minimizes the Huber cost of every edge's correspondence residuals
    under the relative transforms implied by the absolute poses. Steps
    are accepted by backtracking on the total cost; iteration stops when
    the largest node update drops below ``node_step_tol`` or after
    ``max_iters`` rounds. Updated poses are written back to the graph and
    returned; the gauge node's pose is bit-identical to its input.
    """
    config = config or OptimizerConfig()
    if len(graph.nodes) < 2:
        raise ValueError("pose graph needs at least 2 nodes")
    node_ids = sorted(graph.nodes)
    components = _connected_components(node_ids, graph.edges)
    if len(components) > 1:
        others = [c for c in components if graph.gauge_node not in c]
        raise DisconnectedGraphError(
            f"disconnected component(s): {sorted(others[0])}"
        )
    free = [n for n in node_ids if n != graph.gauge_node]
    index = {n: i for i, n in enumerate(free)}
    poses = dict(graph.nodes)
    # Two rounds of (gauge normalization, damped GN): the first pins the
    # scale field from the edge data and corrects the observable error,
    # the second repins the gauge at the converged observables and
    # polishes. Normalization never runs inside the descent loop, so the
    # accepted cost sequence is monotone within each round.
    _normalize_tree_scales(graph, poses, config)
    poses = _gn_descent(graph, poses, free, index, config, max_iters, node_step_tol)
    _normalize_tree_scales(graph, poses, config)
    poses = _gn_descent(
        graph, poses, free, index, config, max(4, max_iters // 4), node_step_tol
    )
    graph.nodes.update(poses)
    return poses


def _gn_descent(
    graph: PoseGraph,
    poses: dict[int, Sim3],
    free: list[int],
    index: dict[int, int],
    config: OptimizerConfig,
    max_iters: int,
    node_step_tol: float,
) -> dict[int, Sim3]:
    """Backtracking Gauss-Newton rounds with minimum-norm steps.

    The normal equations carry one flat direction per spanning-tree edge
    (the correspondence residuals cannot see a joint rescaling of an
    edge's relative scale and translation), so the step is computed by a
    truncated-SVD solve: null components never move and the scale field
    stays where the normalization pinned it.
    """
    cost = _total_cost(graph, poses, config)
    for _ in range(max_iters):
        dim = 7 * len(free)
        h = np.zeros((dim, dim))
        g = np.zeros(dim)
        for edge in graph.edges:
            rows, jac_j, _ = _edge_rows(edge, poses, config, True)
            jac_i = -jac_j
            si = index.get(edge.source)
            sj = index.get(edge.target)
            if sj is not None:
                h[7 * sj : 7 * sj + 7, 7 * sj : 7 * sj + 7] += jac_j.T @ jac_j
                g[7 * sj : 7 * sj + 7] += jac_j.T @ rows
            if si is not None:
                h[7 * si : 7 * si + 7, 7 * si : 7 * si + 7] += jac_i.T @ jac_i
                g[7 * si : 7 * si + 7] += jac_i.T @ rows
            if si is not None and sj is not None:
                cross = jac_i.T @ jac_j
                h[7 * si : 7 * si + 7, 7 * sj : 7 * sj + 7] += cross
                h[7 * sj : 7 * sj + 7, 7 * si : 7 * si + 7] += cross.T
        if not np.all(np.isfinite(h)):
            raise DisconnectedGraphError("non-finite normal equations")
        delta, *_ = np.linalg.lstsq(h, -g, rcond=1e-10)
        steps = delta.reshape(-1, 7)
        max_step = float(np.linalg.norm(steps, axis=1).max()) if len(free) else 0.0
        if max_step < node_step_tol:
            break
        accepted = False
        alpha = 1.0
        while alpha >= 1.0 / 256.0:
            trial = dict(poses)
            for n, i in index.items():
                trial[n] = sim3_exp(alpha * steps[i]).compose(poses[n])
            trial_cost = _total_cost(graph, trial, config)
            if trial_cost < cost:
                poses = trial
                cost = trial_cost
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
    return poses
