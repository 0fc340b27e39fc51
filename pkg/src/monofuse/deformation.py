"""Embedded deformation graph over the surfel map.

Nodes are sampled from surfels in insertion-time order, connected to
their temporal neighbors, and carry per-node affine transforms (A, b).
Surfels bind to the spatially nearest nodes inside a temporal window of
their own timestamp; a weighted blend of node transforms moves them.
Optimization trades off rigidity of the A's, smoothness along graph
edges, loop-closing surface constraints, pinning of the inactive map and
historical constraints from earlier closures.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .camera import CameraIntrinsics
from .errors import GraphTooSmallError, NoConstraintsError, OptimizationFailedError
from .se3 import RigidTransform
from .surfels import SurfelMap


@dataclass(frozen=True)
class DeformNode:
    """Value view of one graph node."""

    position: np.ndarray
    timestamp: int
    affine_a: np.ndarray
    affine_b: np.ndarray
    neighbors: tuple[int, ...]


@dataclass
class SurfaceConstraint:
    """Surface-to-surface correspondence driving the deformation.

    pinned constraints have destination == source and hold the inactive
    map still; historical ones re-assert previous closures.
    """

    source: np.ndarray
    destination: np.ndarray
    source_time: int
    destination_time: int
    pinned: bool = False
    historical: bool = False

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(3)
        self.destination = np.asarray(self.destination, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.source)) and np.all(np.isfinite(self.destination))):
            raise ValueError("constraint points must be finite")
        if self.pinned and not np.allclose(self.source, self.destination):
            raise ValueError("pinned constraints must have destination == source")


class DeformationGraph:
    """Node arrays plus connectivity; rebuilt fresh for every deformation event."""

    def __init__(self, positions, timestamps, k_influence: int = 4, time_window: int = 100):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("node timestamps must be non-decreasing")
        n = len(self.positions)
        self.affine_a = np.tile(np.eye(3), (n, 1, 1))
        self.affine_b = np.zeros((n, 3))
        self.neighbors = np.full((n, 0), -1, dtype=np.int64)
        self.k_influence = int(k_influence)
        self.time_window = int(time_window)

    def __len__(self):
        return len(self.positions)

    def node(self, i: int) -> DeformNode:
        nb = tuple(int(j) for j in self.neighbors[i] if j >= 0)
        return DeformNode(
            self.positions[i].copy(), int(self.timestamps[i]),
            self.affine_a[i].copy(), self.affine_b[i].copy(), nb,
        )

    def set_parameters(self, x: np.ndarray):
        x = x.reshape(len(self), 12)
        self.affine_a = x[:, :9].reshape(-1, 3, 3).copy()
        self.affine_b = x[:, 9:].copy()

    def parameters(self) -> np.ndarray:
        return np.concatenate(
            [self.affine_a.reshape(-1, 9), self.affine_b], axis=1
        ).reshape(-1)


def sample_graph(
    surfel_map: SurfelMap,
    rho: int,
    min_nodes: int = 16,
    k_neighbors: int = 4,
    k_influence: int = 4,
    time_window: int = 100,
) -> DeformationGraph:
    """Sample every rho-th surfel (ordered by insertion time) as a node.

    rho shrinks automatically so at least min_nodes nodes are produced;
    raises GraphTooSmallError when even that leaves fewer than
    k_neighbors + 1 nodes.
    """
    n = len(surfel_map)
    if n == 0:
        raise GraphTooSmallError("empty map")
    order = np.lexsort((np.arange(n), surfel_map.t_init))
    rho_eff = max(1, min(int(rho), n // max(min_nodes, 1) or 1))
    picks = order[::rho_eff]
    if len(picks) < k_neighbors + 1:
        raise GraphTooSmallError(
            f"{len(picks)} nodes < required {k_neighbors + 1}; deformation skipped"
        )
    return DeformationGraph(
        positions=surfel_map.positions[picks].copy(),
        timestamps=surfel_map.t_init[picks].copy(),
        k_influence=k_influence,
        time_window=time_window,
    )


def connect_nodes(graph: DeformationGraph, k_n: int, max_time_gap: int | None = None):
    """Connect each node to its k_n nearest list-index neighbors.

    The index window is balanced before/after and clamped at the ends.
    Edges spanning more than max_time_gap frames are dropped so separate
    passes over the same surface stay insulated (padding uses -1).
    """
    m = len(graph)
    if m < k_n + 1:
        raise GraphTooSmallError(f"{m} nodes cannot support {k_n} neighbors")
    if max_time_gap is None:
        max_time_gap = graph.time_window
    nb = np.full((m, k_n), -1, dtype=np.int64)
    for i in range(m):
        lo = min(max(i - k_n // 2, 0), m - 1 - k_n)
        window = [j for j in range(lo, lo + k_n + 1) if j != i]
        keep = [
            j for j in window
            if abs(int(graph.timestamps[j]) - int(graph.timestamps[i])) <= max_time_gap
        ]
        nb[i, : len(keep)] = keep
    graph.neighbors = nb


def influence_weights(
    p: np.ndarray, t: int, graph: DeformationGraph, k: int | None = None
) -> tuple[list[tuple[int, float]], bool]:
    """Skinning weights of point p with timestamp t.

    Candidates are nodes within the graph's temporal window of t; among
    them the k+1 spatially nearest define d_max and the k nearest get
    weights (1 - d/d_max)^2, normalized to sum 1. Returns (pairs,
    widened); widened is True when the window had to expand to all nodes.
    """
    if k is None:
        k = graph.k_influence
    idx, w, widened = _skin_batch(
        np.asarray(p, dtype=np.float64).reshape(1, 3),
        np.array([t], dtype=np.int64),
        graph,
        k,
    )
    pairs = [(int(i), float(wi)) for i, wi in zip(idx[0], w[0]) if i >= 0 and wi > 0]
    return pairs, bool(widened[0])


def _skin_batch(points, times, graph, k):
    """Vectorized influence computation: (idx (N,k), w (N,k), widened (N,))."""
    n = len(points)
    idx = np.full((n, k), -1, dtype=np.int64)
    w = np.zeros((n, k))
    ts = graph.timestamps
    lo = np.searchsorted(ts, times - graph.time_window, side="left")
    hi = np.searchsorted(ts, times + graph.time_window, side="right")
    widened = (hi - lo) == 0
    lo = np.where(widened, 0, lo)
    hi = np.where(widened, len(ts), hi)

    ranges = np.stack([lo, hi], axis=1)
    uniq, inverse = np.unique(ranges, axis=0, return_inverse=True)
    for gi, (a, b) in enumerate(uniq):
        sel = np.nonzero(inverse == gi)[0]
        cand = np.arange(a, b)
        d = cdist(points[sel], graph.positions[a:b])
        c = len(cand)
        kk = min(k, c)
        if c > kk:
            part = np.argpartition(d, kk, axis=1)
            near = part[:, :kk]
            d_near = np.take_along_axis(d, near, axis=1)
            order = np.argsort(d_near, axis=1)
            near = np.take_along_axis(near, order, axis=1)
            d_near = np.take_along_axis(d_near, order, axis=1)
            # d_max is the distance to the (k+1)-th nearest candidate.
            dmax = np.max(np.take_along_axis(d, part[:, : kk + 1], axis=1), axis=1)
        else:
            order = np.argsort(d, axis=1)
            near = order
            d_near = np.take_along_axis(d, order, axis=1)
            dmax = 1.1 * np.maximum(d_near.max(axis=1), 1e-12)
        dmax = np.maximum(dmax, 1e-12)
        weights = (1.0 - d_near / dmax[:, None]) ** 2
        total = weights.sum(axis=1)
        flat = total < 1e-12
        weights[flat] = 1.0 / kk
        total[flat] = 1.0
        weights /= total[:, None]
        idx[sel, :kk] = cand[near]
        w[sel, :kk] = weights
    return idx, w, widened


def deform_points(points, idx, w, graph):
    """phi(p) = sum_j w_j (A_j (p - g_j) + g_j + b_j) with padded (idx, w)."""
    safe = np.maximum(idx, 0)
    g = graph.positions[safe]
    a = graph.affine_a[safe]
    b = graph.affine_b[safe]
    rel = points[:, None, :] - g
    moved = np.einsum("nkij,nkj->nki", a, rel) + g + b
    return np.einsum("nk,nki->ni", w, moved)


def _inverse_transpose(a_all: np.ndarray) -> tuple[np.ndarray, int]:
    """A^-T per node via cofactor columns; near-singular nodes are
    normalized by the cofactor magnitude instead and counted."""
    c0, c1, c2 = a_all[:, :, 0], a_all[:, :, 1], a_all[:, :, 2]
    cof = np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=2)
    det = np.einsum("ni,ni->n", c0, np.cross(c1, c2))
    bad = np.abs(det) < 1e-12
    scale = np.where(bad, np.linalg.norm(cof.reshape(len(cof), -1), axis=1) + 1e-300, det)
    return cof / scale[:, None, None], int(bad.sum())


def apply_graph(graph: DeformationGraph, surfel_map: SurfelMap) -> int:
    """Deform every surfel in place; returns the flagged singular-node count.

    Binding uses each surfel's last-fusion timestamp, the same basis the
    constraints use, so optimized constraints land where apply puts them.
    Colors, timestamps and confidences are untouched.
    """
    n = len(surfel_map)
    if n == 0:
        return 0
    pts = surfel_map.positions.copy()
    times = surfel_map.t_last.copy()
    idx, w, _ = _skin_batch(pts, times, graph, graph.k_influence)
    new_pos = deform_points(pts, idx, w, graph)

    inv_t, flagged = _inverse_transpose(graph.affine_a)
    safe = np.maximum(idx, 0)
    per_node = np.einsum("nkij,nj->nki", inv_t[safe], surfel_map.normals)
    blended = np.einsum("nk,nki->ni", w, per_node)
    norms = np.linalg.norm(blended, axis=1)
    ok = norms > 1e-12
    blended[ok] /= norms[ok, None]
    blended[~ok] = surfel_map.normals[~ok]

    surfel_map.positions[:] = new_pos
    surfel_map.normals[:] = blended
    return flagged


# -- constraints --------------------------------------------------------------------


def _grid_subsample(view, max_count: int) -> np.ndarray:
    """Unique surfel ids from a uniform pixel grid over the view's valid pixels."""
    valid = view.valid
    count = int(valid.sum())
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    stride = max(1, int(np.ceil(np.sqrt(count / max_count))))
    mask = np.zeros_like(valid)
    mask[::stride, ::stride] = True
    ids = view.index[valid & mask]
    if len(ids) == 0:
        ids = view.index[valid][:max_count]
    return np.unique(ids[:max_count * 4])[:max_count]


def build_loop_constraints(
    surfel_map: SurfelMap,
    pose: RigidTransform,
    pose_corrected: RigidTransform,
    k: CameraIntrinsics,
    max_constraints: int = 512,
) -> list[SurfaceConstraint]:
    """Surface constraints for a loop closure pose pair.

    Active surfels seen from the uncorrected pose become sources; their
    destinations apply the relative correction (corrected o uncorrected^-1)
    in the world frame. Inactive surfels seen from the corrected pose
    produce pinning constraints and supply destination timestamps.
    """
    active_view = surfel_map.predict_view(pose, k, which="active", min_confidence=0.0)
    act_ids = _grid_subsample(active_view, max_constraints)
    if len(act_ids) == 0:
        raise NoConstraintsError("no active surfels visible at the loop pose")

    inactive_view = surfel_map.predict_view(
        pose_corrected, k, which="inactive", min_confidence=0.0
    )
    inact_valid = inactive_view.valid
    if inact_valid.any():
        inact_times = surfel_map.t_last[inactive_view.index[inact_valid]]
        fallback_time = int(np.median(inact_times))
    else:
        fallback_time = int(surfel_map.t_last.min()) if len(surfel_map) else 0

    correction = pose_corrected @ pose.inverse()
    constraints = []
    sources = surfel_map.positions[act_ids]
    dests = correction.apply(sources)
    src_times = surfel_map.t_last[act_ids]
    # Destination timestamp: the inactive surfel rendered at the pixel the
    # corrected source projects to, when there is one.
    inv = pose_corrected.inverse()
    p_cam = inv.apply(dests)
    for i in range(len(act_ids)):
        dt = fallback_time
        if p_cam[i, 2] > 1e-6:
            u = int(round(k.fx * p_cam[i, 0] / p_cam[i, 2] + k.cx))
            v = int(round(k.fy * p_cam[i, 1] / p_cam[i, 2] + k.cy))
            if 0 <= u < k.width and 0 <= v < k.height and inactive_view.index[v, u] >= 0:
                dt = int(surfel_map.t_last[inactive_view.index[v, u]])
        constraints.append(
            SurfaceConstraint(
                source=sources[i], destination=dests[i],
                source_time=int(src_times[i]), destination_time=dt,
            )
        )

    pin_ids = _grid_subsample(inactive_view, max_constraints)
    for i in pin_ids:
        p = surfel_map.positions[i]
        t = int(surfel_map.t_last[i])
        constraints.append(
            SurfaceConstraint(source=p, destination=p, source_time=t,
                              destination_time=t, pinned=True)
        )
    return constraints


# -- optimization --------------------------------------------------------------------


@dataclass
class DeformParams:
    w_rot: float = 1.0
    w_reg: float = 10.0
    w_con: float = 100.0
    w_pin: float = 100.0
    w_rel: float = 10.0
    max_iters: int = 50
    rel_tol: float = 1e-6
    fail_rms: float = 0.3
    max_halvings: int = 10


@dataclass
class OptimizeResult:
    final_cost: float
    converged: bool
    iterations: int
    constraint_rms: float
    constraint_residuals: np.ndarray


def rot_residuals(a_all: np.ndarray) -> np.ndarray:
    """Rigidity: vec(A^T A - I) per node, zero iff every A is orthonormal."""
    return (np.einsum("nji,njk->nik", a_all, a_all) - np.eye(3)).reshape(len(a_all), 9)


def _rot_jacobian(a_all: np.ndarray) -> np.ndarray:
    """(M, 9, 9) Jacobian of rot_residuals wrt row-major A entries."""
    m = len(a_all)
    jac = np.zeros((m, 9, 9))
    for k in range(3):
        for l in range(3):
            row = 3 * k + l
            for mm in range(3):
                jac[:, row, 3 * mm + k] += a_all[:, mm, l]
                jac[:, row, 3 * mm + l] += a_all[:, mm, k]
    return jac


def reg_residuals(graph: DeformationGraph) -> tuple[np.ndarray, np.ndarray]:
    """Smoothness residuals per directed edge and the edge list (j, n)."""
    edges = []
    for j in range(len(graph)):
        for nb in graph.neighbors[j]:
            if nb >= 0:
                edges.append((j, int(nb)))
    if not edges:
        return np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64)
    e = np.array(edges, dtype=np.int64)
    gj = graph.positions[e[:, 0]]
    gn = graph.positions[e[:, 1]]
    aj = graph.affine_a[e[:, 0]]
    bj = graph.affine_b[e[:, 0]]
    bn = graph.affine_b[e[:, 1]]
    r = np.einsum("nij,nj->ni", aj, gn - gj) + gj + bj - gn - bn
    return r, e


@dataclass
class _ConstraintBlock:
    sources: np.ndarray
    dests: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    weight: float


def _prepare_blocks(graph, constraints, params):
    groups = {"con": [], "pin": [], "rel": []}
    for c in constraints:
        key = "rel" if c.historical else ("pin" if c.pinned else "con")
        groups[key].append(c)
    blocks = {}
    for key, items in groups.items():
        if not items:
            blocks[key] = None
            continue
        pts = np.stack([c.source for c in items])
        dst = np.stack([c.destination for c in items])
        times = np.array([c.source_time for c in items], dtype=np.int64)
        idx, w, _ = _skin_batch(pts, times, graph, graph.k_influence)
        weight = {"con": params.w_con, "pin": params.w_pin, "rel": params.w_rel}[key]
        blocks[key] = _ConstraintBlock(pts, dst, idx, w, weight)
    return blocks


def _block_residuals(graph, block):
    return deform_points(block.sources, block.idx, block.w, graph) - block.dests


def _fill_constraint_jacobian(jac, row0, block, graph):
    n, k = block.idx.shape
    rows = row0 + 3 * np.arange(n)
    for slot in range(k):
        ids = block.idx[:, slot]
        wgt = block.w[:, slot]
        ok = ids >= 0
        if not ok.any():
            continue
        rel = block.sources - graph.positions[np.maximum(ids, 0)]
        cols_a = 12 * ids
        for a in range(3):
            rr = rows[ok] + a
            for b in range(3):
                np.add.at(jac, (rr, cols_a[ok] + 3 * a + b), wgt[ok] * rel[ok, b])
            np.add.at(jac, (rr, cols_a[ok] + 9 + a), wgt[ok])


def total_cost(graph: DeformationGraph, constraints, params: DeformParams) -> float:
    """Weighted sum of all five energy terms at the graph's current parameters."""
    blocks = _prepare_blocks(graph, constraints, params)
    return _cost_from_blocks(graph, blocks, params)


def _cost_from_blocks(graph, blocks, params):
    cost = params.w_rot * float((rot_residuals(graph.affine_a) ** 2).sum())
    r_reg, _ = reg_residuals(graph)
    cost += params.w_reg * float((r_reg**2).sum())
    for key in ("con", "pin", "rel"):
        blk = blocks[key]
        if blk is not None:
            cost += blk.weight * float((_block_residuals(graph, blk) ** 2).sum())
    return cost


def optimize_graph(
    graph: DeformationGraph,
    constraints: list[SurfaceConstraint],
    params: DeformParams | None = None,
) -> OptimizeResult:
    """Gauss-Newton on the per-node affine transforms.

    Minimizes w_rot E_rot + w_reg E_reg + w_con E_con + w_pin E_pin +
    w_rel E_rel with dense normal equations, step halving on cost
    increase, and termination on relative cost change < rel_tol. Raises
    OptimizationFailedError when the cost turns non-finite or the loop
    constraints end above the per-constraint RMS failure threshold.
    """
    params = params or DeformParams()
    if not constraints:
        raise NoConstraintsError("need at least one constraint")
    m = len(graph)
    blocks = _prepare_blocks(graph, constraints, params)

    n_rows = 9 * m
    r_reg0, edges = reg_residuals(graph)
    n_rows += 3 * len(edges)
    offsets = {}
    for key in ("con", "pin", "rel"):
        if blocks[key] is not None:
            offsets[key] = n_rows
            n_rows += 3 * len(blocks[key].sources)

    cost = _cost_from_blocks(graph, blocks, params)
    iters = 0
    for _ in range(params.max_iters):
        jac = np.zeros((n_rows, 12 * m))
        res = np.zeros(n_rows)

        sw = np.sqrt(params.w_rot)
        r_rot = rot_residuals(graph.affine_a)
        j_rot = _rot_jacobian(graph.affine_a)
        for node in range(m):
            rows = slice(9 * node, 9 * node + 9)
            res[rows] = sw * r_rot[node]
            jac[rows, 12 * node: 12 * node + 9] = sw * j_rot[node]

        r_reg, edges = reg_residuals(graph)
        sw = np.sqrt(params.w_reg)
        base = 9 * m
        for ei, (j, nb) in enumerate(edges):
            rows = slice(base + 3 * ei, base + 3 * ei + 3)
            res[rows] = sw * r_reg[ei]
            rel = graph.positions[nb] - graph.positions[j]
            for a in range(3):
                jac[base + 3 * ei + a, 12 * j + 3 * a: 12 * j + 3 * a + 3] = sw * rel
                jac[base + 3 * ei + a, 12 * j + 9 + a] = sw
                jac[base + 3 * ei + a, 12 * nb + 9 + a] = -sw
        for key in ("con", "pin", "rel"):
            blk = blocks[key]
            if blk is None:
                continue
            sw = np.sqrt(blk.weight)
            rr = _block_residuals(graph, blk)
            row0 = offsets[key]
            res[row0: row0 + 3 * len(rr)] = sw * rr.reshape(-1)
            _fill_constraint_jacobian(jac, row0, blk, graph)
            jac[row0: row0 + 3 * len(rr)] *= sw

        hess = jac.T @ jac
        grad = jac.T @ res
        try:
            step = np.linalg.solve(hess + 1e-9 * np.eye(12 * m), -grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break

        x0 = graph.parameters()
        accepted = False
        scale = 1.0
        for _h in range(params.max_halvings):
            graph.set_parameters(x0 + scale * step)
            c2 = _cost_from_blocks(graph, blocks, params)
            if np.isfinite(c2) and c2 <= cost:
                accepted = True
                break
            scale *= 0.5
        iters += 1
        if not accepted:
            graph.set_parameters(x0)
            break
        improvement = cost - c2
        cost = c2
        if improvement < params.rel_tol * max(cost, 1e-12):
            break

    blk = blocks["con"]
    resid = np.linalg.norm(_block_residuals(graph, blk), axis=1) if blk is not None else np.zeros(0)
    rms = float(np.sqrt((resid**2).mean())) if len(resid) else 0.0
    if not np.isfinite(cost) or rms > params.fail_rms:
        raise OptimizationFailedError(
            f"constraint RMS {rms:.3f} m exceeds {params.fail_rms} m"
        )
    return OptimizeResult(
        final_cost=cost, converged=True, iterations=iters,
        constraint_rms=rms, constraint_residuals=resid,
    )


# -- historical constraints ------------------------------------------------------------


class HistoricalStore:
    """FIFO-capped pool of satisfied constraints from previous closures."""

    def __init__(self, cap: int = 2048):
        self.cap = int(cap)
        self.constraints: list[SurfaceConstraint] = []

    def __len__(self):
        return len(self.constraints)

    def store_satisfied(
        self,
        graph: DeformationGraph,
        constraints: list[SurfaceConstraint],
        residuals: np.ndarray,
        threshold: float,
    ) -> int:
        """Re-anchor satisfied loop constraints at their deformed positions.

        Each satisfied (non-pinned, non-historical) constraint is stored
        as source = destination = phi(source): a soft pin at the location
        the closure put it, preventing later deformations from undoing it.
        """
        loop = [c for c in constraints if not c.pinned and not c.historical]
        added = 0
        for c, r in zip(loop, residuals):
            if r >= threshold:
                continue
            pairs, _ = influence_weights(c.source, c.source_time, graph)
            idx = np.array([[i for i, _ in pairs]], dtype=np.int64)
            w = np.array([[wi for _, wi in pairs]])
            moved = deform_points(c.source.reshape(1, 3), idx, w, graph)[0]
            self.constraints.append(
                SurfaceConstraint(
                    source=moved, destination=moved,
                    source_time=c.source_time, destination_time=c.destination_time,
                    historical=True,
                )
            )
            added += 1
        if len(self.constraints) > self.cap:
            self.constraints = self.constraints[-self.cap:]
        return added

    def sample(self, max_count: int) -> list[SurfaceConstraint]:
        if len(self.constraints) <= max_count:
            return list(self.constraints)
        step = int(np.ceil(len(self.constraints) / max_count))
        return self.constraints[::step][:max_count]
