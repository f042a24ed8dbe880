"""Sparse pose-graph least squares and the two-step pose estimation.

A graph holds planar pose nodes with unary (global measurement) and binary
(relative transform) Gaussian edges. Optimization is Levenberg-Marquardt on
manifold residuals (relative poses with wrapped angles), solved through the
sparse normal equations. On top of it sit the pipeline stages: fused
odometry (GPS + motion edges), loop-closure detection, map-based
displacement estimation, and the loop-corrected full solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from .core import OdomSample, Pose2D, VehicleParams, compose_pose, motion_delta, relative_pose
from .errors import DataError, OptimizationError
from .gridmap import GridMap, MapConfig, MapType
from .mapping import build_map
from .mcl import (
    FilterConfig,
    Particles,
    ScoringView,
    build_instant_map,
    init_filter,
    low_variance_resample,
    point_estimate,
    score_particles,
    weighted_covariance,
)
from .preprocess import CalibTable, DataPackage, OdomCalib, prepare_cloud


@dataclass(slots=True)
class GraphNode:
    node_id: int
    pose: Pose2D
    fixed: bool = False


@dataclass(slots=True)
class UnaryEdge:
    node_id: int
    z: Pose2D
    info: np.ndarray


@dataclass(slots=True)
class BinaryEdge:
    """Constraint x_a = x_b composed with z."""

    node_a: int
    node_b: int
    z: Pose2D
    info: np.ndarray


@dataclass(frozen=True, slots=True)
class LoopClosureParams:
    tau_d: float = 3.0          # meters: revisit distance threshold
    tau_t: float = 30.0         # seconds: minimum time separation
    max_pos_gate: float = 3.0   # outlier gates vs fused odometry
    max_ang_gate: float = math.radians(15.0)

    def __post_init__(self) -> None:
        # zero thresholds are degenerate but legal (they detect nothing)
        if self.tau_d < 0 or self.tau_t < 0:
            raise ValueError("loop closure thresholds must not be negative")


@dataclass(frozen=True, slots=True)
class CovSettings:
    """Edge covariances: GPS is trusted in position only; motion edges are
    tight per step."""

    gps_xy_std: float = 0.3
    gps_theta_var: float = 1e4
    motion_xy_std: float = 0.05
    motion_theta_std: float = math.radians(0.5)

    def gps_info(self) -> np.ndarray:
        return np.diag([1.0 / self.gps_xy_std**2, 1.0 / self.gps_xy_std**2, 1.0 / self.gps_theta_var])

    def motion_info(self) -> np.ndarray:
        return np.diag(
            [1.0 / self.motion_xy_std**2, 1.0 / self.motion_xy_std**2, 1.0 / self.motion_theta_std**2]
        )


def _check_info(info: np.ndarray) -> np.ndarray:
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (3, 3) or not np.allclose(info, info.T, atol=1e-9):
        raise ValueError("information matrix must be symmetric 3x3")
    if (np.diag(info) < 0).any():
        raise ValueError("information matrix must be positive semi-definite")
    return info


class PoseGraph:
    """Node and edge container; see optimize() for the solver."""

    def __init__(self) -> None:
        self.nodes: dict[int, GraphNode] = {}
        self.unary: list[UnaryEdge] = []
        self.binary: list[BinaryEdge] = []

    def add_node(self, node_id: int, pose: Pose2D, fixed: bool = False) -> None:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node id {node_id}")
        self.nodes[node_id] = GraphNode(node_id, pose, fixed)

    def add_unary(self, node_id: int, z: Pose2D, info: np.ndarray) -> None:
        if node_id not in self.nodes:
            raise ValueError(f"unknown node id {node_id}")
        self.unary.append(UnaryEdge(node_id, z, _check_info(info)))

    def add_binary(self, node_a: int, node_b: int, z: Pose2D, info: np.ndarray) -> None:
        if node_a == node_b:
            raise ValueError("binary edge endpoints must differ")
        for nid in (node_a, node_b):
            if nid not in self.nodes:
                raise ValueError(f"unknown node id {nid}")
        self.binary.append(BinaryEdge(node_a, node_b, z, _check_info(info)))

    # ------------------------------------------------------------- file io

    def save(self, path) -> None:
        def fmt(*vals):
            return " ".join(repr(float(v)) for v in vals)

        lines = []
        for node in self.nodes.values():
            fixed = " FIXED" if node.fixed else ""
            lines.append(f"NODE {node.node_id} {fmt(node.pose.x, node.pose.y, node.pose.theta)}{fixed}")
        for e in self.unary:
            i = e.info
            lines.append(
                f"UEDGE {e.node_id} "
                + fmt(e.z.x, e.z.y, e.z.theta, i[0, 0], i[0, 1], i[0, 2], i[1, 1], i[1, 2], i[2, 2])
            )
        for e in self.binary:
            i = e.info
            lines.append(
                f"BEDGE {e.node_a} {e.node_b} "
                + fmt(e.z.x, e.z.y, e.z.theta, i[0, 0], i[0, 1], i[0, 2], i[1, 1], i[1, 2], i[2, 2])
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "PoseGraph":
        graph = PoseGraph()

        def info_from(parts):
            a, b, c, d, e, f = (float(v) for v in parts)
            return np.array([[a, b, c], [b, d, e], [c, e, f]])

        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "NODE":
                    graph.add_node(
                        int(parts[1]),
                        Pose2D(float(parts[2]), float(parts[3]), float(parts[4])),
                        fixed=len(parts) > 5 and parts[5] == "FIXED",
                    )
                elif parts[0] == "UEDGE":
                    graph.add_unary(
                        int(parts[1]),
                        Pose2D(float(parts[2]), float(parts[3]), float(parts[4])),
                        info_from(parts[5:11]),
                    )
                elif parts[0] == "BEDGE":
                    graph.add_binary(
                        int(parts[1]),
                        int(parts[2]),
                        Pose2D(float(parts[3]), float(parts[4]), float(parts[5])),
                        info_from(parts[6:12]),
                    )
                else:
                    raise DataError(f"unknown graph line {parts[0]!r}")
        return graph


# ------------------------------------------------------------------- solver


def _wrap_arr(a: np.ndarray) -> np.ndarray:
    r = np.remainder(a + math.pi, 2.0 * math.pi) - math.pi
    r[r <= -math.pi] += 2.0 * math.pi
    return r


class _Assembler:
    """Precomputed index structure for fast residual/Jacobian assembly."""

    def __init__(self, graph: PoseGraph):
        self.ids = sorted(graph.nodes)
        self.fixed = np.array([graph.nodes[i].fixed for i in self.ids])
        self.free_slot = np.full(len(self.ids), -1, dtype=np.int64)
        self.free_slot[~self.fixed] = np.arange((~self.fixed).sum())
        self.n_free = int((~self.fixed).sum())
        index = {nid: k for k, nid in enumerate(self.ids)}
        self.u_node = np.array([index[e.node_id] for e in graph.unary], dtype=np.int64)
        self.u_z = np.array([[e.z.x, e.z.y, e.z.theta] for e in graph.unary]).reshape(-1, 3)
        self.u_info = np.array([e.info for e in graph.unary]).reshape(-1, 3, 3)
        self.b_a = np.array([index[e.node_a] for e in graph.binary], dtype=np.int64)
        self.b_b = np.array([index[e.node_b] for e in graph.binary], dtype=np.int64)
        self.b_z = np.array([[e.z.x, e.z.y, e.z.theta] for e in graph.binary]).reshape(-1, 3)
        self.b_info = np.array([e.info for e in graph.binary]).reshape(-1, 3, 3)
        self._check_gauge(graph, index)

    def _check_gauge(self, graph: PoseGraph, index: dict[int, int]) -> None:
        # every connected component of free nodes must be pinned by a unary
        # edge or a fixed node somewhere
        parent = list(range(len(self.ids)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for e in graph.binary:
            a, b = find(index[e.node_a]), find(index[e.node_b])
            if a != b:
                parent[a] = b
        anchored = set()
        for e in graph.unary:
            anchored.add(find(index[e.node_id]))
        for k, nid in enumerate(self.ids):
            if graph.nodes[nid].fixed:
                anchored.add(find(k))
        for k, nid in enumerate(self.ids):
            if not graph.nodes[nid].fixed and find(k) not in anchored:
                raise OptimizationError(
                    f"unanchored gauge: node {nid} has no path to a global constraint"
                )

    def residuals(self, poses: np.ndarray):
        """Residuals and per-edge Jacobian blocks at the given poses."""
        out = {}
        if len(self.u_node):
            x = poses[self.u_node]
            cz = np.cos(self.u_z[:, 2])
            sz = np.sin(self.u_z[:, 2])
            dx = x[:, 0] - self.u_z[:, 0]
            dy = x[:, 1] - self.u_z[:, 1]
            r = np.stack([cz * dx + sz * dy, -sz * dx + cz * dy, _wrap_arr(x[:, 2] - self.u_z[:, 2])], axis=1)
            J = np.zeros((len(r), 3, 3))
            J[:, 0, 0] = cz
            J[:, 0, 1] = sz
            J[:, 1, 0] = -sz
            J[:, 1, 1] = cz
            J[:, 2, 2] = 1.0
            out["unary"] = (r, J)
        if len(self.b_a):
            xa = poses[self.b_a]
            xb = poses[self.b_b]
            cb = np.cos(xb[:, 2])
            sb = np.sin(xb[:, 2])
            dx = xa[:, 0] - xb[:, 0]
            dy = xa[:, 1] - xb[:, 1]
            ux = cb * dx + sb * dy
            uy = -sb * dx + cb * dy
            ut = xa[:, 2] - xb[:, 2]
            cz = np.cos(self.b_z[:, 2])
            sz = np.sin(self.b_z[:, 2])
            rx = cz * (ux - self.b_z[:, 0]) + sz * (uy - self.b_z[:, 1])
            ry = -sz * (ux - self.b_z[:, 0]) + cz * (uy - self.b_z[:, 1])
            rt = _wrap_arr(ut - self.b_z[:, 2])
            r = np.stack([rx, ry, rt], axis=1)
            Ju_a = np.zeros((len(r), 3, 3))
            Ju_a[:, 0, 0] = cb
            Ju_a[:, 0, 1] = sb
            Ju_a[:, 1, 0] = -sb
            Ju_a[:, 1, 1] = cb
            Ju_a[:, 2, 2] = 1.0
            Ju_b = np.zeros((len(r), 3, 3))
            Ju_b[:, 0, 0] = -cb
            Ju_b[:, 0, 1] = -sb
            Ju_b[:, 0, 2] = uy
            Ju_b[:, 1, 0] = sb
            Ju_b[:, 1, 1] = -cb
            Ju_b[:, 1, 2] = -ux
            Ju_b[:, 2, 2] = -1.0
            A = np.zeros((len(r), 3, 3))
            A[:, 0, 0] = cz
            A[:, 0, 1] = sz
            A[:, 1, 0] = -sz
            A[:, 1, 1] = cz
            A[:, 2, 2] = 1.0
            out["binary"] = (r, A @ Ju_a, A @ Ju_b)
        return out

    def cost(self, poses: np.ndarray) -> float:
        total = 0.0
        parts = self.residuals(poses)
        if "unary" in parts:
            r, _ = parts["unary"]
            total += float(np.einsum("ei,eij,ej->", r, self.u_info, r))
        if "binary" in parts:
            r, _, _ = parts["binary"]
            total += float(np.einsum("ei,eij,ej->", r, self.b_info, r))
        return total

    def normal_equations(self, poses: np.ndarray):
        parts = self.residuals(poses)
        n = 3 * self.n_free
        g = np.zeros(n)
        rows, cols, data = [], [], []

        def scatter(node_idx, block):
            slots = self.free_slot[node_idx]
            keep = slots >= 0
            if not keep.any():
                return
            base = 3 * slots[keep]
            rr = (base[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
            cc = (base[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            data.append(block[keep].ravel())

        def scatter_cross(idx_a, idx_b, block):
            sa = self.free_slot[idx_a]
            sb = self.free_slot[idx_b]
            keep = (sa >= 0) & (sb >= 0)
            if not keep.any():
                return
            ba = 3 * sa[keep]
            bb = 3 * sb[keep]
            rr = (ba[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
            cc = (bb[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            data.append(block[keep].ravel())

        def add_g(node_idx, contrib):
            slots = self.free_slot[node_idx]
            keep = slots >= 0
            if keep.any():
                np.add.at(g.reshape(-1, 3), slots[keep], contrib[keep])

        if "unary" in parts:
            r, J = parts["unary"]
            JtW = np.einsum("eji,ejk->eik", J, self.u_info)
            scatter(self.u_node, JtW @ J)
            add_g(self.u_node, np.einsum("eij,ej->ei", JtW, r))
        if "binary" in parts:
            r, Ja, Jb = parts["binary"]
            JatW = np.einsum("eji,ejk->eik", Ja, self.b_info)
            JbtW = np.einsum("eji,ejk->eik", Jb, self.b_info)
            scatter(self.b_a, JatW @ Ja)
            scatter(self.b_b, JbtW @ Jb)
            scatter_cross(self.b_a, self.b_b, JatW @ Jb)
            scatter_cross(self.b_b, self.b_a, JbtW @ Ja)
            add_g(self.b_a, np.einsum("eij,ej->ei", JatW, r))
            add_g(self.b_b, np.einsum("eij,ej->ei", JbtW, r))
        if rows:
            H = sparse.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
            ).tocsc()
        else:
            H = sparse.csc_matrix((n, n))
        return H, g


def optimize(
    graph: PoseGraph,
    max_iterations: int = 100,
    rel_tol: float = 1e-9,
    damping: float = 1e-4,
) -> dict[int, Pose2D]:
    """Levenberg-Marquardt minimization of the graph's weighted residuals.

    Updates node poses in place and returns them keyed by node id. Damping
    is multiplied by 10 on a rejected step and divided by 10 on acceptance.
    """
    asm = _Assembler(graph)
    poses = np.array([[graph.nodes[i].pose.x, graph.nodes[i].pose.y, graph.nodes[i].pose.theta] for i in asm.ids])
    if asm.n_free == 0:
        return {i: graph.nodes[i].pose for i in asm.ids}
    cost = asm.cost(poses)
    lam = damping
    free_rows = np.nonzero(~asm.fixed)[0]
    for _ in range(max_iterations):
        if cost == 0.0:
            break
        H, g = asm.normal_equations(poses)
        diag = H.diagonal()
        diag = np.where(diag > 1e-12, diag, 1e-12)
        accepted = False
        while lam < 1e12:
            A = H + sparse.diags(lam * diag)
            try:
                delta = sparse_linalg.spsolve(A, -g)
            except RuntimeError as exc:
                raise OptimizationError(f"singular normal equations: {exc}") from exc
            if not np.all(np.isfinite(delta)):
                raise OptimizationError(
                    f"singular normal equations ({asm.n_free} free nodes, cost {cost:.3e})"
                )
            trial = poses.copy()
            trial[free_rows, 0] += delta[0::3]
            trial[free_rows, 1] += delta[1::3]
            trial[free_rows, 2] = _wrap_arr(trial[free_rows, 2] + delta[2::3])
            trial_cost = asm.cost(trial)
            if trial_cost <= cost:
                poses = trial
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        improvement = (cost - trial_cost) / max(cost, 1e-300)
        cost = trial_cost
        if improvement < rel_tol:
            break
    for k, nid in enumerate(asm.ids):
        graph.nodes[nid].pose = Pose2D(poses[k, 0], poses[k, 1], poses[k, 2])
    return {nid: graph.nodes[nid].pose for nid in asm.ids}


def graph_cost(graph: PoseGraph) -> float:
    asm = _Assembler(graph)
    poses = np.array([[graph.nodes[i].pose.x, graph.nodes[i].pose.y, graph.nodes[i].pose.theta] for i in asm.ids])
    return asm.cost(poses)


# ----------------------------------------------------------- fused odometry


def build_fused_graph(
    packages: list[DataPackage],
    calib: OdomCalib | None,
    params: VehicleParams,
    cov: CovSettings,
) -> PoseGraph:
    """GPS unary edges plus motion binary edges, one node per package."""
    if not packages:
        raise DataError("no packages to fuse")
    graph = PoseGraph()
    gps_info = cov.gps_info()
    motion_info = cov.motion_info()
    init = None
    for k, pkg in enumerate(packages):
        if pkg.gps is not None:
            init = Pose2D(pkg.gps.x, pkg.gps.y, pkg.gps.theta)
        if init is None:
            init = Pose2D(0.0, 0.0, 0.0)
        graph.add_node(k, init)
        if pkg.gps is not None:
            graph.add_unary(k, Pose2D(pkg.gps.x, pkg.gps.y, pkg.gps.theta), gps_info)
    if not graph.unary:
        raise DataError("fused odometry needs at least one GPS measurement")
    for k in range(1, len(packages)):
        dt = packages[k].t - packages[k - 1].t
        if dt < 0:
            raise DataError("package timestamps must increase")
        odom = calib.apply(packages[k - 1].odom) if calib else packages[k - 1].odom
        delta = motion_delta(OdomSample(odom.v, odom.phi, odom.t), dt, params)
        graph.add_binary(k, k - 1, delta, motion_info)
    return graph


def fused_odometry(
    packages: list[DataPackage],
    calib: OdomCalib | None,
    params: VehicleParams,
    cov: CovSettings = CovSettings(),
) -> list[Pose2D]:
    """First-pass pose estimates from GPS and dead-reckoned motion."""
    graph = build_fused_graph(packages, calib, params, cov)
    solution = optimize(graph)
    return [solution[k] for k in range(len(packages))]


# ------------------------------------------------------------ loop closures


def detect_loop_closures(
    poses: list[Pose2D], times: list[float], lc: LoopClosureParams
) -> list[tuple[int, int]]:
    """(revisit index, nearest earlier index) for every revisited pose.

    A pose is a revisit when some earlier pose lies within tau_d meters and
    at least tau_t seconds in the past; the nearest such pose is matched.
    """
    if len(poses) != len(times):
        raise ValueError("poses and times must align")
    xy = np.array([[p.x, p.y] for p in poses])
    t = np.asarray(times, dtype=np.float64)
    out = []
    for k in range(len(poses)):
        old = np.nonzero(t[:k] <= t[k] - lc.tau_t)[0]
        if len(old) == 0:
            continue
        d = np.hypot(xy[old, 0] - xy[k, 0], xy[old, 1] - xy[k, 1])
        j = int(np.argmin(d))
        if d[j] < lc.tau_d:
            out.append((k, int(old[j])))
    return out


@dataclass(slots=True)
class Displacement:
    relative: Pose2D          # pose of the revisit node in the matched node's frame
    covariance: np.ndarray
    localized: Pose2D         # converged map-frame pose


def estimate_displacement(
    pkg: DataPackage,
    first_visit_map: GridMap | ScoringView,
    seed_pose: Pose2D,
    matched_pose: Pose2D,
    mcl_cfg: FilterConfig,
    params: VehicleParams,
    seed,
    lc: LoopClosureParams = LoopClosureParams(),
    odom_calib: OdomCalib | None = None,
    reflect_table: CalibTable | None = None,
    rev_period: float = 0.1,
    rounds: int = 10,
    companion_map: GridMap | ScoringView | None = None,
) -> Displacement | None:
    """Localize one revisit scan against the first-visit map.

    Runs a short annealed burst of correct/resample cycles seeded at the
    fused-odometry pose; gates the converged pose against the seed and
    returns the relative pose plus the particle covariance, or None when
    rejected. A companion map (the paper keeps occupancy and reflectivity
    first-visit maps side by side) sharpens the burst: per-round weights
    are the product of both maps' weights.
    """
    views = [first_visit_map if isinstance(first_visit_map, ScoringView) else ScoringView(first_visit_map)]
    if companion_map is not None:
        views.append(
            companion_map if isinstance(companion_map, ScoringView) else ScoringView(companion_map)
        )
    cloud = prepare_cloud(pkg, params, odom_calib, reflect_table, rev_period)
    imaps = [build_instant_map(cloud, v.config) for v in views]
    particles = init_filter(seed_pose, mcl_cfg, np.random.default_rng((seed, 0)).integers(2**31))
    rng = np.random.default_rng((seed, 1))
    for r in range(rounds):
        combined = np.ones(particles.n)
        for imap, view in zip(imaps, views):
            weights, degenerate = score_particles(particles, imap, view, mcl_cfg)
            if degenerate:
                return None
            combined *= weights
        total = combined.sum()
        if total <= 0 or not np.isfinite(total):
            return None
        particles.weight = combined / total
        if r == rounds - 1:
            break
        particles = low_variance_resample(particles, (seed, 2, r))
        # annealing jitter keeps the burst exploring between rounds
        scale = 0.6 / (r + 2)
        particles.x += rng.normal(0.0, mcl_cfg.init_pos_std * scale, particles.n)
        particles.y += rng.normal(0.0, mcl_cfg.init_pos_std * scale, particles.n)
        particles.theta = particles.theta + rng.normal(
            0.0, mcl_cfg.init_theta_std * scale, particles.n
        )
    est = point_estimate(particles)
    cov = weighted_covariance(particles)
    offset = relative_pose(est.pose, seed_pose)
    if math.hypot(offset.x, offset.y) > lc.max_pos_gate or abs(offset.theta) > lc.max_ang_gate:
        return None
    return Displacement(
        relative=relative_pose(est.pose, matched_pose),
        covariance=cov,
        localized=est.pose,
    )


@dataclass(slots=True)
class SlamResult:
    poses: list[Pose2D]
    fused: list[Pose2D]
    loops_detected: list[tuple[int, int]]
    loops_accepted: list[tuple[int, int]]
    graph: PoseGraph | None = None
    first_visit_maps: dict[MapType, GridMap] = field(default_factory=dict)


def full_slam(
    packages: list[DataPackage],
    calib: OdomCalib | None,
    params: VehicleParams,
    lc: LoopClosureParams = LoopClosureParams(),
    cov: CovSettings = CovSettings(),
    map_cfg: MapConfig = MapConfig(map_type=MapType.OCCUPANCY),
    mcl_cfg: FilterConfig | None = None,
    reflect_table: CalibTable | None = None,
    seed: int = 0,
    loop_stride: int = 1,
    rev_period: float = 0.1,
) -> SlamResult:
    """Two-step pose estimation: fused odometry, then loop-corrected solve.

    First-visit packages build occupancy and reflectivity maps; revisits are
    localized against the occupancy map and accepted displacements become
    binary loop edges in the final graph.
    """
    fused = fused_odometry(packages, calib, params, cov)
    times = [p.t for p in packages]
    loops = detect_loop_closures(fused, times, lc)
    if not loops:
        return SlamResult(poses=fused, fused=fused, loops_detected=[], loops_accepted=[])
    loop_set = {t for t, _ in loops}
    first_idx = [k for k in range(len(packages)) if k not in loop_set]
    occ_map = build_map(
        [packages[k] for k in first_idx],
        [fused[k] for k in first_idx],
        map_cfg,
        params,
        calib,
        reflect_table,
        rev_period,
    )
    refl_cfg = MapConfig(
        resolution=map_cfg.resolution, tile_size=map_cfg.tile_size, map_type=MapType.REFLECTIVITY
    )
    refl_map = build_map(
        [packages[k] for k in first_idx],
        [fused[k] for k in first_idx],
        refl_cfg,
        params,
        calib,
        reflect_table,
        rev_period,
    )
    view = ScoringView(occ_map)
    refl_view = ScoringView(refl_map)
    if mcl_cfg is None:
        mcl_cfg = FilterConfig(init_pos_std=1.0, init_theta_std=math.radians(5.0))
    graph = build_fused_graph(packages, calib, params, cov)
    accepted = []
    for t_idx, s_idx in loops[::loop_stride]:
        disp = estimate_displacement(
            packages[t_idx],
            view,
            fused[t_idx],
            fused[s_idx],
            mcl_cfg,
            params,
            (seed, t_idx),
            lc,
            calib,
            reflect_table,
            rev_period,
            companion_map=refl_view,
        )
        if disp is None:
            continue
        info = np.linalg.inv(disp.covariance)
        graph.add_binary(t_idx, s_idx, disp.relative, (info + info.T) / 2.0)
        accepted.append((t_idx, s_idx))
    if not accepted:
        return SlamResult(
            poses=fused,
            fused=fused,
            loops_detected=loops,
            loops_accepted=[],
            first_visit_maps={MapType.OCCUPANCY: occ_map, MapType.REFLECTIVITY: refl_map},
        )
    for k, pose in enumerate(fused):
        graph.nodes[k].pose = pose
    solution = optimize(graph)
    return SlamResult(
        poses=[solution[k] for k in range(len(packages))],
        fused=fused,
        loops_detected=loops,
        loops_accepted=accepted,
        graph=graph,
        first_visit_maps={MapType.OCCUPANCY: occ_map, MapType.REFLECTIVITY: refl_map},
    )
