import math

import numpy as np
import pytest

from conftest import PARAMS, make_scan

from gridloc.core import OdomSample, Pose2D, ackermann_step, compose_pose, relative_pose
from gridloc.errors import OptimizationError
from gridloc.gridmap import MapConfig, MapType
from gridloc.mapping import build_map
from gridloc.mcl import FilterConfig, FilterMode
from gridloc.posegraph import (
    CovSettings,
    LoopClosureParams,
    PoseGraph,
    build_fused_graph,
    detect_loop_closures,
    estimate_displacement,
    full_slam,
    fused_odometry,
    graph_cost,
    optimize,
)
from gridloc.preprocess import DataPackage, filter_packages, synchronize
from gridloc.sim import GpsRecord

I3 = np.eye(3)


def pkg_at(t, pose, v=5.0, phi=0.0, gps=True):
    return DataPackage(
        t=t,
        gps=GpsRecord(t, pose.x, pose.y, pose.theta) if gps else None,
        odom=OdomSample(v, phi, t),
        beams=make_scan(t, [0.0], [5.0]),
    )


class TestOptimize:
    def test_single_node_single_unary(self):
        g = PoseGraph()
        g.add_node(0, Pose2D(5, -2, 1.0))
        z = Pose2D(1.0, 2.0, 0.5)
        g.add_unary(0, z, I3)
        sol = optimize(g)
        assert sol[0].x == pytest.approx(z.x, abs=1e-9)
        assert sol[0].y == pytest.approx(z.y, abs=1e-9)
        assert sol[0].theta == pytest.approx(z.theta, abs=1e-9)

    def test_two_node_chain_consistent(self):
        g = PoseGraph()
        g.add_node(0, Pose2D(0.3, 0.1, 0.05))
        g.add_node(1, Pose2D(0.5, -0.4, -0.1))
        g.add_unary(0, Pose2D(0, 0, 0), I3)
        g.add_binary(1, 0, Pose2D(1, 0, 0), I3)
        sol = optimize(g)
        assert sol[1].x == pytest.approx(1.0, abs=1e-9)
        assert sol[1].y == pytest.approx(0.0, abs=1e-9)
        assert graph_cost(g) < 1e-12

    def test_weighted_mean_closed_form(self):
        # one node pulled to 0 with weight 1 and to 2 with weight 3:
        # the quadratic optimum is the weighted mean (0*1 + 2*3)/(1+3)
        g = PoseGraph()
        g.add_node(0, Pose2D(0.7, 0, 0))
        g.add_unary(0, Pose2D(0, 0, 0), I3)
        g.add_unary(0, Pose2D(2, 0, 0), 3 * I3)
        sol = optimize(g)
        assert sol[0].x == pytest.approx(1.5, abs=1e-9)

    def test_scale_invariance_of_argmin(self):
        rng = np.random.default_rng(5)

        def build(scale):
            g = PoseGraph()
            for k in range(5):
                g.add_node(k, Pose2D(*rng2.uniform(-1, 1, 2), rng2.uniform(-1, 1)))
            g.add_unary(0, Pose2D(0, 0, 0), scale * I3)
            g.add_unary(4, Pose2D(4.2, 0.3, 0.2), scale * np.diag([2.0, 1.0, 0.5]))
            for k in range(4):
                g.add_binary(k + 1, k, Pose2D(1, 0.1 * k, 0.05), scale * np.diag([1.0, 2.0, 3.0]))
            return g

        state = rng.bit_generator.state
        rng2 = np.random.default_rng(5)
        a = optimize(build(1.0))
        rng2 = np.random.default_rng(5)
        b = optimize(build(2.0))
        del state
        for k in a:
            assert a[k].x == pytest.approx(b[k].x, abs=1e-9)
            assert a[k].y == pytest.approx(b[k].y, abs=1e-9)
            assert a[k].theta == pytest.approx(b[k].theta, abs=1e-9)

    def test_binary_residual_zero_iff_composition(self):
        a = Pose2D(3, 1, 2.0)
        z = Pose2D(1.5, -0.3, 0.4)
        b = Pose2D(0.2, 0.5, -0.6)
        g = PoseGraph()
        g.add_node(0, compose_pose(b, z), fixed=True)
        g.add_node(1, b, fixed=True)
        g.add_binary(0, 1, z, I3)
        assert graph_cost(g) < 1e-18
        g2 = PoseGraph()
        g2.add_node(0, a, fixed=True)
        g2.add_node(1, b, fixed=True)
        g2.add_binary(0, 1, z, I3)
        assert graph_cost(g2) > 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        g = PoseGraph()
        for k in range(4):
            g.add_node(k, Pose2D(*rng.uniform(-2, 2, 2), rng.uniform(-2, 2)))
        g.add_unary(0, Pose2D(0.3, -0.2, 0.5), np.diag(rng.uniform(0.5, 3, 3)))
        g.add_unary(2, Pose2D(1.5, 0.8, -0.9), np.diag(rng.uniform(0.5, 3, 3)))
        for a, b in [(1, 0), (2, 1), (3, 2), (3, 0)]:
            g.add_binary(a, b, Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-1, 1)), np.diag(rng.uniform(0.5, 3, 3)))
        from gridloc.posegraph import _Assembler

        asm = _Assembler(g)
        poses = np.array([[g.nodes[i].pose.x, g.nodes[i].pose.y, g.nodes[i].pose.theta] for i in asm.ids])
        _, grad = asm.normal_equations(poses)
        h = 1e-6
        for k in range(4):
            for d in range(3):
                p = poses.copy()
                p[k, d] += h
                up = asm.cost(p)
                p[k, d] -= 2 * h
                dn = asm.cost(p)
                numeric = (up - dn) / (4 * h)
                assert grad[3 * k + d] == pytest.approx(numeric, abs=1e-4, rel=1e-4)

    def test_unanchored_gauge_rejected(self):
        g = PoseGraph()
        g.add_node(0, Pose2D(0, 0, 0))
        g.add_node(1, Pose2D(1, 0, 0))
        g.add_binary(1, 0, Pose2D(1, 0, 0), I3)
        with pytest.raises(OptimizationError):
            optimize(g)

    def test_fixed_nodes_never_move(self):
        g = PoseGraph()
        anchor = Pose2D(1, 2, 0.3)
        g.add_node(0, anchor, fixed=True)
        g.add_node(1, Pose2D(0, 0, 0))
        g.add_binary(1, 0, Pose2D(1, 0, 0), I3)
        g.add_unary(1, Pose2D(10, 10, 0), 1e-3 * I3)
        sol = optimize(g)
        assert sol[0] == anchor

    def test_cost_never_increases(self):
        rng = np.random.default_rng(23)
        g = PoseGraph()
        n = 20
        for k in range(n):
            g.add_node(k, Pose2D(k + rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.2)))
            g.add_unary(k, Pose2D(k, 0, 0), np.diag([1, 1, 0.1]))
        for k in range(1, n):
            g.add_binary(k, k - 1, Pose2D(1 + rng.normal(0, 0.1), 0, 0), np.diag([50, 50, 10]))
        start = graph_cost(g)
        optimize(g)
        assert graph_cost(g) <= start

    def test_graph_file_round_trip(self, tmp_path):
        g = PoseGraph()
        g.add_node(0, Pose2D(0, 0, 0), fixed=True)
        g.add_node(1, Pose2D(1, 0.5, 0.2))
        g.add_unary(0, Pose2D(0, 0, 0), np.diag([1.0, 2.0, 3.0]))
        g.add_binary(1, 0, Pose2D(1, 0, 0), np.diag([4.0, 5.0, 6.0]))
        g.save(tmp_path / "g.txt")
        back = PoseGraph.load(tmp_path / "g.txt")
        assert back.nodes[0].fixed and not back.nodes[1].fixed
        assert back.nodes[1].pose == g.nodes[1].pose
        assert np.array_equal(back.unary[0].info, g.unary[0].info)
        assert np.array_equal(back.binary[0].info, g.binary[0].info)
        assert back.binary[0].node_a == 1 and back.binary[0].node_b == 0


class TestFusedOdometry:
    def test_consistent_inputs_reproduce_gps(self):
        # hand-built log: GPS exactly on the trajectory the motion model
        # integrates, so the optimum has zero residual
        poses = [Pose2D(0, 0, 0)]
        v, phi, dt = 5.0, 0.08, 0.1
        for _ in range(30):
            poses.append(ackermann_step(poses[-1], v, phi, dt, PARAMS))
        pkgs = [pkg_at(k * dt, p, v=v, phi=phi) for k, p in enumerate(poses)]
        out = fused_odometry(pkgs, None, PARAMS, CovSettings(gps_theta_var=1.0))
        for got, want in zip(out, poses):
            assert got.x == pytest.approx(want.x, abs=1e-6)
            assert got.y == pytest.approx(want.y, abs=1e-6)
            assert got.theta == pytest.approx(want.theta, abs=1e-6)

    def test_gps_only_limit(self):
        rng = np.random.default_rng(3)
        poses = [Pose2D(float(x), float(rng.normal(0, 0.3)), 0.0) for x in range(20)]
        pkgs = [pkg_at(0.1 * k, p) for k, p in enumerate(poses)]
        cov = CovSettings(motion_xy_std=1e4, motion_theta_std=1e4)
        out = fused_odometry(pkgs, None, PARAMS, cov)
        for got, want in zip(out, poses):
            assert got.x == pytest.approx(want.x, abs=1e-6)
            assert got.y == pytest.approx(want.y, abs=1e-6)

    def test_smoothing_beats_raw_gps(self, drift_loop_log):
        records, truth = drift_loop_log
        pkgs = filter_packages(synchronize(records))
        tmap = {round(t, 6): p for t, p in truth}
        cov = CovSettings(gps_xy_std=1.0)
        fused = fused_odometry(pkgs, None, PARAMS, cov)

        def rmse(get_pose):
            errs = [
                math.hypot(get_pose(k).x - tmap[round(p.t, 6)].x, get_pose(k).y - tmap[round(p.t, 6)].y)
                for k, p in enumerate(pkgs)
            ]
            return math.sqrt(np.mean(np.square(errs)))

        gps_rmse = rmse(lambda k: Pose2D(pkgs[k].gps.x, pkgs[k].gps.y, 0))
        fused_rmse = rmse(lambda k: fused[k])
        assert fused_rmse < gps_rmse


class TestLoopDetection:
    LC = LoopClosureParams(tau_d=2.0, tau_t=30.0)

    def test_straight_path_no_loops(self):
        poses = [Pose2D(k * 1.0, 0, 0) for k in range(100)]
        times = [k * 1.0 for k in range(100)]
        assert detect_loop_closures(poses, times, self.LC) == []

    def test_zero_distance_threshold_empty(self):
        poses = [Pose2D(0, 0, 0) for _ in range(100)]
        times = [k * 1.0 for k in range(100)]
        lc = LoopClosureParams(tau_d=0.0, tau_t=30.0)
        assert detect_loop_closures(poses, times, lc) == []

    def test_out_and_back_overlap_flagged(self):
        # drive 60 m out in 60 s, turn, come back on the same line
        poses = [Pose2D(k * 1.0, 0, 0) for k in range(61)]
        poses += [Pose2D(60 - k, 0, math.pi) for k in range(1, 61)]
        times = [float(k) for k in range(len(poses))]
        found = detect_loop_closures(poses, times, self.LC)
        revisits = {t for t, _ in found}
        # points revisited more than tau_t seconds later
        assert revisits
        for t_idx, s_idx in found:
            assert times[t_idx] - times[s_idx] >= self.LC.tau_t
            d = math.hypot(poses[t_idx].x - poses[s_idx].x, poses[t_idx].y - poses[s_idx].y)
            assert d < self.LC.tau_d

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(31)
        for trial in range(100):
            n = int(rng.integers(5, 60))
            xy = np.cumsum(rng.normal(0, 1.0, (n, 2)), axis=0)
            times = np.cumsum(rng.uniform(0.5, 2.0, n))
            poses = [Pose2D(float(x), float(y), 0.0) for x, y in xy]
            lc = LoopClosureParams(tau_d=float(rng.uniform(0.5, 4.0)), tau_t=float(rng.uniform(2, 20)))
            got = detect_loop_closures(poses, list(times), lc)
            expect = []
            for k in range(n):
                best, best_d = None, None
                for j in range(k):
                    if times[k] - times[j] < lc.tau_t:
                        continue
                    d = math.hypot(xy[k, 0] - xy[j, 0], xy[k, 1] - xy[j, 1])
                    if best_d is None or d < best_d:
                        best, best_d = j, d
                if best is not None and best_d < lc.tau_d:
                    expect.append((k, best))
            assert got == expect


@pytest.fixture(scope="module")
def revisit_fixture(small_world, clean_packages):
    """Occupancy map from the first half of the clean log plus one package
    that revisits mapped area."""
    truth = None  # poses come from GPS, which is exact in the clean log
    pkgs = clean_packages
    half = pkgs[: len(pkgs) // 2]
    poses = [Pose2D(p.gps.x, p.gps.y, p.gps.theta) for p in half]
    occ = build_map(half, poses, MapConfig(map_type=MapType.OCCUPANCY), PARAMS)
    probe = pkgs[10]
    probe_pose = Pose2D(probe.gps.x, probe.gps.y, probe.gps.theta)
    del truth
    return occ, probe, probe_pose


class TestDisplacement:
    CFG = FilterConfig(mode=FilterMode.DIVERSE, init_pos_std=1.0, init_theta_std=math.radians(5))

    def test_zero_offset_recovers_identity(self, revisit_fixture):
        occ, probe, pose = revisit_fixture
        disp = estimate_displacement(
            probe, occ, pose, pose, self.CFG, PARAMS, seed=1
        )
        assert disp is not None
        assert math.hypot(disp.relative.x, disp.relative.y) <= 0.25

    def test_seed_offset_recovered(self, revisit_fixture):
        occ, probe, pose = revisit_fixture
        seed_pose = Pose2D(pose.x + 1.0, pose.y, pose.theta)
        disp = estimate_displacement(
            probe, occ, seed_pose, pose, self.CFG, PARAMS, seed=2
        )
        assert disp is not None
        # converged back to the true pose despite the shifted seed
        assert math.hypot(disp.localized.x - pose.x, disp.localized.y - pose.y) < 0.3

    def test_far_seed_rejected_by_gate(self, revisit_fixture):
        occ, probe, pose = revisit_fixture
        seed_pose = Pose2D(pose.x + 20.0, pose.y, pose.theta)
        wide = FilterConfig(mode=FilterMode.DIVERSE, init_pos_std=10.0, init_theta_std=math.radians(5))
        disp = estimate_displacement(
            probe, occ, seed_pose, pose, wide, PARAMS, seed=3,
            lc=LoopClosureParams(max_pos_gate=3.0),
        )
        assert disp is None

    def test_covariance_floor(self, revisit_fixture):
        occ, probe, pose = revisit_fixture
        disp = estimate_displacement(probe, occ, pose, pose, self.CFG, PARAMS, seed=4)
        vals = np.linalg.eigvalsh(disp.covariance)
        assert vals.min() >= 0.05**2 - 1e-12


class TestFullSlam:
    def test_loop_free_equals_fused(self, clean_packages):
        pkgs = clean_packages[:80]  # a short arc, no revisits
        res = full_slam(pkgs, None, PARAMS, LoopClosureParams(tau_d=1.0, tau_t=30.0))
        assert res.loops_detected == []
        assert res.poses == res.fused

    def test_gated_out_loops_equal_fused(self, drift_loop_log):
        records, _ = drift_loop_log
        pkgs = filter_packages(synchronize(records))
        lc = LoopClosureParams(tau_d=3.0, tau_t=30.0, max_pos_gate=1e-9, max_ang_gate=1e-9)
        res = full_slam(pkgs, None, PARAMS, lc, CovSettings(gps_xy_std=1.0), seed=5)
        assert res.loops_detected
        assert res.loops_accepted == []
        assert res.poses == res.fused

    def test_loop_closure_reduces_revisit_misalignment(self, drift_loop_log, small_world):
        records, truth = drift_loop_log
        pkgs = filter_packages(synchronize(records))
        tmap = {round(t, 6): p for t, p in truth}
        res = full_slam(pkgs, None, PARAMS, LoopClosureParams(), CovSettings(gps_xy_std=1.0), seed=7)
        assert res.loops_accepted

        def revisit_rmse(poses):
            errs = []
            for t_idx, s_idx in res.loops_detected:
                rel = relative_pose(poses[t_idx], poses[s_idx])
                true_rel = relative_pose(
                    tmap[round(pkgs[t_idx].t, 6)], tmap[round(pkgs[s_idx].t, 6)]
                )
                errs.append(math.hypot(rel.x - true_rel.x, rel.y - true_rel.y))
            return math.sqrt(np.mean(np.square(errs)))

        fused_err = revisit_rmse(res.fused)
        slam_err = revisit_rmse(res.poses)
        assert slam_err < 0.6 * fused_err
