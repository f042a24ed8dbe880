import math

import numpy as np
import pytest

from conftest import PARAMS

from gridloc.core import OdomSample, Pose2D
from gridloc.errors import DataError
from gridloc.preprocess import (
    CalibTable,
    DataPackage,
    OdomCalib,
    _dead_reckoning_objective,
    build_reflectivity_table,
    calibrate_odometry,
    filter_packages,
    motion_correct_cloud,
    prepare_cloud,
    range_bucket,
    synchronize,
)
from gridloc.sim import BeamScan, GpsRecord, OdomRecord


def make_scan(t, bearing, rng, laser=None, reflect=None):
    n = len(bearing)
    return BeamScan(
        t=t,
        bearing=np.asarray(bearing, dtype=float),
        laser_id=np.asarray(laser if laser is not None else np.zeros(n), dtype=np.int64),
        range=np.asarray(rng, dtype=float),
        reflectivity=np.asarray(reflect if reflect is not None else np.full(n, 100), dtype=np.int64),
        has_cam=np.zeros(n, dtype=bool),
        rgb=np.zeros((n, 3), dtype=np.int64),
        class_label=np.full(n, -1, dtype=np.int64),
    )


class TestSynchronize:
    def test_shared_timestamps_pair_exactly(self):
        records = []
        for t in (0.0, 0.1, 0.2):
            records.append(GpsRecord(t, t, 0.0, 0.0))
            records.append(OdomRecord(t, 1.0 + t, 0.0))
            records.append(make_scan(t, [0.0], [5.0]))
        pkgs = synchronize(records)
        assert len(pkgs) == 3
        for pkg in pkgs:
            assert pkg.gps.t == pkg.t
            assert pkg.odom.t == pkg.t

    def test_nearest_gps_chosen(self):
        records = [
            GpsRecord(0.0, 0.0, 0.0, 0.0),
            GpsRecord(0.05, 1.0, 0.0, 0.0),
            GpsRecord(0.10, 2.0, 0.0, 0.0),
            OdomRecord(0.06, 1.0, 0.0),
            make_scan(0.06, [0.0], [5.0]),
        ]
        (pkg,) = synchronize(records)
        assert pkg.gps.t == 0.05

    def test_no_gps_leaves_field_absent(self):
        records = [OdomRecord(0.0, 1.0, 0.0), make_scan(0.0, [0.0], [5.0])]
        (pkg,) = synchronize(records)
        assert pkg.gps is None

    def test_empty_beam_stream(self):
        assert synchronize([GpsRecord(0.0, 0, 0, 0), OdomRecord(0.0, 1, 0)]) == []

    def test_nearest_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        gps_t = np.sort(rng.uniform(0, 10, 40))
        odom_t = np.sort(rng.uniform(0, 10, 70))
        records = [GpsRecord(float(t), float(t), 0.0, 0.0) for t in gps_t]
        records += [OdomRecord(float(t), float(t), 0.0) for t in odom_t]
        scan_t = np.sort(rng.uniform(0, 10, 25))
        records += [make_scan(float(t), [0.0], [5.0]) for t in scan_t]
        records.sort(key=lambda r: r.t)
        for pkg in synchronize(records):
            best_gps = min(abs(gps_t - pkg.t))
            best_odom = min(abs(odom_t - pkg.t))
            assert abs(pkg.gps.t - pkg.t) == pytest.approx(best_gps, abs=1e-12)
            assert abs(pkg.odom.t - pkg.t) == pytest.approx(best_odom, abs=1e-12)


class TestFilterPackages:
    @staticmethod
    def pkg(t, v, x):
        return DataPackage(
            t=t,
            gps=GpsRecord(t, x, 0.0, 0.0),
            odom=OdomSample(v, 0.0, t),
            beams=make_scan(t, [0.0], [5.0]),
        )

    def test_all_stopped_gives_empty(self):
        pkgs = [self.pkg(t, 0.0, t) for t in np.arange(0, 1, 0.1)]
        assert filter_packages(pkgs) == []

    def test_gps_jump_dropped(self):
        pkgs = [self.pkg(0.0, 1.0, 0.0), self.pkg(0.1, 1.0, 50.0), self.pkg(0.2, 1.0, 0.2)]
        kept = filter_packages(pkgs, max_gps_gap=5.0)
        assert [p.t for p in kept] == [0.0, 0.2]

    def test_clean_log_unchanged(self, clean_packages):
        assert len(filter_packages(clean_packages)) == len(clean_packages)


class TestOdomCalibration:
    def test_unbiased_log_recovers_identity(self, clean_packages):
        calib = calibrate_odometry(clean_packages, PARAMS)
        assert calib.v_mult == pytest.approx(1.0, abs=1e-3)
        assert calib.phi_mult == pytest.approx(1.0, abs=1e-3)
        assert calib.phi_add == pytest.approx(0.0, abs=1e-3)

    def test_injected_bias_recovered(self, biased_log):
        records, _ = biased_log
        pkgs = filter_packages(synchronize(records))
        calib = calibrate_odometry(pkgs, PARAMS)
        assert calib.v_mult == pytest.approx(1.05, abs=1e-2)
        assert calib.phi_mult == pytest.approx(1.0, abs=1e-2)
        assert calib.phi_add == pytest.approx(0.01, abs=1e-2)

    def test_recovered_beats_identity_objective(self, biased_log):
        records, _ = biased_log
        pkgs = filter_packages(synchronize(records))
        calib = calibrate_odometry(pkgs, PARAMS)
        objective = _dead_reckoning_objective(pkgs, PARAMS)
        assert objective(np.array([calib.v_mult, calib.phi_mult, calib.phi_add])) <= objective(
            np.array([1.0, 1.0, 0.0])
        )

    def test_insufficient_gps_rejected(self):
        pkgs = [
            DataPackage(t=0.0, gps=None, odom=OdomSample(1, 0, 0), beams=make_scan(0, [0], [5]))
        ]
        with pytest.raises(DataError):
            calibrate_odometry(pkgs, PARAMS)

    def test_apply_inverts_measurement_model(self):
        calib = OdomCalib(1.05, 1.1, 0.01)
        truth_v, truth_phi = 7.0, 0.2
        measured = OdomSample(truth_v * 1.05, truth_phi * 1.1 + 0.01, 0.0)
        corrected = calib.apply(measured)
        assert corrected.v == pytest.approx(truth_v)
        assert corrected.phi == pytest.approx(truth_phi)

    def test_text_round_trip(self, tmp_path):
        calib = OdomCalib(1.0321, 0.98, -0.0042)
        calib.save(tmp_path / "odom.calib")
        assert OdomCalib.load(tmp_path / "odom.calib") == calib


class TestReflectivityTable:
    @staticmethod
    def single_pose_packages(scans):
        pkgs = [
            DataPackage(t=s.t, gps=None, odom=OdomSample(0.0, 0.0, s.t), beams=s) for s in scans
        ]
        poses = [Pose2D(0, 0, 0) for _ in scans]
        return pkgs, poses

    def test_constant_reflectivity_self_consistent(self):
        rng = np.linspace(2, 60, 40)
        scan = make_scan(0.0, np.zeros(40), rng, laser=np.zeros(40), reflect=np.full(40, 77))
        pkgs, poses = self.single_pose_packages([scan])
        table = build_reflectivity_table(pkgs, poses)
        assert table.filled[0, 77].any()
        assert np.allclose(table.values[0, 77][table.filled[0, 77]], 77.0)

    def test_two_lasers_average_to_shared_mean(self):
        # lasers 0/1 read r+10 and r-10 in the same cells -> both map to ~r
        n = 16
        bearing = np.zeros(n)
        rng = np.full(n, 10.0)
        laser = np.tile([0, 1], n // 2)
        reflect = np.where(laser == 0, 110, 90)
        scan = make_scan(0.0, bearing, rng, laser=laser, reflect=reflect)
        pkgs, poses = self.single_pose_packages([scan])
        table = build_reflectivity_table(pkgs, poses)
        k = int(range_bucket(np.array([10.0]))[0])
        assert table.values[0, 110, k] == pytest.approx(100.0)
        assert table.values[1, 90, k] == pytest.approx(100.0)

    def test_unfilled_entry_identity(self):
        table = CalibTable.identity()
        assert table.apply(3, 42, 10.0) == 42.0

    def test_below_range_clamps_to_first_bucket(self):
        table = CalibTable.identity()
        table.values[0, 50, 0] = 123.0
        table.filled[0, 50, 0] = True
        assert table.apply(0, 50, 0.5) == 123.0

    def test_binary_round_trip(self, tmp_path):
        table = CalibTable.identity()
        rng = np.random.default_rng(9)
        mask = rng.random(table.values.shape) < 0.1
        table.filled[mask] = True
        table.values[mask] = rng.uniform(0, 255, int(mask.sum())).astype(np.float32)
        table.save(tmp_path / "r.calib")
        back = CalibTable.load(tmp_path / "r.calib")
        assert np.array_equal(back.values, table.values)
        assert np.array_equal(back.filled, table.filled)

    def test_calibration_reduces_cell_variance(self, small_world, laser_offset_log, vehicle_params):
        records, truth = laser_offset_log
        pkgs = filter_packages(synchronize(records))
        truth_by_t = {round(t, 6): p for t, p in truth}
        poses = [truth_by_t[round(p.t, 6)] for p in pkgs]
        table = build_reflectivity_table(pkgs, poses, params=vehicle_params)

        def per_cell_variance(use_table):
            keys, vals = [], []
            for pkg, pose in zip(pkgs, poses):
                cloud = prepare_cloud(
                    pkg, vehicle_params, reflect_table=table if use_table else None
                )
                c, s = math.cos(pose.theta), math.sin(pose.theta)
                wx = pose.x + c * cloud.x - s * cloud.y
                wy = pose.y + s * cloud.x + c * cloud.y
                gx = np.floor(wx / 0.2).astype(np.int64)
                gy = np.floor(wy / 0.2).astype(np.int64)
                keys.append((gx + (1 << 30)) * (1 << 31) + (gy + (1 << 30)))
                vals.append(cloud.reflectivity)
            keys = np.concatenate(keys)
            vals = np.concatenate(vals)
            _, inv, cnt = np.unique(keys, return_inverse=True, return_counts=True)
            sums = np.zeros(len(cnt))
            np.add.at(sums, inv, vals)
            mean = sums / cnt
            sq = np.zeros(len(cnt))
            np.add.at(sq, inv, (vals - mean[inv]) ** 2)
            multi = cnt >= 2
            return float(np.mean(sq[multi] / cnt[multi]))

        raw_var = per_cell_variance(use_table=False)
        cal_var = per_cell_variance(use_table=True)
        assert cal_var <= 0.2 * raw_var


class TestMotionCorrection:
    def test_stationary_cloud_unchanged(self):
        scan = make_scan(0.0, [0.0, math.pi / 2, math.pi], [5.0, 5.0, 5.0])
        cx, cy = motion_correct_cloud(scan, 0.0, 0.0, PARAMS, rev_period=0.1)
        assert np.allclose(cx, scan.range * np.cos(scan.bearing))
        assert np.allclose(cy, scan.range * np.sin(scan.bearing))

    def test_last_beam_shifted_full_motion(self):
        scan = make_scan(0.0, np.zeros(3), np.full(3, 5.0))
        cx, cy = motion_correct_cloud(scan, 10.0, 0.0, PARAMS, rev_period=0.1)
        assert cx[-1] == pytest.approx(5.0 + 1.0)
        assert cy[-1] == pytest.approx(0.0)

    def test_mid_beam_shifted_half(self):
        scan = make_scan(0.0, np.zeros(3), np.full(3, 5.0))
        cx, _ = motion_correct_cloud(scan, 10.0, 0.0, PARAMS, rev_period=0.1)
        assert cx[1] == pytest.approx(5.0 + 0.5)

    def test_prepare_cloud_drops_invalid_ranges(self):
        scan = make_scan(0.0, [0.0, 0.1, 0.2], [0.5, 5.0, 71.5])
        pkg = DataPackage(t=0.0, gps=None, odom=OdomSample(0, 0, 0), beams=scan)
        cloud = prepare_cloud(pkg, PARAMS)
        assert len(cloud.x) == 1
        assert cloud.range[0] == 5.0
