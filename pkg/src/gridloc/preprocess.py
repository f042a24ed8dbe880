"""From raw sensor logs to synchronized, calibrated data packages.

Stages, in pipeline order: nearest-timestamp synchronization into one
package per beam scan, stop/GPS-jump filtering, odometry bias calibration
against GPS, reflectivity calibration via shared-cell supervision, and
intra-scan motion correction of beam endpoints.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from .core import OdomSample, Pose2D, VehicleParams
from .errors import DataError
from .sim import (
    MAX_BEAM_RANGE,
    MIN_BEAM_RANGE,
    NUM_LASERS,
    BeamScan,
    GpsRecord,
    LogRecord,
    OdomRecord,
    is_ground_return,
)

REFLECT_LEVELS = 256
RANGE_BUCKETS = 10
# bucket edges grow geometrically from 1 m to the max range
_BUCKET_RATIO = (MAX_BEAM_RANGE / MIN_BEAM_RANGE) ** (1.0 / RANGE_BUCKETS)
_LOG_RATIO = math.log(_BUCKET_RATIO)

CALIB_MAGIC = b"RCAL"
CALIB_VERSION = 1


@dataclass(slots=True)
class DataPackage:
    """One beam scan with its nearest GPS and odometry samples."""

    t: float
    gps: GpsRecord | None
    odom: OdomSample
    beams: BeamScan


def _nearest_index(times: np.ndarray, t: float) -> int:
    """Index of the sample closest in time; earlier sample wins ties."""
    i = int(np.searchsorted(times, t))
    if i == 0:
        return 0
    if i == len(times):
        return len(times) - 1
    return i - 1 if t - times[i - 1] <= times[i] - t else i


def synchronize(records: list[LogRecord]) -> list[DataPackage]:
    """Group one package per beams record, pairing the nearest gps/odom."""
    gps = [r for r in records if isinstance(r, GpsRecord)]
    odom = [r for r in records if isinstance(r, OdomRecord)]
    scans = [r for r in records if isinstance(r, BeamScan)]
    if not scans:
        return []
    if not odom:
        raise DataError("log has beam scans but no odometry")
    gps_t = np.array([r.t for r in gps])
    odom_t = np.array([r.t for r in odom])
    packages = []
    for scan in scans:
        o = odom[_nearest_index(odom_t, scan.t)]
        g = gps[_nearest_index(gps_t, scan.t)] if gps else None
        packages.append(
            DataPackage(t=scan.t, gps=g, odom=OdomSample(o.v, o.phi, o.t), beams=scan)
        )
    return packages


def filter_packages(
    packages: list[DataPackage], min_speed: float = 0.2, max_gps_gap: float = 5.0
) -> list[DataPackage]:
    """Drop stopped-vehicle packages and GPS jumps."""
    kept: list[DataPackage] = []
    last_gps: GpsRecord | None = None
    for pkg in packages:
        if abs(pkg.odom.v) < min_speed:
            continue
        if pkg.gps is not None and last_gps is not None:
            if math.hypot(pkg.gps.x - last_gps.x, pkg.gps.y - last_gps.y) > max_gps_gap:
                continue
        if pkg.gps is not None:
            last_gps = pkg.gps
        kept.append(pkg)
    return kept


# ------------------------------------------------------------ odometry calib


@dataclass(frozen=True, slots=True)
class OdomCalib:
    """Measurement bias model: v_meas = v_mult * v, phi_meas = phi_mult * phi + phi_add.

    apply() inverts the model to recover the true commands.
    """

    v_mult: float = 1.0
    phi_mult: float = 1.0
    phi_add: float = 0.0

    def __post_init__(self) -> None:
        if not (0.5 < self.v_mult < 2.0 and 0.5 < self.phi_mult < 2.0):
            raise ValueError("multipliers outside the sane (0.5, 2.0) range")

    def apply(self, odom: OdomSample) -> OdomSample:
        return OdomSample(odom.v / self.v_mult, (odom.phi - self.phi_add) / self.phi_mult, odom.t)

    def apply_arrays(self, v: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return v / self.v_mult, (phi - self.phi_add) / self.phi_mult

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            f"v_mult={self.v_mult!r}\nphi_mult={self.phi_mult!r}\nphi_add={self.phi_add!r}\n"
        )

    @staticmethod
    def load(path: str | Path) -> "OdomCalib":
        kv = dict(line.split("=", 1) for line in Path(path).read_text().splitlines() if line)
        return OdomCalib(float(kv["v_mult"]), float(kv["phi_mult"]), float(kv["phi_add"]))


def _dead_reckoning_objective(packages: list[DataPackage], params: VehicleParams, substep: float = 0.02):
    """Build a fast mean-GPS-distance objective over calibration parameters.

    Integrates the motion model on a fixed fine time grid, seeded at the
    first GPS pose, with steering linearly interpolated between package
    samples; compares against GPS positions at their own timestamps.
    """
    start_idx = next(i for i, p in enumerate(packages) if p.gps is not None)
    pkgs = packages[start_idx:]
    t = np.array([p.t for p in pkgs])
    v_raw = np.array([p.odom.v for p in pkgs])
    phi_raw = np.array([p.odom.phi for p in pkgs])
    gps_pkg = np.array([i for i, p in enumerate(pkgs) if p.gps is not None])
    gps_xy = np.array([[p.gps.x, p.gps.y] for p in pkgs if p.gps is not None])
    gps_dt = np.array([p.gps.t - p.t for p in pkgs if p.gps is not None])
    start = (pkgs[0].gps.x, pkgs[0].gps.y, pkgs[0].gps.theta)
    # fine grid: ~substep-sized steps inside each package interval
    dts = np.diff(t)
    counts = np.maximum(1, np.ceil(dts / substep).astype(int))
    total = int(counts.sum())
    idx = np.repeat(np.arange(len(dts)), counts)
    fine_dt = np.repeat(dts / counts, counts)
    step_in = np.arange(total) - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    frac = (step_in + 0.5) / np.repeat(counts, counts)
    boundary = np.concatenate([[0], np.cumsum(counts)])  # fine index of each package time
    nxt = np.minimum(idx + 1, len(v_raw) - 1)
    L = params.wheelbase_l

    def objective(c: np.ndarray) -> float:
        vm, pm, pa = c
        if not (0.3 < vm < 3.0 and 0.3 < pm < 3.0 and abs(pa) < 0.5):
            return 1e9
        v = v_raw / vm
        phi = np.clip((phi_raw - pa) / pm, -1.2, 1.2)
        v_f = v[idx] * (1 - frac) + v[nxt] * frac
        phi_f = phi[idx] * (1 - frac) + phi[nxt] * frac
        omega = v_f * np.tan(phi_f) / L
        theta = start[2] + np.concatenate([[0.0], np.cumsum(omega * fine_dt)])
        x = start[0] + np.concatenate([[0.0], np.cumsum(v_f * fine_dt * np.cos(theta[:-1]))])
        y = start[1] + np.concatenate([[0.0], np.cumsum(v_f * fine_dt * np.sin(theta[:-1]))])
        th = theta[boundary[gps_pkg]]
        vv = v[gps_pkg]
        px = x[boundary[gps_pkg]] + vv * gps_dt * np.cos(th)
        py = y[boundary[gps_pkg]] + vv * gps_dt * np.sin(th)
        return float(np.mean(np.hypot(px - gps_xy[:, 0], py - gps_xy[:, 1])))

    return objective


def calibrate_odometry(
    packages: list[DataPackage], params: VehicleParams
) -> OdomCalib:
    """Fit (v_mult, phi_mult, phi_add) by minimizing the mean distance
    between GPS fixes and the dead-reckoned trajectory."""
    n_gps = sum(1 for p in packages if p.gps is not None)
    if n_gps < 100:
        raise DataError(f"odometry calibration needs >= 100 GPS packages, got {n_gps}")
    objective = _dead_reckoning_objective(packages, params)
    starts = [np.array([1.0, 1.0, 0.0])]
    for vm in (0.9, 1.0, 1.1):
        for pm in (0.9, 1.0, 1.1):
            for pa in (-0.02, 0.0, 0.02):
                starts.append(np.array([vm, pm, pa]))
    best = None
    for x0 in starts:
        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={"xatol": 1e-5, "fatol": 1e-8, "maxiter": 500},
        )
        if best is None or res.fun < best.fun:
            best = res
    vm, pm, pa = best.x
    eps = 1e-6
    return OdomCalib(
        float(np.clip(vm, 0.5 + eps, 2.0 - eps)),
        float(np.clip(pm, 0.5 + eps, 2.0 - eps)),
        float(pa),
    )


# --------------------------------------------------------- reflectivity calib


def range_bucket(r: np.ndarray) -> np.ndarray:
    """Geometric range bucket, clamped to the table's [0, 9] index range."""
    r = np.maximum(np.asarray(r, dtype=np.float64), 1e-6)
    k = np.floor(np.log(r / MIN_BEAM_RANGE) / _LOG_RATIO)
    return np.clip(k, 0, RANGE_BUCKETS - 1).astype(np.int64)


@dataclass(slots=True)
class CalibTable:
    """Per (laser, raw value, range bucket) calibrated reflectivity."""

    values: np.ndarray  # (32, 256, 10) float32
    filled: np.ndarray  # same shape, bool

    @staticmethod
    def identity() -> "CalibTable":
        return CalibTable(
            np.zeros((NUM_LASERS, REFLECT_LEVELS, RANGE_BUCKETS), dtype=np.float32),
            np.zeros((NUM_LASERS, REFLECT_LEVELS, RANGE_BUCKETS), dtype=bool),
        )

    def apply(self, laser_id: int, raw: float, rng: float) -> float:
        raw_i = int(np.clip(round(raw), 0, REFLECT_LEVELS - 1))
        k = int(range_bucket(np.array([rng]))[0])
        if self.filled[laser_id, raw_i, k]:
            return float(self.values[laser_id, raw_i, k])
        return float(raw)

    def apply_bulk(self, laser_id: np.ndarray, raw: np.ndarray, rng: np.ndarray) -> np.ndarray:
        raw_i = np.clip(np.rint(raw), 0, REFLECT_LEVELS - 1).astype(np.int64)
        k = range_bucket(rng)
        out = np.asarray(raw, dtype=np.float64).copy()
        hit = self.filled[laser_id, raw_i, k]
        out[hit] = self.values[laser_id[hit], raw_i[hit], k[hit]]
        return out

    def save(self, path: str | Path) -> None:
        blob = CALIB_MAGIC + struct.pack("<H", CALIB_VERSION)
        blob += self.values.astype("<f4").tobytes()
        blob += np.packbits(self.filled.reshape(-1)).tobytes()
        Path(path).write_bytes(blob)

    @staticmethod
    def load(path: str | Path) -> "CalibTable":
        data = Path(path).read_bytes()
        if data[:4] != CALIB_MAGIC:
            raise DataError("bad calibration table magic")
        (version,) = struct.unpack("<H", data[4:6])
        if version != CALIB_VERSION:
            raise DataError(f"unsupported calibration table version {version}")
        n = NUM_LASERS * REFLECT_LEVELS * RANGE_BUCKETS
        vals = np.frombuffer(data, dtype="<f4", count=n, offset=6)
        bits = np.frombuffer(data, dtype=np.uint8, offset=6 + 4 * n)
        filled = np.unpackbits(bits, count=n).astype(bool)
        shape = (NUM_LASERS, REFLECT_LEVELS, RANGE_BUCKETS)
        return CalibTable(vals.reshape(shape).astype(np.float32), filled.reshape(shape))


def build_reflectivity_table(
    packages: list[DataPackage],
    poses: list[Pose2D],
    cell_size: float = 0.2,
    params: VehicleParams = VehicleParams(),
    odom_calib: OdomCalib | None = None,
    rev_period: float = 0.1,
) -> CalibTable:
    """Calibrate each (laser, raw, range-bucket) against shared-cell means.

    Every hit contributes its cell's mean raw reflectivity as the training
    target for its own table entry; entries average targets over all hits.
    """
    if len(packages) != len(poses):
        raise DataError("poses must align 1:1 with packages")
    keys, lasers, raws, buckets = [], [], [], []
    for pkg, pose in zip(packages, poses):
        odom = odom_calib.apply(pkg.odom) if odom_calib else pkg.odom
        cx, cy = motion_correct_cloud(pkg.beams, odom.v, odom.phi, params, rev_period)
        valid = pkg.beams.valid
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        wx = pose.x + c * cx[valid] - s * cy[valid]
        wy = pose.y + s * cx[valid] + c * cy[valid]
        gx = np.floor(wx / cell_size).astype(np.int64)
        gy = np.floor(wy / cell_size).astype(np.int64)
        keys.append((gx + (1 << 30)) * (1 << 31) + (gy + (1 << 30)))
        lasers.append(pkg.beams.laser_id[valid])
        raws.append(pkg.beams.reflectivity[valid])
        buckets.append(range_bucket(pkg.beams.range[valid]))
    if not keys:
        return CalibTable.identity()
    keys = np.concatenate(keys)
    lasers = np.concatenate(lasers).astype(np.int64)
    raws = np.clip(np.concatenate(raws), 0, REFLECT_LEVELS - 1).astype(np.int64)
    buckets = np.concatenate(buckets)
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros(len(counts))
    np.add.at(sums, inverse, raws.astype(np.float64))
    cell_mean = sums / counts
    targets = cell_mean[inverse]
    flat = (lasers * REFLECT_LEVELS + raws) * RANGE_BUCKETS + buckets
    n = NUM_LASERS * REFLECT_LEVELS * RANGE_BUCKETS
    entry_sum = np.zeros(n)
    entry_cnt = np.zeros(n)
    np.add.at(entry_sum, flat, targets)
    np.add.at(entry_cnt, flat, 1.0)
    table = CalibTable.identity()
    filled = entry_cnt > 0
    shape = (NUM_LASERS, REFLECT_LEVELS, RANGE_BUCKETS)
    table.filled = filled.reshape(shape)
    vals = np.zeros(n, dtype=np.float32)
    vals[filled] = (entry_sum[filled] / entry_cnt[filled]).astype(np.float32)
    table.values = vals.reshape(shape)
    return table


# --------------------------------------------------------- motion correction


def motion_correct_cloud(
    scan: BeamScan, v: float, phi: float, params: VehicleParams, rev_period: float
) -> tuple[np.ndarray, np.ndarray]:
    """Beam endpoints re-expressed in the scan-start vehicle frame.

    Each beam is displaced by the constant-(v, phi) arc the vehicle travels
    up to that beam's fraction of the revolution.
    """
    n = len(scan.bearing)
    frac = np.arange(n) / max(n - 1, 1)
    tau = frac * rev_period
    ex = scan.range * np.cos(scan.bearing)
    ey = scan.range * np.sin(scan.bearing)
    omega = v * math.tan(phi) / params.wheelbase_l
    if abs(omega) < 1e-12:
        dx = v * tau
        dy = np.zeros(n)
        dth = np.zeros(n)
    else:
        radius = v / omega
        dth = omega * tau
        dx = radius * np.sin(dth)
        dy = radius * (1.0 - np.cos(dth))
    c, s = np.cos(dth), np.sin(dth)
    return dx + c * ex - s * ey, dy + s * ex + c * ey


@dataclass(slots=True)
class PreparedCloud:
    """Valid beams of one scan, motion-corrected and calibrated."""

    x: np.ndarray            # vehicle scan-start frame
    y: np.ndarray
    reflectivity: np.ndarray  # calibrated, float
    class_label: np.ndarray
    rgb: np.ndarray
    has_cam: np.ndarray
    laser_id: np.ndarray
    range: np.ndarray
    ground: np.ndarray        # floor returns (laser ground ring)


def prepare_cloud(
    pkg: DataPackage,
    params: VehicleParams = VehicleParams(),
    odom_calib: OdomCalib | None = None,
    reflect_table: CalibTable | None = None,
    rev_period: float = 0.1,
) -> PreparedCloud:
    """Filter invalid ranges, correct intra-scan motion, calibrate reflectivity."""
    odom = odom_calib.apply(pkg.odom) if odom_calib else pkg.odom
    cx, cy = motion_correct_cloud(pkg.beams, odom.v, odom.phi, params, rev_period)
    valid = pkg.beams.valid
    refl = pkg.beams.reflectivity[valid].astype(np.float64)
    if reflect_table is not None:
        refl = reflect_table.apply_bulk(
            pkg.beams.laser_id[valid], refl, pkg.beams.range[valid]
        )
    return PreparedCloud(
        x=cx[valid],
        y=cy[valid],
        reflectivity=refl,
        class_label=pkg.beams.class_label[valid],
        rgb=pkg.beams.rgb[valid],
        has_cam=pkg.beams.has_cam[valid],
        laser_id=pkg.beams.laser_id[valid],
        range=pkg.beams.range[valid],
        ground=is_ground_return(pkg.beams.laser_id[valid], pkg.beams.range[valid]),
    )
