"""Deterministic synthetic world and sensor-log generator.

The world is a class-labelled cell grid built around a closed driving loop
(straights, corner arcs, one hairpin U-turn, one plaza loop). A kinematic
vehicle follows the loop under pure pursuit and emits GPS, odometry, and
fused beam scans at configurable rates, with every corruption source
(noise, biases, illumination, label flips, parked-car distractors)
injected explicitly and seeded.

Log format: line-delimited JSON, one record per line with fields
  {"t", "kind": "gps",   "x", "y", "theta"}
  {"t", "kind": "odom",  "v", "phi"}
  {"t", "kind": "beams", "bearing", "laser_id", "range", "reflectivity",
   "has_cam", "rgb", "class_label"}
where beam fields are parallel per-beam arrays. Ground truth rides in a
CSV sidecar `t,x,y,theta` with one row per beams record. The world file is
a text grid with a class table; see save_world.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Pose2D, VehicleParams, normalize_angle
from .errors import DataError, SimulationError

NUM_LASERS = 32
MAX_BEAM_RANGE = 70.0
MIN_BEAM_RANGE = 1.0
NO_HIT_RANGE = 71.5

# The lower half of the laser stack points down and intersects the ground
# plane at a fixed per-laser range (geometric ladder); the upper half runs
# parallel to the ground and only returns on obstacles. A beam whose range
# matches its laser's ground ring is a floor return, not an obstacle.
GROUND_RANGES = np.full(NUM_LASERS, np.inf)
GROUND_RANGES[: NUM_LASERS // 2] = 2.5 * (20.0 / 2.5) ** (
    np.arange(NUM_LASERS // 2) / (NUM_LASERS // 2 - 1)
)
GROUND_RING_TOL = 0.15


def is_ground_return(laser_id: np.ndarray, rng: np.ndarray) -> np.ndarray:
    """True for beams that ended on their laser's ground ring."""
    g = GROUND_RANGES[np.asarray(laser_id, dtype=np.int64)]
    return np.isfinite(g) & (np.abs(np.asarray(rng) - g) <= GROUND_RING_TOL)

# class id: (name, base reflectivity, base rgb, occupied)
CLASS_TABLE = [
    ("road", 60, (70, 70, 75), False),
    ("lane_mark", 200, (235, 235, 220), False),
    ("sidewalk", 90, (150, 145, 140), False),
    ("building", 120, (170, 90, 60), True),
    ("vegetation", 40, (45, 140, 55), True),
    ("car", 150, (185, 40, 40), True),
    ("terrain", 30, (110, 100, 80), False),
    ("pole", 180, (200, 200, 210), True),
]
NUM_CLASSES = len(CLASS_TABLE)
(
    CLASS_ROAD,
    CLASS_LANE,
    CLASS_SIDEWALK,
    CLASS_BUILDING,
    CLASS_VEGETATION,
    CLASS_CAR,
    CLASS_TERRAIN,
    CLASS_POLE,
) = range(NUM_CLASSES)
BASE_REFLECT = np.array([c[1] for c in CLASS_TABLE], dtype=np.float64)
BASE_RGB = np.array([c[2] for c in CLASS_TABLE], dtype=np.float64)
OCCUPIED_CLASS = np.array([c[3] for c in CLASS_TABLE], dtype=bool)

# The simulated segmentation vocabulary does not separate lane marks from
# road surface (matching street-scene label sets), so semantic labels lose
# the painted road texture that reflectivity and color retain.
SEGMENTATION_REMAP = np.arange(NUM_CLASSES)
SEGMENTATION_REMAP[CLASS_LANE] = CLASS_ROAD


@dataclass(frozen=True, slots=True)
class WorldSpec:
    """Geometry template for the synthetic world; lengths in meters."""

    scale: float = 1.0
    edge_a: float = 15.0          # bottom straights flanking the hairpin
    edge_b: float = 15.0
    right_edge: float = 50.0
    corner_radius: float = 8.0
    uturn_radius: float = 6.0
    plaza_radius: float = 10.0
    stub_length: float = 12.0
    road_half_width: float = 4.0
    sidewalk_width: float = 1.5
    lane_dash_on: float = 2.0
    lane_dash_period: float = 4.0
    pole_spacing: float = 18.0
    pole_offset: float = 5.0
    building_count: int = 60
    building_size_range: tuple[float, float] = (6.0, 14.0)
    building_band: float = 17.0
    vegetation_count: int = 120
    vegetation_radius_range: tuple[float, float] = (0.3, 2.2)
    margin: float = 19.0
    resolution: float = 0.2
    # parked-car distractors: (arc position, lateral offset, length, width);
    # listed only on specs used for test logs
    parked_cars: tuple[tuple[float, float, float, float], ...] = ()

    def scaled(self) -> "WorldSpec":
        if self.scale == 1.0:
            return self
        s = self.scale
        return replace(
            self,
            scale=1.0,
            edge_a=self.edge_a * s,
            edge_b=self.edge_b * s,
            right_edge=self.right_edge * s,
            stub_length=self.stub_length * s,
            building_count=round(self.building_count * s),
            vegetation_count=round(self.vegetation_count * s),
        )


@dataclass(slots=True)
class World:
    """Ground-truth class grid plus the drivable loop route."""

    grid: np.ndarray                 # (rows, cols) uint8 class ids; row = y cell
    resolution: float
    route: np.ndarray                # (n, 2) closed-loop waypoints, ~0.5 m apart
    base_reflect: np.ndarray = field(default_factory=lambda: BASE_REFLECT.copy())
    base_rgb: np.ndarray = field(default_factory=lambda: BASE_RGB.copy())
    occupied_class: np.ndarray = field(default_factory=lambda: OCCUPIED_CLASS.copy())

    @property
    def occupied_grid(self) -> np.ndarray:
        return self.occupied_class[self.grid]

    @property
    def extent(self) -> tuple[float, float]:
        return self.grid.shape[1] * self.resolution, self.grid.shape[0] * self.resolution


@dataclass(frozen=True, slots=True)
class SimNoise:
    """Every corruption the preprocessing pipeline is expected to undo."""

    gps_sigma_xy: float = 0.0
    gps_jump_prob: float = 0.0
    gps_jump_mag: float = 0.0
    odom_v_mult: float = 1.0
    odom_phi_mult: float = 1.0
    odom_phi_add: float = 0.0
    range_sigma: float = 0.0
    per_laser_reflect_offset: tuple[float, ...] = (0.0,) * NUM_LASERS
    reflect_sigma: float = 0.0
    label_noise_prob: float = 0.0
    illumination_gain: float = 1.0
    rgb_sigma: float = 0.0
    # camera/LiDAR extrinsic misalignment in radians of bearing: camera
    # attributes are sampled at a per-scan-correlated angular offset, so the
    # projection error grows with range
    cam_misalign_sigma: float = 0.0
    # usable camera depth; dim scenes only yield labels/colors close to the
    # car, which strips the far-field structure from the fused cloud
    cam_max_range: float = math.inf
    seed: int = 0

    def __post_init__(self) -> None:
        for p in (self.gps_jump_prob, self.label_noise_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.illumination_gain <= 0.0:
            raise ValueError("illumination_gain must be positive")
        if len(self.per_laser_reflect_offset) != NUM_LASERS:
            raise ValueError(f"per_laser_reflect_offset needs {NUM_LASERS} entries")


@dataclass(frozen=True, slots=True)
class SensorRates:
    gps_hz: float = 20.0
    odom_hz: float = 50.0
    beams_hz: float = 10.0
    beams_per_rev: int = 720
    cam_fov: float = math.pi / 2.0

    def __post_init__(self) -> None:
        if min(self.gps_hz, self.odom_hz, self.beams_hz) <= 0.0:
            raise ValueError("sensor rates must be positive")
        if self.beams_per_rev < 2:
            raise ValueError("beams_per_rev must be at least 2")


@dataclass(slots=True)
class GpsRecord:
    t: float
    x: float
    y: float
    theta: float


@dataclass(slots=True)
class OdomRecord:
    t: float
    v: float
    phi: float


@dataclass(slots=True)
class BeamScan:
    """One full revolution of fused per-beam attributes."""

    t: float
    bearing: np.ndarray
    laser_id: np.ndarray
    range: np.ndarray
    reflectivity: np.ndarray
    has_cam: np.ndarray
    rgb: np.ndarray            # (n, 3) uint8
    class_label: np.ndarray    # -1 where no camera coverage

    @property
    def valid(self) -> np.ndarray:
        return (self.range >= MIN_BEAM_RANGE) & (self.range <= MAX_BEAM_RANGE)


LogRecord = GpsRecord | OdomRecord | BeamScan


# --------------------------------------------------------------------- world


def _turtle_path(spec: WorldSpec, step: float = 0.25) -> np.ndarray:
    """Sample the closed loop centerline: straights, corners, hairpin, plaza."""
    rc, ru, rp = spec.corner_radius, spec.uturn_radius, spec.plaza_radius
    top_edge = spec.edge_a + spec.edge_b + 2 * rc + 2 * ru + rc + rp
    left_edge = spec.right_edge - rp - rc
    if left_edge <= 2.0:
        raise SimulationError("degenerate extent: right_edge too short for plaza loop")
    segments = [
        ("s", spec.edge_a),
        ("a", math.pi / 2, rc),       # into the hairpin stub
        ("s", spec.stub_length),
        ("a", -math.pi, ru),          # the U-turn
        ("s", spec.stub_length),
        ("a", math.pi / 2, rc),       # back onto the bottom edge
        ("s", spec.edge_b),
        ("a", math.pi / 2, rc),
        ("s", spec.right_edge),
        ("a", -1.5 * math.pi, rp),    # plaza loop, driven clockwise
        ("s", top_edge),
        ("a", math.pi / 2, rc),
        ("s", left_edge),
        ("a", math.pi / 2, rc),
    ]
    pts = [(0.0, 0.0)]
    x, y, heading = 0.0, 0.0, 0.0
    for seg in segments:
        if seg[0] == "s":
            length = seg[1]
            n = max(1, int(math.ceil(length / step)))
            for k in range(1, n + 1):
                d = length * k / n
                pts.append((x + d * math.cos(heading), y + d * math.sin(heading)))
            x, y = pts[-1]
        else:
            angle, radius = seg[1], seg[2]
            side = 1.0 if angle > 0 else -1.0
            cx = x - side * radius * math.sin(heading)
            cy = y + side * radius * math.cos(heading)
            n = max(2, int(math.ceil(abs(angle) * radius / step)))
            start = math.atan2(y - cy, x - cx)
            for k in range(1, n + 1):
                a = start + angle * k / n
                pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
            x, y = pts[-1]
            heading = normalize_angle(heading + angle)
    path = np.array(pts)
    if np.linalg.norm(path[-1] - path[0]) > 1e-6:
        raise SimulationError("route template failed to close")
    return path[:-1]  # drop the duplicated start point


def _path_normals(path: np.ndarray) -> np.ndarray:
    tangents = np.diff(np.vstack([path, path[:1]]), axis=0)
    tangents /= np.maximum(np.linalg.norm(tangents, axis=1, keepdims=True), 1e-12)
    return np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)


def generate_world(spec: WorldSpec, seed: int) -> World:
    """Deterministically rasterize the world for (spec, seed)."""
    spec = spec.scaled()
    rng = np.random.default_rng(seed)
    res = spec.resolution
    path = _turtle_path(spec, step=res / 2.0)

    pad = spec.road_half_width + spec.sidewalk_width + spec.margin
    shift = pad - path.min(axis=0)
    path = path + shift
    hi = path.max(axis=0) + pad
    cols = int(math.ceil(hi[0] / res))
    rows = int(math.ceil(hi[1] / res))
    grid = np.full((rows, cols), CLASS_TERRAIN, dtype=np.uint8)

    center = np.zeros((rows, cols), dtype=bool)
    pc = np.floor(path / res).astype(np.int64)
    center[pc[:, 1].clip(0, rows - 1), pc[:, 0].clip(0, cols - 1)] = True
    dist = ndimage.distance_transform_edt(~center) * res
    grid[dist <= spec.road_half_width + spec.sidewalk_width] = CLASS_SIDEWALK
    grid[dist <= spec.road_half_width] = CLASS_ROAD

    # dashed centerline lane marks; dash/gap lengths vary so the pattern is
    # aperiodic and longitudinal matches are unambiguous
    seglen = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    edges = [0.0]
    while edges[-1] < arc[-1]:
        edges.append(edges[-1] + rng.uniform(0.6, 1.0) * spec.lane_dash_on)
        edges.append(edges[-1] + rng.uniform(0.6, 1.4) * (spec.lane_dash_period - spec.lane_dash_on))
    dash = (np.searchsorted(np.asarray(edges), arc, side="right") % 2) == 1
    lane = np.floor(path[dash] / res).astype(np.int64)
    grid[lane[:, 1].clip(0, rows - 1), lane[:, 0].clip(0, cols - 1)] = CLASS_LANE

    # street furniture: light poles alternate sides of the road
    pole_normals = _path_normals(path)
    if spec.pole_spacing > 0:
        side = 1.0
        for s_pos in np.arange(spec.pole_spacing / 2, arc[-1], spec.pole_spacing):
            i = int(np.searchsorted(arc, s_pos).clip(0, len(path) - 1))
            px, py = path[i] + side * spec.pole_offset * pole_normals[i]
            side = -side
            pr, pc2 = int(py / res), int(px / res)
            if 0 <= pr < rows - 1 and 0 <= pc2 < cols - 1:
                grid[pr : pr + 2, pc2 : pc2 + 2] = CLASS_POLE

    clearance = spec.road_half_width + spec.sidewalk_width + 0.5
    normals = _path_normals(path)
    yy, xx = np.mgrid[0:rows, 0:cols]

    def try_place_rect(half_w: float, half_h: float, angle: float, cls: int) -> bool:
        # oblique rectangles keep facades off the road axis, which anchors
        # localization longitudinally along straights
        i = rng.integers(0, len(path))
        side = 1.0 if rng.random() < 0.5 else -1.0
        reach = math.hypot(half_w, half_h)
        offset = rng.uniform(clearance + reach, spec.building_band)
        cx, cy = path[i] + side * offset * normals[i]
        r0, r1 = int((cy - reach) / res), int((cy + reach) / res) + 2
        c0, c1 = int((cx - reach) / res), int((cx + reach) / res) + 2
        if c0 < 0 or r0 < 0 or c1 > cols or r1 > rows:
            return False
        sub = (slice(r0, r1), slice(c0, c1))
        px = (xx[sub] + 0.5) * res - cx
        py = (yy[sub] + 0.5) * res - cy
        ca, sa = math.cos(angle), math.sin(angle)
        inside = (np.abs(ca * px + sa * py) <= half_w) & (np.abs(-sa * px + ca * py) <= half_h)
        if (grid[sub][inside] != CLASS_TERRAIN).any() or dist[sub][inside].size == 0 or dist[sub][inside].min() <= clearance:
            return False
        grid[sub][inside] = cls
        return True

    lo, hi_sz = spec.building_size_range
    placed = tries = 0
    while placed < spec.building_count and tries < spec.building_count * 40:
        tries += 1
        if try_place_rect(
            rng.uniform(lo, hi_sz) / 2,
            rng.uniform(lo, hi_sz) / 2,
            rng.uniform(0.0, math.pi),
            CLASS_BUILDING,
        ):
            placed += 1
    rlo, rhi = spec.vegetation_radius_range
    placed = tries = 0
    while placed < spec.vegetation_count and tries < spec.vegetation_count * 40:
        tries += 1
        i = rng.integers(0, len(path))
        side = 1.0 if rng.random() < 0.5 else -1.0
        radius = rng.uniform(rlo, rhi)
        offset = rng.uniform(clearance + radius, spec.building_band)
        cx, cy = path[i] + side * offset * normals[i]
        r0, r1 = int((cy - radius) / res), int((cy + radius) / res) + 2
        c0, c1 = int((cx - radius) / res), int((cx + radius) / res) + 2
        if c0 < 0 or r0 < 0 or c1 > cols or r1 > rows:
            continue
        sub = (slice(r0, r1), slice(c0, c1))
        inside = ((xx[sub] + 0.5) * res - cx) ** 2 + ((yy[sub] + 0.5) * res - cy) ** 2 <= radius**2
        if (grid[sub][inside] != CLASS_TERRAIN).any():
            continue
        grid[sub][inside] = CLASS_VEGETATION
        placed += 1

    for s_pos, lateral, length, width in spec.parked_cars:
        i = int(np.searchsorted(arc, s_pos % arc[-1]).clip(0, len(path) - 1))
        tangent = np.array([-normals[i, 1], normals[i, 0]])
        c = path[i] + lateral * normals[i]
        span = int(math.ceil(max(length, width) / res)) + 2
        pr, pcx = int(c[1] / res), int(c[0] / res)
        sub = (
            slice(max(0, pr - span), min(rows, pr + span)),
            slice(max(0, pcx - span), min(cols, pcx + span)),
        )
        px = (xx[sub] + 0.5) * res - c[0]
        py = (yy[sub] + 0.5) * res - c[1]
        along = px * tangent[0] + py * tangent[1]
        across = px * normals[i, 0] + py * normals[i, 1]
        grid[sub][(np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)] = CLASS_CAR

    # route waypoints every ~0.5 m of arc length, closed
    spacing = 0.5
    s_samples = np.arange(0.0, arc[-1], spacing)
    route = np.stack(
        [np.interp(s_samples, arc, path[:, 0]), np.interp(s_samples, arc, path[:, 1])],
        axis=1,
    )
    route = np.vstack([route, path[:1]])
    return World(grid=grid, resolution=res, route=route)


def save_world(world: World, path: str | Path) -> None:
    rows, cols = world.grid.shape
    lines = [
        "# gridloc world v1",
        f"resolution={world.resolution!r}",
        f"cols={cols}",
        f"rows={rows}",
        f"num_classes={len(world.base_reflect)}",
    ]
    for cid, (name, refl, rgb, occ) in enumerate(CLASS_TABLE):
        lines.append(f"class={cid} {name} {refl} {rgb[0]} {rgb[1]} {rgb[2]} {int(occ)}")
    lines.append(f"route={len(world.route)}")
    for x, y in world.route:
        lines.append(f"{x:.4f} {y:.4f}")
    lines.append("grid=")
    digits = np.char.mod("%d", world.grid)
    for r in range(rows):
        lines.append("".join(digits[r]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_world(path: str | Path) -> World:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "# gridloc world v1":
        raise DataError(f"not a world file: {path}")
    meta: dict[str, str] = {}
    i = 1
    while "=" in text[i] and not text[i].startswith(("class=", "route=", "grid=")):
        k, v = text[i].split("=", 1)
        meta[k] = v
        i += 1
    while text[i].startswith("class="):
        i += 1  # class table is fixed; present for human readers
    if not text[i].startswith("route="):
        raise DataError("world file missing route")
    n_route = int(text[i].split("=", 1)[1])
    i += 1
    route = np.array([[float(v) for v in text[i + k].split()] for k in range(n_route)])
    i += n_route
    if text[i] != "grid=":
        raise DataError("world file missing grid")
    i += 1
    rows, cols = int(meta["rows"]), int(meta["cols"])
    grid = np.frombuffer("".join(text[i : i + rows]).encode(), dtype=np.uint8).reshape(rows, cols) - ord("0")
    return World(grid=grid.astype(np.uint8), resolution=float(meta["resolution"]), route=route)


def seeded_parked_cars(
    world: World, count: int, seed: int, lateral: float = 5.2
) -> tuple[tuple[float, float, float, float], ...]:
    """Distractor rectangles along the route at roadside offsets."""
    rng = np.random.default_rng(seed)
    seglen = np.linalg.norm(np.diff(world.route, axis=0), axis=1)
    total = float(seglen.sum())
    cars = []
    for s in np.sort(rng.uniform(0.0, total, count)):
        side = 1.0 if rng.random() < 0.5 else -1.0
        cars.append((float(s), side * lateral, 4.2, 1.8))
    return tuple(cars)


# ----------------------------------------------------------------- driving


def route_for_laps(route: np.ndarray, laps: float) -> np.ndarray:
    """Concatenate a closed route for (possibly fractional) laps."""
    if laps <= 0:
        raise ValueError("laps must be positive")
    body = route[:-1] if np.allclose(route[0], route[-1]) else route
    n_full = int(laps)
    parts = [body] * n_full
    frac = laps - n_full
    if frac > 1e-9:
        parts.append(body[: max(2, int(len(body) * frac))])
        return np.vstack(parts)
    return np.vstack(parts + [body[:1]])


@dataclass(slots=True)
class Trajectory:
    """Ground-truth vehicle states sampled at the control rate."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    phi: np.ndarray

    def pose_at(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        times = np.clip(times, self.t[0], self.t[-1])
        x = np.interp(times, self.t, self.x)
        y = np.interp(times, self.t, self.y)
        cos = np.interp(times, self.t, np.cos(self.theta))
        sin = np.interp(times, self.t, np.sin(self.theta))
        return x, y, np.arctan2(sin, cos)

    def v_phi_at(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        times = np.clip(times, self.t[0], self.t[-1])
        return (
            np.interp(times, self.t, self.v),
            np.interp(times, self.t, self.phi),
        )


def drive_route(
    route: np.ndarray,
    params: VehicleParams,
    speed: float = 7.0,
    lookahead: float = 4.5,
    control_hz: float = 100.0,
) -> Trajectory:
    """Pure-pursuit tracking of the waypoint polyline at constant speed."""
    seglen = np.linalg.norm(np.diff(route, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arc[-1]
    dt = 1.0 / control_hz
    heading0 = math.atan2(route[1, 1] - route[0, 1], route[1, 0] - route[0, 0])
    x, y, theta = float(route[0, 0]), float(route[0, 1]), heading0
    seg = 0
    s_cur = 0.0
    ts, xs, ys, thetas, vs, phis = [], [], [], [], [], []
    t = 0.0
    max_t = 3.0 * total / speed + 10.0
    last_progress_t, last_progress_s = 0.0, 0.0
    while s_cur < total - 1.0:
        # advance the projected arc position monotonically
        while True:
            a, b = route[seg], route[seg + 1]
            ab = b - a
            denom = float(ab @ ab)
            u = 1.0 if denom == 0 else float(((np.array([x, y]) - a) @ ab) / denom)
            if u > 1.0 and seg < len(route) - 2:
                seg += 1
                continue
            s_cur = arc[seg] + min(max(u, 0.0), 1.0) * seglen[seg]
            break
        s_tgt = min(s_cur + lookahead, total)
        j = int(np.searchsorted(arc, s_tgt).clip(1, len(arc) - 1))
        frac = (s_tgt - arc[j - 1]) / max(seglen[j - 1], 1e-12)
        tx, ty = route[j - 1] + frac * (route[j] - route[j - 1])
        alpha = normalize_angle(math.atan2(ty - y, tx - x) - theta)
        phi = max(-params.max_steering, min(params.max_steering,
                  math.atan2(2.0 * params.wheelbase_l * math.sin(alpha), lookahead)))
        ts.append(t)
        xs.append(x)
        ys.append(y)
        thetas.append(theta)
        vs.append(speed)
        phis.append(phi)
        x += speed * dt * math.cos(theta)
        y += speed * dt * math.sin(theta)
        theta = normalize_angle(theta + speed * dt * math.tan(phi) / params.wheelbase_l)
        t += dt
        if s_cur - last_progress_s > 0.05:
            last_progress_s, last_progress_t = s_cur, t
        elif t - last_progress_t > 5.0:
            raise SimulationError("unreachable waypoint: no progress along the route")
        if t > max_t:
            raise SimulationError("route tracking exceeded the time budget")
    ts.append(t)
    xs.append(x)
    ys.append(y)
    thetas.append(theta)
    vs.append(speed)
    phis.append(phis[-1] if phis else 0.0)
    return Trajectory(*(np.array(a) for a in (ts, xs, ys, thetas, vs, phis)))


# ------------------------------------------------------------------ sensing


def _raycast_scan(
    world: World,
    origins: np.ndarray,
    angles: np.ndarray,
    step: float,
    max_range: float,
    chunk: int = 64,
) -> np.ndarray:
    """March all rays of one scan; returns hit distance or inf per ray."""
    occ = world.occupied_grid
    rows, cols = occ.shape
    res = world.resolution
    n = len(angles)
    dirx, diry = np.cos(angles), np.sin(angles)
    r_hit = np.full(n, np.inf)
    alive = np.arange(n)
    radii = np.arange(1, int(max_range / step) + 1) * step
    for c0 in range(0, len(radii), chunk):
        rr = radii[c0 : c0 + chunk]
        px = origins[alive, 0, None] + dirx[alive, None] * rr
        py = origins[alive, 1, None] + diry[alive, None] * rr
        gx = np.floor(px / res).astype(np.int64)
        gy = np.floor(py / res).astype(np.int64)
        inside = (gx >= 0) & (gx < cols) & (gy >= 0) & (gy < rows)
        hit = np.zeros(px.shape, dtype=bool)
        hit[inside] = occ[gy[inside], gx[inside]]
        any_hit = hit.any(axis=1)
        idx = np.argmax(hit, axis=1)
        r_hit[alive[any_hit]] = rr[idx[any_hit]]
        alive = alive[~any_hit]
        if len(alive) == 0:
            break
    return r_hit


def _class_at(world: World, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    res = world.resolution
    rows, cols = world.grid.shape
    gx = np.floor(px / res).astype(np.int64).clip(0, cols - 1)
    gy = np.floor(py / res).astype(np.int64).clip(0, rows - 1)
    return world.grid[gy, gx]


def simulate_log(
    world: World,
    route: np.ndarray,
    noise: SimNoise,
    rates: SensorRates = SensorRates(),
    params: VehicleParams = VehicleParams(),
    speed: float = 7.0,
) -> tuple[list[LogRecord], list[tuple[float, Pose2D]]]:
    """Drive the route and emit the interleaved sensor log plus truth poses.

    Deterministic for fixed inputs: all randomness flows from noise.seed.
    """
    traj = drive_route(route, params, speed=speed)
    rng = np.random.default_rng(noise.seed)
    t_end = float(traj.t[-1])
    records: list[LogRecord] = []

    gps_t = np.arange(0.0, t_end, 1.0 / rates.gps_hz)
    gx, gy, gth = traj.pose_at(gps_t)
    gx = gx + rng.normal(0.0, noise.gps_sigma_xy, len(gps_t)) if noise.gps_sigma_xy else gx
    gy = gy + rng.normal(0.0, noise.gps_sigma_xy, len(gps_t)) if noise.gps_sigma_xy else gy
    jumps = rng.random(len(gps_t)) < noise.gps_jump_prob
    jdir = rng.uniform(0.0, 2.0 * math.pi, len(gps_t))
    gx = gx + jumps * noise.gps_jump_mag * np.cos(jdir)
    gy = gy + jumps * noise.gps_jump_mag * np.sin(jdir)
    for i, t in enumerate(gps_t):
        records.append(GpsRecord(float(t), float(gx[i]), float(gy[i]), float(gth[i])))

    odom_t = np.arange(0.0, t_end, 1.0 / rates.odom_hz)
    ov, ophi = traj.v_phi_at(odom_t)
    ov = ov * noise.odom_v_mult
    ophi = np.clip(ophi * noise.odom_phi_mult + noise.odom_phi_add, -params.max_steering, params.max_steering)
    for i, t in enumerate(odom_t):
        records.append(OdomRecord(float(t), float(ov[i]), float(ophi[i])))

    n = rates.beams_per_rev
    rev_period = 1.0 / rates.beams_hz
    bearings = 2.0 * math.pi * np.arange(n) / n
    laser_ids = (np.arange(n) % NUM_LASERS).astype(np.int64)
    beam_frac = np.arange(n) / (n - 1)
    offsets = np.asarray(noise.per_laser_reflect_offset)
    fov_ok = np.abs(((bearings + math.pi) % (2.0 * math.pi)) - math.pi) <= rates.cam_fov / 2.0
    truth: list[tuple[float, Pose2D]] = []
    t0 = 0.0
    while t0 + rev_period <= t_end + 1e-9:
        tb = t0 + beam_frac * rev_period
        bx, by, bth = traj.pose_at(tb)
        origins = np.stack([bx, by], axis=1)
        angles = bth + bearings
        r_obstacle = _raycast_scan(world, origins, angles, world.resolution / 2.0, MAX_BEAM_RANGE + 1.0)
        r_true = np.minimum(r_obstacle, GROUND_RANGES[laser_ids])
        hit = np.isfinite(r_true)
        r_meas = np.where(hit, r_true, NO_HIT_RANGE)
        if noise.range_sigma:
            r_meas = r_meas + hit * rng.normal(0.0, noise.range_sigma, n)
        ex = bx + np.cos(angles) * np.where(hit, r_true, 0.0)
        ey = by + np.sin(angles) * np.where(hit, r_true, 0.0)
        cls = np.where(hit, _class_at(world, ex, ey), 0).astype(np.int64)
        refl = BASE_REFLECT[cls] + offsets[laser_ids]
        if noise.reflect_sigma:
            refl = refl + rng.normal(0.0, noise.reflect_sigma, n)
        refl = np.clip(np.rint(refl), 0, 255).astype(np.int64)
        refl[~hit] = 0
        has_cam = fov_ok & hit & (r_true <= noise.cam_max_range)
        # camera attributes come from the (slightly misaligned) projection
        # of the beam endpoint, not the endpoint itself
        db = rng.normal(0.0, noise.cam_misalign_sigma) if noise.cam_misalign_sigma else 0.0
        mx = bx + np.cos(angles + db) * np.where(hit, r_true, 0.0)
        my = by + np.sin(angles + db) * np.where(hit, r_true, 0.0)
        cam_cls = np.where(hit, _class_at(world, mx, my), 0).astype(np.int64)
        rgb = np.zeros((n, 3), dtype=np.int64)
        cam_rgb = BASE_RGB[cam_cls[has_cam]] * noise.illumination_gain
        if noise.rgb_sigma:
            cam_rgb = cam_rgb + rng.normal(0.0, noise.rgb_sigma, cam_rgb.shape)
        rgb[has_cam] = np.clip(np.rint(cam_rgb), 0, 255)
        labels = np.where(has_cam, SEGMENTATION_REMAP[cam_cls], -1)
        flips = (rng.random(n) < noise.label_noise_prob) & has_cam
        labels = np.where(flips, rng.integers(0, NUM_CLASSES, n), labels)
        records.append(
            BeamScan(
                t=float(t0),
                bearing=bearings.copy(),
                laser_id=laser_ids.copy(),
                range=r_meas,
                reflectivity=refl,
                has_cam=has_cam,
                rgb=rgb,
                class_label=labels,
            )
        )
        px, py, pth = traj.pose_at(np.array([t0]))
        truth.append((float(t0), Pose2D(float(px[0]), float(py[0]), float(pth[0]))))
        t0 += rev_period

    order = {GpsRecord: 0, OdomRecord: 1, BeamScan: 2}
    records.sort(key=lambda r: (round(r.t, 9), order[type(r)]))
    return records, truth


# ---------------------------------------------------------------------- io


def write_log(records: list[LogRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for rec in records:
            if isinstance(rec, GpsRecord):
                obj = {"t": round(rec.t, 6), "kind": "gps", "x": rec.x, "y": rec.y, "theta": rec.theta}
            elif isinstance(rec, OdomRecord):
                obj = {"t": round(rec.t, 6), "kind": "odom", "v": rec.v, "phi": rec.phi}
            else:
                obj = {
                    "t": round(rec.t, 6),
                    "kind": "beams",
                    "bearing": [round(b, 6) for b in rec.bearing.tolist()],
                    "laser_id": rec.laser_id.tolist(),
                    "range": [round(r, 4) for r in rec.range.tolist()],
                    "reflectivity": rec.reflectivity.tolist(),
                    "has_cam": rec.has_cam.tolist(),
                    "rgb": rec.rgb.tolist(),
                    "class_label": rec.class_label.tolist(),
                }
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_log(path: str | Path) -> list[LogRecord]:
    records: list[LogRecord] = []
    with open(path) as f:
        for line in f:
            obj = json.loads(line)
            kind = obj["kind"]
            if kind == "gps":
                records.append(GpsRecord(obj["t"], obj["x"], obj["y"], obj["theta"]))
            elif kind == "odom":
                records.append(OdomRecord(obj["t"], obj["v"], obj["phi"]))
            elif kind == "beams":
                records.append(
                    BeamScan(
                        t=obj["t"],
                        bearing=np.array(obj["bearing"]),
                        laser_id=np.array(obj["laser_id"], dtype=np.int64),
                        range=np.array(obj["range"]),
                        reflectivity=np.array(obj["reflectivity"], dtype=np.int64),
                        has_cam=np.array(obj["has_cam"], dtype=bool),
                        rgb=np.array(obj["rgb"], dtype=np.int64),
                        class_label=np.array(obj["class_label"], dtype=np.int64),
                    )
                )
            else:
                raise DataError(f"unknown record kind {kind!r}")
    return records


def write_truth(truth: list[tuple[float, Pose2D]], path: str | Path) -> None:
    with open(path, "w") as f:
        f.write("t,x,y,theta\n")
        for t, p in truth:
            f.write(f"{t:.6f},{p.x:.9f},{p.y:.9f},{p.theta:.9f}\n")


def read_truth(path: str | Path) -> list[tuple[float, Pose2D]]:
    out = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("t,x,y,theta"):
            raise DataError(f"not a trajectory csv: {path}")
        for line in f:
            t, x, y, theta = (float(v) for v in line.split(","))
            out.append((t, Pose2D(x, y, theta)))
    return out
