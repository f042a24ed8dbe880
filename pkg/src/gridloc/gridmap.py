"""Tiled 2D grid maps: occupancy, reflectivity, semantic, and color.

A map is a sparse set of square tiles keyed by integer tile index. Cells
hold per-type statistics (log-odds, Gaussian moments, class counters) and
are updated either one observation at a time or through the vectorized
bulk paths used by the mapping pipeline. Tiles serialize to a little-endian
binary format and maps render to PGM/PPM images.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Pose2D
from .errors import DataError

# Inverse sensor model constants: evidence that a hit cell is occupied and
# that a crossed cell is free, accumulated as log-odds and clamped so the
# derived probability never reaches exactly 0 or 1.
HIT_EVIDENCE = 0.9
FREE_EVIDENCE = 0.3
LOG_ODDS_HIT = math.log(HIT_EVIDENCE / (1.0 - HIT_EVIDENCE))
LOG_ODDS_FREE = math.log(FREE_EVIDENCE / (1.0 - FREE_EVIDENCE))
LOG_ODDS_CLAMP = 50.0

TILE_MAGIC = b"GMAP"
TILE_VERSION = 1
_HEADER_FMT = "<4sHBHdIii"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

# 20 visually distinct colors; class ids wrap around if a world defines more.
SEMANTIC_PALETTE = np.array(
    [
        (90, 90, 95),      # road-like
        (240, 240, 60),    # lane mark
        (170, 170, 170),   # sidewalk
        (200, 80, 60),     # building
        (60, 160, 70),     # vegetation
        (60, 90, 200),     # car
        (220, 120, 40),
        (140, 60, 160),
        (40, 190, 190),
        (200, 40, 120),
        (120, 200, 40),
        (40, 60, 120),
        (250, 150, 150),
        (150, 250, 150),
        (150, 150, 250),
        (100, 50, 20),
        (20, 100, 50),
        (50, 20, 100),
        (230, 230, 230),
        (30, 30, 30),
    ],
    dtype=np.uint8,
)

UNOBSERVED_GRAY = 128


class MapType(enum.Enum):
    OCCUPANCY = 0
    REFLECTIVITY = 1
    SEMANTIC = 2
    COLOR = 3

    @property
    def channels(self) -> int:
        return 3 if self is MapType.COLOR else 1

    @property
    def file_name(self) -> str:
        return self.name.lower()

    @staticmethod
    def from_name(name: str) -> "MapType":
        try:
            return MapType[name.upper()]
        except KeyError:
            raise DataError(f"unknown map type {name!r}") from None


@dataclass(frozen=True, slots=True)
class MapConfig:
    """Geometry and payload type of a grid map."""

    resolution: float = 0.2
    tile_size: float = 70.0
    map_type: MapType = MapType.OCCUPANCY
    num_classes: int = 0

    def __post_init__(self) -> None:
        if self.resolution <= 0.0:
            raise ValueError("resolution must be positive")
        cells = self.tile_size / self.resolution
        if abs(cells - round(cells)) > 1e-9 or round(cells) < 1:
            raise ValueError("tile_size must be a positive integer multiple of resolution")
        if self.map_type is MapType.SEMANTIC and self.num_classes < 2:
            raise ValueError("semantic maps need num_classes >= 2")

    @property
    def tile_cells(self) -> int:
        return round(self.tile_size / self.resolution)


@dataclass(slots=True)
class CellObservation:
    """One observation routed to update_cell; only the field matching the
    map type is consulted."""

    occupied_evidence: float | None = None
    reflectivity: float | None = None
    color: tuple[float, float, float] | None = None
    class_id: int | None = None


class Tile:
    """Cell statistics for one square tile, stored as dense arrays."""

    __slots__ = ("config", "ix", "iy", "log_odds", "observed", "count", "mean", "m2", "counters")

    def __init__(self, config: MapConfig, ix: int, iy: int):
        self.config = config
        self.ix = ix
        self.iy = iy
        tc = config.tile_cells
        mt = config.map_type
        self.log_odds = self.observed = self.count = self.mean = self.m2 = self.counters = None
        if mt is MapType.OCCUPANCY:
            self.log_odds = np.zeros((tc, tc), dtype=np.float64)
            self.observed = np.zeros((tc, tc), dtype=bool)
        elif mt in (MapType.REFLECTIVITY, MapType.COLOR):
            ch = mt.channels
            self.count = np.zeros((tc, tc), dtype=np.uint32)
            self.mean = np.zeros((tc, tc, ch), dtype=np.float64)
            self.m2 = np.zeros((tc, tc, ch), dtype=np.float64)
        else:
            self.counters = np.ones((tc, tc, config.num_classes), dtype=np.uint32)

    def equal_contents(self, other: "Tile") -> bool:
        for name in ("log_odds", "observed", "count", "mean", "m2", "counters"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def _merge_gaussian(tile: Tile, rows, cols, n_b, mean_b, m2_b) -> None:
    """Merge per-cell batch moments into the running Welford statistics."""
    n_a = tile.count[rows, cols].astype(np.float64)[:, None]
    mu_a = tile.mean[rows, cols]
    m_a = tile.m2[rows, cols]
    n_bf = n_b.astype(np.float64)[:, None]
    n = n_a + n_bf
    delta = mean_b - mu_a
    mu = mu_a + delta * n_bf / n
    m = m_a + m2_b + delta * delta * n_a * n_bf / n
    tile.count[rows, cols] += n_b.astype(np.uint32)
    tile.mean[rows, cols] = mu
    tile.m2[rows, cols] = m


def line_cells(gx0: int, gy0: int, gx1: int, gy1: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer cells strictly between two cells along a Bresenham-style line.

    Uses rounded linear interpolation in exact integer arithmetic; endpoints
    are excluded.
    """
    dx = int(gx1) - int(gx0)
    dy = int(gy1) - int(gy0)
    n = max(abs(dx), abs(dy))
    if n <= 1:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    k = np.arange(1, n, dtype=np.int64)
    xs = gx0 + (2 * k * dx + n) // (2 * n)
    ys = gy0 + (2 * k * dy + n) // (2 * n)
    return xs, ys


def line_cells_bulk(
    gx0: int, gy0: int, gx1: np.ndarray, gy1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Intermediate cells for many rays sharing one origin cell.

    Produces the concatenation of line_cells(gx0, gy0, x, y) over all rays,
    duplicates preserved.
    """
    dx = gx1.astype(np.int64) - gx0
    dy = gy1.astype(np.int64) - gy0
    n = np.maximum(np.abs(dx), np.abs(dy))
    nmax = int(n.max(initial=0))
    if nmax <= 1:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    k = np.arange(1, nmax, dtype=np.int64)[None, :]
    mask = k < n[:, None]
    den = np.maximum(n, 1)[:, None]
    xs = gx0 + (2 * k * dx[:, None] + den) // (2 * den)
    ys = gy0 + (2 * k * dy[:, None] + den) // (2 * den)
    return xs[mask], ys[mask]


class GridMap:
    """Sparse tiled grid map with optional disk-backed tile paging.

    Without a storage directory every touched tile stays resident. With one,
    set_focus keeps the 3x3 tile window around the focus position in memory
    and persists evicted tiles, which are reloaded transparently on access.
    """

    def __init__(self, config: MapConfig, storage_dir: str | Path | None = None):
        self.config = config
        self.tiles: dict[tuple[int, int], Tile] = {}
        self.storage_dir = Path(storage_dir) if storage_dir is not None else None
        self._window: set[tuple[int, int]] | None = None
        if self.storage_dir is not None:
            self.storage_dir.mkdir(parents=True, exist_ok=True)
            self._write_meta()

    # ---------------------------------------------------------------- cells

    def world_to_cell(self, x: float, y: float) -> tuple[tuple[int, int], int, int]:
        """Map world coordinates to (tile_index, row, col) by floor division."""
        res = self.config.resolution
        tc = self.config.tile_cells
        gx = math.floor(x / res)
        gy = math.floor(y / res)
        tix, tiy = gx // tc, gy // tc
        return (tix, tiy), gy - tiy * tc, gx - tix * tc

    def global_cells(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        res = self.config.resolution
        return (
            np.floor(xs / res).astype(np.int64),
            np.floor(ys / res).astype(np.int64),
        )

    def tile(self, index: tuple[int, int], create: bool = True) -> Tile | None:
        t = self.tiles.get(index)
        if t is not None:
            return t
        if self.storage_dir is not None:
            path = self._tile_path(index)
            if path.exists():
                t = Tile(self.config, *index)
                load_tile(self, index, path.read_bytes(), into=t)
                self.tiles[index] = t
                return t
        if not create:
            return None
        t = Tile(self.config, *index)
        self.tiles[index] = t
        return t

    def set_focus(self, x: float, y: float) -> None:
        """Keep only the 3x3 tile window around (x, y) resident."""
        if self.storage_dir is None:
            return
        (fx, fy), _, _ = self.world_to_cell(x, y)
        self._window = {(fx + dx, fy + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
        for index in [i for i in self.tiles if i not in self._window]:
            self._persist_tile(index)
            del self.tiles[index]

    def flush(self) -> None:
        """Persist all resident tiles (they remain resident)."""
        if self.storage_dir is None:
            return
        for index in sorted(self.tiles):
            self._persist_tile(index)

    # --------------------------------------------------------- single ops

    def update_cell(self, x: float, y: float, obs: CellObservation) -> None:
        mt = self.config.map_type
        if mt is MapType.OCCUPANCY:
            if obs.occupied_evidence is None:
                raise ValueError("occupancy update needs occupied_evidence")
            self.add_occupancy(np.array([x]), np.array([y]), obs.occupied_evidence)
        elif mt is MapType.REFLECTIVITY:
            if obs.reflectivity is None:
                raise ValueError("reflectivity update needs a reflectivity value")
            self.add_gaussian(np.array([x]), np.array([y]), np.array([obs.reflectivity]))
        elif mt is MapType.COLOR:
            if obs.color is None:
                raise ValueError("color update needs an rgb value")
            self.add_gaussian(np.array([x]), np.array([y]), np.array([obs.color]))
        else:
            if obs.class_id is None:
                raise ValueError("semantic update needs a class id")
            self.add_semantic(np.array([x]), np.array([y]), np.array([obs.class_id]))

    def raycast_free(self, origin: Pose2D, hit_x: float, hit_y: float) -> None:
        """Decrement every cell strictly between the origin cell and the hit
        cell; the hit cell itself is not touched."""
        if self.config.map_type is not MapType.OCCUPANCY:
            raise ValueError("raycast_free applies to occupancy maps only")
        g0x, g0y = self.global_cells(np.array([origin.x]), np.array([origin.y]))
        g1x, g1y = self.global_cells(np.array([hit_x]), np.array([hit_y]))
        xs, ys = line_cells(int(g0x[0]), int(g0y[0]), int(g1x[0]), int(g1y[0]))
        self._apply_log_odds(xs, ys, LOG_ODDS_FREE)

    # ----------------------------------------------------------- bulk ops

    def add_occupancy(self, xs: np.ndarray, ys: np.ndarray, evidence: float = HIT_EVIDENCE) -> None:
        if self.config.map_type is not MapType.OCCUPANCY:
            raise ValueError("add_occupancy applies to occupancy maps only")
        if not 0.0 < evidence < 1.0:
            raise ValueError("evidence must be a probability in (0, 1)")
        gx, gy = self.global_cells(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
        self._apply_log_odds(gx, gy, math.log(evidence / (1.0 - evidence)))

    def carve_free(self, origin_x: float, origin_y: float, hit_xs: np.ndarray, hit_ys: np.ndarray) -> None:
        """Bulk free-space carving: all strictly-intermediate cells of all rays."""
        if self.config.map_type is not MapType.OCCUPANCY:
            raise ValueError("carve_free applies to occupancy maps only")
        g0x, g0y = self.global_cells(np.array([origin_x]), np.array([origin_y]))
        g1x, g1y = self.global_cells(np.asarray(hit_xs, dtype=np.float64), np.asarray(hit_ys, dtype=np.float64))
        xs, ys = line_cells_bulk(int(g0x[0]), int(g0y[0]), g1x, g1y)
        self._apply_log_odds(xs, ys, LOG_ODDS_FREE)

    def add_gaussian(self, xs: np.ndarray, ys: np.ndarray, values: np.ndarray) -> None:
        mt = self.config.map_type
        if mt not in (MapType.REFLECTIVITY, MapType.COLOR):
            raise ValueError("add_gaussian applies to reflectivity/color maps only")
        values = np.asarray(values, dtype=np.float64).reshape(len(xs), mt.channels)
        gx, gy = self.global_cells(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
        for tile, rows, cols, sel in self._group_by_tile(gx, gy):
            v = values[sel]
            key = rows.astype(np.int64) * tile.config.tile_cells + cols
            uniq, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
            sums = np.zeros((len(uniq), v.shape[1]))
            np.add.at(sums, inv, v)
            mean_b = sums / cnt[:, None]
            dev = v - mean_b[inv]
            m2_b = np.zeros_like(sums)
            np.add.at(m2_b, inv, dev * dev)
            _merge_gaussian(tile, uniq // tile.config.tile_cells, uniq % tile.config.tile_cells, cnt, mean_b, m2_b)

    def add_semantic(self, xs: np.ndarray, ys: np.ndarray, classes: np.ndarray) -> None:
        if self.config.map_type is not MapType.SEMANTIC:
            raise ValueError("add_semantic applies to semantic maps only")
        classes = np.asarray(classes, dtype=np.int64)
        if classes.size and (classes.min() < 0 or classes.max() >= self.config.num_classes):
            raise ValueError("class id outside [0, num_classes)")
        gx, gy = self.global_cells(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
        for tile, rows, cols, sel in self._group_by_tile(gx, gy):
            np.add.at(tile.counters, (rows, cols, classes[sel]), 1)

    # ------------------------------------------------------------ internals

    def _apply_log_odds(self, gx: np.ndarray, gy: np.ndarray, delta: float) -> None:
        for tile, rows, cols, _ in self._group_by_tile(gx, gy):
            np.add.at(tile.log_odds, (rows, cols), delta)
            block = tile.log_odds[rows, cols]
            tile.log_odds[rows, cols] = np.clip(block, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
            tile.observed[rows, cols] = True

    def _group_by_tile(self, gx: np.ndarray, gy: np.ndarray):
        """Yield (tile, rows, cols, selector) for each tile touched by the batch."""
        if len(gx) == 0:
            return
        tc = self.config.tile_cells
        tix = gx // tc
        tiy = gy // tc
        key = (tix + (1 << 20)) * (1 << 42) + (tiy + (1 << 20))
        for k in np.unique(key):
            sel = np.nonzero(key == k)[0]
            ix = int(tix[sel[0]])
            iy = int(tiy[sel[0]])
            tile = self.tile((ix, iy))
            rows = (gy[sel] - iy * tc).astype(np.intp)
            cols = (gx[sel] - ix * tc).astype(np.intp)
            yield tile, rows, cols, sel

    def _tile_path(self, index: tuple[int, int]) -> Path:
        name = f"{self.config.map_type.file_name}_{index[0]}_{index[1]}.tile"
        return self.storage_dir / name

    def _persist_tile(self, index: tuple[int, int]) -> None:
        self._tile_path(index).write_bytes(save_tile(self, index))

    def _write_meta(self) -> None:
        cfg = self.config
        lines = [
            f"map_type={cfg.map_type.file_name}",
            f"resolution={cfg.resolution!r}",
            f"tile_size={cfg.tile_size!r}",
            f"tile_cells={cfg.tile_cells}",
            f"num_classes={cfg.num_classes}",
        ]
        (self.storage_dir / "map.meta").write_text("\n".join(lines) + "\n")

    # ---------------------------------------------------------- persistence

    def all_tile_indices(self) -> list[tuple[int, int]]:
        """Resident plus on-disk tile indices, sorted."""
        indices = set(self.tiles)
        if self.storage_dir is not None:
            prefix = self.config.map_type.file_name + "_"
            for p in self.storage_dir.glob(prefix + "*.tile"):
                parts = p.stem[len(prefix):].split("_")
                if len(parts) == 2:
                    indices.add((int(parts[0]), int(parts[1])))
        return sorted(indices)

    def save_to_dir(self, directory: str | Path) -> None:
        """Persist every resident tile (and map.meta) under directory."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        old = self.storage_dir
        self.storage_dir = directory
        try:
            self._write_meta()
            for index in sorted(self.tiles):
                self._persist_tile(index)
        finally:
            self.storage_dir = old

    @staticmethod
    def load_dir(directory: str | Path, paged: bool = False) -> "GridMap":
        directory = Path(directory)
        meta_path = directory / "map.meta"
        if not meta_path.exists():
            raise DataError(f"no map.meta under {directory}")
        meta = dict(
            line.split("=", 1) for line in meta_path.read_text().splitlines() if line.strip()
        )
        config = MapConfig(
            resolution=float(meta["resolution"]),
            tile_size=float(meta["tile_size"]),
            map_type=MapType.from_name(meta["map_type"]),
            num_classes=int(meta["num_classes"]),
        )
        grid = GridMap(config, storage_dir=directory if paged else None)
        if not paged:
            grid.storage_dir = directory
            for index in grid.all_tile_indices():
                grid.tile(index)
            grid.storage_dir = None
        return grid


def _payload_dtype(config: MapConfig) -> np.dtype:
    mt = config.map_type
    if mt is MapType.OCCUPANCY:
        return np.dtype([("log_odds", "<f8"), ("observed", "u1")])
    if mt in (MapType.REFLECTIVITY, MapType.COLOR):
        ch = mt.channels
        return np.dtype([("count", "<u4"), ("mean", "<f8", (ch,)), ("m2", "<f8", (ch,))])
    return np.dtype(("<u4", (config.num_classes,)))


def save_tile(grid: GridMap, index: tuple[int, int]) -> bytes:
    """Serialize one tile to the binary tile format."""
    tile = grid.tile(index)
    cfg = grid.config
    header = struct.pack(
        _HEADER_FMT,
        TILE_MAGIC,
        TILE_VERSION,
        cfg.map_type.value,
        cfg.num_classes if cfg.map_type is MapType.SEMANTIC else 0,
        cfg.resolution,
        cfg.tile_cells,
        index[0],
        index[1],
    )
    dtype = _payload_dtype(cfg)
    mt = cfg.map_type
    if mt is MapType.OCCUPANCY:
        payload = np.zeros((cfg.tile_cells, cfg.tile_cells), dtype=dtype)
        payload["log_odds"] = tile.log_odds
        payload["observed"] = tile.observed
    elif mt in (MapType.REFLECTIVITY, MapType.COLOR):
        payload = np.zeros((cfg.tile_cells, cfg.tile_cells), dtype=dtype)
        payload["count"] = tile.count
        payload["mean"] = tile.mean
        payload["m2"] = tile.m2
    else:
        payload = tile.counters.astype("<u4")
    return header + payload.tobytes()


def load_tile(grid: GridMap, index: tuple[int, int], data: bytes, into: Tile | None = None) -> None:
    """Deserialize tile bytes into the map (or a provided Tile)."""
    cfg = grid.config
    if len(data) < _HEADER_SIZE:
        raise DataError("tile data truncated")
    magic, version, mt_code, num_classes, resolution, tile_cells, tix, tiy = struct.unpack(
        _HEADER_FMT, data[:_HEADER_SIZE]
    )
    if magic != TILE_MAGIC:
        raise DataError("bad tile magic")
    if version != TILE_VERSION:
        raise DataError(f"unsupported tile version {version}")
    if mt_code != cfg.map_type.value:
        raise DataError(
            f"tile type {MapType(mt_code).file_name} does not match map type {cfg.map_type.file_name}"
        )
    if cfg.map_type is MapType.SEMANTIC and num_classes != cfg.num_classes:
        raise DataError("tile num_classes mismatch")
    if abs(resolution - cfg.resolution) > 1e-12 or tile_cells != cfg.tile_cells:
        raise DataError("tile geometry mismatch")
    if (tix, tiy) != index:
        raise DataError(f"tile index mismatch: header says ({tix}, {tiy})")
    dtype = _payload_dtype(cfg)
    expected = _HEADER_SIZE + dtype.itemsize * cfg.tile_cells * cfg.tile_cells
    if len(data) != expected:
        raise DataError("tile payload size mismatch")
    tile = into if into is not None else grid.tile(index)
    mt = cfg.map_type
    tc = cfg.tile_cells
    if mt is MapType.SEMANTIC:
        raw = np.frombuffer(data, dtype="<u4", offset=_HEADER_SIZE)
        tile.counters = raw.reshape(tc, tc, cfg.num_classes).astype(np.uint32)
    else:
        raw = np.frombuffer(data, dtype=dtype, offset=_HEADER_SIZE).reshape(tc, tc)
        if mt is MapType.OCCUPANCY:
            tile.log_odds = raw["log_odds"].astype(np.float64)
            tile.observed = raw["observed"].astype(bool)
        else:
            tile.count = raw["count"].astype(np.uint32)
            tile.mean = raw["mean"].astype(np.float64).reshape(tc, tc, mt.channels)
            tile.m2 = raw["m2"].astype(np.float64).reshape(tc, tc, mt.channels)
    if into is None:
        grid.tiles[index] = tile


@dataclass(slots=True)
class DenseView:
    """Dense snapshot of a map's bounding box for fast reads.

    Rows index y cells and columns index x cells; (origin_gx, origin_gy)
    is the global cell index of element [0, 0].
    """

    config: MapConfig
    origin_gx: int
    origin_gy: int
    log_odds: np.ndarray | None = None
    observed: np.ndarray | None = None
    count: np.ndarray | None = None
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    counters: np.ndarray | None = None
    totals: np.ndarray | None = field(default=None)

    @property
    def shape(self) -> tuple[int, int]:
        for name in ("log_odds", "count", "counters"):
            a = getattr(self, name)
            if a is not None:
                return a.shape[:2]
        return (0, 0)


def dense_view(grid: GridMap) -> DenseView:
    """Materialize every tile of a map into one dense array block."""
    indices = grid.all_tile_indices()
    cfg = grid.config
    tc = cfg.tile_cells
    if not indices:
        indices = [(0, 0)]
        grid.tile((0, 0))
    xs = [i[0] for i in indices]
    ys = [i[1] for i in indices]
    x0, y0 = min(xs), min(ys)
    w = (max(xs) - x0 + 1) * tc
    h = (max(ys) - y0 + 1) * tc
    view = DenseView(config=cfg, origin_gx=x0 * tc, origin_gy=y0 * tc)
    mt = cfg.map_type
    if mt is MapType.OCCUPANCY:
        view.log_odds = np.zeros((h, w))
        view.observed = np.zeros((h, w), dtype=bool)
    elif mt in (MapType.REFLECTIVITY, MapType.COLOR):
        view.count = np.zeros((h, w), dtype=np.uint32)
        view.mean = np.zeros((h, w, mt.channels))
        view.m2 = np.zeros((h, w, mt.channels))
    else:
        view.counters = np.ones((h, w, cfg.num_classes), dtype=np.uint32)
    for index in indices:
        tile = grid.tile(index)
        r0 = (index[1] - y0) * tc
        c0 = (index[0] - x0) * tc
        sl = (slice(r0, r0 + tc), slice(c0, c0 + tc))
        if mt is MapType.OCCUPANCY:
            view.log_odds[sl] = tile.log_odds
            view.observed[sl] = tile.observed
        elif mt in (MapType.REFLECTIVITY, MapType.COLOR):
            view.count[sl] = tile.count
            view.mean[sl] = tile.mean
            view.m2[sl] = tile.m2
        else:
            view.counters[sl] = tile.counters
    if view.counters is not None:
        view.totals = view.counters.sum(axis=2, dtype=np.int64)
    return view


def occupancy_probability(log_odds: np.ndarray) -> np.ndarray:
    """Occupancy probability 1 - 1/(1 + exp(log_odds)).

    Evaluated as the numerically stable sigmoid so the free tail does not
    cancel to exactly zero at the log-odds clamp.
    """
    lo = np.asarray(log_odds, dtype=np.float64)
    out = np.empty_like(lo)
    pos = lo >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-lo[pos]))
    e = np.exp(lo[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def render_map(grid: GridMap, out_format: str) -> bytes:
    """Render a map to PGM (occupancy, reflectivity) or PPM (semantic, color).

    Image row 0 is the highest y row (north up); unobserved cells are
    mid-gray.
    """
    mt = grid.config.map_type
    fmt = out_format.upper()
    if mt in (MapType.OCCUPANCY, MapType.REFLECTIVITY):
        if fmt != "PGM":
            raise ValueError(f"{mt.file_name} maps render to PGM only")
    else:
        if fmt != "PPM":
            raise ValueError(f"{mt.file_name} maps render to PPM only")
    view = dense_view(grid)
    h, w = view.shape
    if mt is MapType.OCCUPANCY:
        gray = np.full((h, w), UNOBSERVED_GRAY, dtype=np.uint8)
        p = occupancy_probability(view.log_odds[view.observed])
        gray[view.observed] = np.clip(np.rint(255.0 * (1.0 - p)), 0, 255).astype(np.uint8)
        img = gray
    elif mt is MapType.REFLECTIVITY:
        gray = np.full((h, w), UNOBSERVED_GRAY, dtype=np.uint8)
        seen = view.count > 0
        gray[seen] = np.clip(np.rint(view.mean[..., 0][seen]), 0, 255).astype(np.uint8)
        img = gray
    elif mt is MapType.SEMANTIC:
        img = np.full((h, w, 3), UNOBSERVED_GRAY, dtype=np.uint8)
        seen = view.totals > grid.config.num_classes
        cls = np.argmax(view.counters, axis=2)
        img[seen] = SEMANTIC_PALETTE[cls[seen] % len(SEMANTIC_PALETTE)]
    else:
        img = np.full((h, w, 3), UNOBSERVED_GRAY, dtype=np.uint8)
        seen = view.count > 0
        img[seen] = np.clip(np.rint(view.mean[seen]), 0, 255).astype(np.uint8)
    img = img[::-1]  # north up
    if fmt == "PGM":
        return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()
