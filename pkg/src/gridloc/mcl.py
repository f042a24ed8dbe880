"""Particle-filter localization against an offline grid map.

State per particle is (v, phi, bias, pose). Prediction follows the noisy
Ackermann model with a speed-gated steering bias random walk; correction
builds a single-scan instantaneous map, scores it against the offline map
with a per-map-type likelihood (counter probabilities, occupancy
probabilities, Mahalanobis distance, or the entropy correlation
coefficient for color), rejects shared outlier cells, and resamples with
the low-variance scheme. All randomness is explicit: every operation takes
a seed and results do not depend on particle evaluation order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import OdomSample, Pose2D, VehicleParams, normalize_angle
from .errors import DataError
from .gridmap import (
    LOG_ODDS_FREE,
    LOG_ODDS_HIT,
    DenseView,
    GridMap,
    MapConfig,
    MapType,
    dense_view,
    line_cells_bulk,
)
from .preprocess import CalibTable, DataPackage, OdomCalib, PreparedCloud, prepare_cloud

LUMA = np.array([0.299, 0.587, 0.114])


class FilterMode(enum.Enum):
    """Prediction-noise presets: STABLE favors smoothness, DIVERSE recovery."""

    STABLE = "stable"
    DIVERSE = "diverse"


_MODE_POSE_STD = {
    FilterMode.STABLE: (0.01, math.radians(0.1)),
    FilterMode.DIVERSE: (0.2, math.radians(0.5)),
}


@dataclass(frozen=True, slots=True)
class FilterConfig:
    n_particles: int = 200
    sigma_v: float = 0.2                      # m/s
    sigma_v_phi: float = 0.05                 # extra v std per rad of |phi|
    sigma_phi: float = math.radians(0.5)
    sigma_phi_v: float = 0.002                # extra phi std per m/s of |v|
    sigma_b: float = math.radians(0.1)
    bias_clip: float = math.radians(2.0)
    bias_gate_speed: float = 0.2              # m/s
    init_pos_std: float = 2.5
    init_theta_std: float = math.radians(20.0)
    init_v_std: float = 0.5
    init_phi_std: float = 0.02
    init_bias_std: float = 0.005
    measurement_std: float = 3.0              # intensity units
    outlier_rate: float = 0.7
    outlier_loglik_floor: float = math.log(0.05)
    # the shared-outlier vote assumes most particles are near the true pose;
    # while the cloud is wider than this it would just strip the informative
    # cells, so rejection waits for lock
    outlier_gate_spread: float = 0.8
    # while the cloud is wider than the lock spread, log scores are divided
    # by a temperature that grows with the spread; otherwise the softmax is
    # winner-take-all on the first cycle and the filter commits to whatever
    # the wide initial cloud happened to contain
    acquisition_softening: float = 2.0
    # measurement-model floors: without them a one-cell miss on a saturated
    # map cell dominates the whole particle weight and the wide initial
    # cloud can never acquire lock
    occ_prob_floor: float = 0.1
    mahal_clip_sigmas: float = 5.0
    ecc_bins: int = 16
    mode: FilterMode = FilterMode.DIVERSE
    pose_pos_std: float | None = None         # override the mode preset
    pose_theta_std: float | None = None

    def pose_noise(self) -> tuple[float, float]:
        pos, ang = _MODE_POSE_STD[self.mode]
        return (
            pos if self.pose_pos_std is None else self.pose_pos_std,
            ang if self.pose_theta_std is None else self.pose_theta_std,
        )


@dataclass(frozen=True, slots=True)
class ParticleState:
    """Point estimate of the filter state."""

    v: float
    phi: float
    bias: float
    pose: Pose2D
    weight: float = 1.0


@dataclass(slots=True)
class Particles:
    """Array-of-struct particle set; weights sum to one."""

    v: np.ndarray
    phi: np.ndarray
    bias: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    weight: np.ndarray

    @property
    def n(self) -> int:
        return len(self.weight)

    def copy(self) -> "Particles":
        return Particles(*(getattr(self, f).copy() for f in ("v", "phi", "bias", "x", "y", "theta", "weight")))


def init_filter(guess: Pose2D, cfg: FilterConfig, seed) -> Particles:
    """Sample the initial particle set around a pose guess."""
    if cfg.n_particles < 2:
        raise ValueError("need at least 2 particles")
    rng = np.random.default_rng(seed)
    n = cfg.n_particles
    return Particles(
        v=rng.normal(0.0, cfg.init_v_std, n),
        phi=rng.normal(0.0, cfg.init_phi_std, n),
        bias=rng.normal(0.0, cfg.init_bias_std, n),
        x=guess.x + rng.normal(0.0, cfg.init_pos_std, n),
        y=guess.y + rng.normal(0.0, cfg.init_pos_std, n),
        theta=_wrap(guess.theta + rng.normal(0.0, cfg.init_theta_std, n)),
        weight=np.full(n, 1.0 / n),
    )


def _wrap(a: np.ndarray) -> np.ndarray:
    r = np.remainder(a + math.pi, 2.0 * math.pi) - math.pi
    r[r <= -math.pi] += 2.0 * math.pi
    return r


def predict(
    particles: Particles,
    odom: OdomSample,
    dt: float,
    cfg: FilterConfig,
    params: VehicleParams,
    seed,
) -> Particles:
    """Advance every particle by the noisy motion model.

    The steering bias only random-walks while the (noisy) speed exceeds the
    gate, and is clipped; each particle moves by its own sampled (v, phi).
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    rng = np.random.default_rng(seed)
    n = particles.n
    out = particles.copy()
    std_v = cfg.sigma_v + cfg.sigma_v_phi * abs(odom.phi)
    std_phi = cfg.sigma_phi + cfg.sigma_phi_v * abs(odom.v)
    v_bar = odom.v + rng.normal(0.0, std_v, n)
    eps_b = rng.normal(0.0, cfg.sigma_b, n)
    gate = v_bar > cfg.bias_gate_speed
    b_bar = np.clip(particles.bias + gate * eps_b, -cfg.bias_clip, cfg.bias_clip)
    phi_bar = np.clip(odom.phi + b_bar + rng.normal(0.0, std_phi, n), -1.2, 1.2)
    pos_std, ang_std = cfg.pose_noise()
    eps_x = rng.normal(0.0, pos_std, n)
    eps_y = rng.normal(0.0, pos_std, n)
    eps_t = rng.normal(0.0, ang_std, n)
    ds = v_bar * dt
    out.x = particles.x + ds * np.cos(particles.theta)
    out.y = particles.y + ds * np.sin(particles.theta)
    theta_mid = particles.theta + ds * np.tan(phi_bar) / params.wheelbase_l
    # the pose perturbation composes after the motion step, in each
    # particle's post-motion frame
    c, s = np.cos(theta_mid), np.sin(theta_mid)
    out.x += c * eps_x - s * eps_y
    out.y += s * eps_x + c * eps_y
    out.theta = _wrap(theta_mid + eps_t)
    out.v = v_bar
    out.phi = phi_bar
    out.bias = b_bar
    return out


# --------------------------------------------------------------- instant map


@dataclass(slots=True)
class InstantMap:
    """Sparse single-scan map in the vehicle frame.

    cell_x/cell_y are hit-cell centers (the k <= n_beams scored cells); the
    occupancy variant also records carved free cells and classifies each
    hit cell as occupied- or free-dominant from its net log-odds.
    """

    map_type: MapType
    resolution: float
    cell_x: np.ndarray
    cell_y: np.ndarray
    occupied_flag: np.ndarray | None = None
    value: np.ndarray | None = None          # refl mean / argmax class / rgb mean
    luma: np.ndarray | None = None           # color only
    free_x: np.ndarray = field(default_factory=lambda: np.empty(0))
    free_y: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def k(self) -> int:
        return len(self.cell_x)


_KEY_OFF = 1 << 24
_KEY_MUL = 1 << 25


def build_instant_map(cloud: PreparedCloud, cfg: MapConfig) -> InstantMap:
    """Bin one prepared scan into vehicle-frame cells with the map's rules."""
    res = cfg.resolution
    mt = cfg.map_type
    if mt is MapType.SEMANTIC:
        sel = cloud.has_cam & (cloud.class_label >= 0)
    elif mt is MapType.COLOR:
        sel = cloud.has_cam
    else:
        sel = np.ones(len(cloud.x), dtype=bool)
    x, y = cloud.x[sel], cloud.y[sel]
    gx = np.floor(x / res).astype(np.int64)
    gy = np.floor(y / res).astype(np.int64)
    key = (gx + _KEY_OFF) * _KEY_MUL + (gy + _KEY_OFF)
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    ugx = uniq // _KEY_MUL - _KEY_OFF
    ugy = uniq % _KEY_MUL - _KEY_OFF
    imap = InstantMap(
        map_type=mt,
        resolution=res,
        cell_x=(ugx + 0.5) * res,
        cell_y=(ugy + 0.5) * res,
    )
    if mt is MapType.OCCUPANCY:
        # per-cell evidence: obstacle endpoints add occupancy, floor-return
        # endpoints and ray crossings subtract; the net sign classifies each
        # scored cell as occupied- or free-dominant
        hits = np.zeros(len(uniq))
        np.add.at(hits, inverse[~cloud.ground], 1.0)
        frees = np.zeros(len(uniq))
        np.add.at(frees, inverse[cloud.ground], 1.0)
        fx, fy = line_cells_bulk(0, 0, gx, gy)
        fkey = (fx + _KEY_OFF) * _KEY_MUL + (fy + _KEY_OFF)
        hit_pos = np.searchsorted(uniq, fkey)
        match = (hit_pos < len(uniq)) & (uniq[np.minimum(hit_pos, len(uniq) - 1)] == fkey)
        np.add.at(frees, hit_pos[match], 1.0)
        log_odds = hits * LOG_ODDS_HIT + frees * LOG_ODDS_FREE
        imap.occupied_flag = log_odds > 0.0
        free_only = np.unique(fkey[~match])
        imap.free_x = (free_only // _KEY_MUL - _KEY_OFF + 0.5) * res
        imap.free_y = (free_only % _KEY_MUL - _KEY_OFF + 0.5) * res
    elif mt is MapType.REFLECTIVITY:
        sums = np.zeros(len(uniq))
        np.add.at(sums, inverse, cloud.reflectivity[sel])
        imap.value = sums / counts
    elif mt is MapType.SEMANTIC:
        labels = cloud.class_label[sel]
        votes = np.zeros((len(uniq), int(labels.max(initial=0)) + 1))
        np.add.at(votes, (inverse, labels), 1.0)
        imap.value = np.argmax(votes, axis=1)
    else:
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inverse, cloud.rgb[sel].astype(np.float64))
        imap.value = sums / counts[:, None]
        imap.luma = imap.value @ LUMA
    return imap


# ----------------------------------------------------------- cell likelihoods


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """log(1/(1+exp(-x))), stable at both tails."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def occupancy_log_likelihood(
    z_occupied: np.ndarray, m_log_odds: np.ndarray, prob_floor: float = 0.1
) -> np.ndarray:
    """log p_occ(m) for occupied-dominant z cells, log(1 - p_occ(m)) otherwise.

    Probabilities are floored so a single saturated cell cannot dominate a
    particle's whole score.
    """
    s = np.where(z_occupied, log_sigmoid(m_log_odds), log_sigmoid(-np.asarray(m_log_odds)))
    return np.maximum(s, math.log(prob_floor))


def reflectivity_log_likelihood(
    z_mean: np.ndarray,
    m_mean: np.ndarray,
    m_var: np.ndarray,
    m_count: np.ndarray,
    std_floor: float,
    clip_sigmas: float = 5.0,
) -> np.ndarray:
    """Mahalanobis log-density (up to a constant); unobserved cells score 0.

    The distance is clipped at clip_sigmas so one contradicting cell has
    bounded influence on a particle's weight.
    """
    var = np.maximum(m_var, std_floor * std_floor)
    s = -0.5 * (np.asarray(z_mean) - m_mean) ** 2 / var
    s = np.maximum(s, -0.5 * clip_sigmas * clip_sigmas)
    return np.where(m_count > 0, s, 0.0)


def semantic_log_likelihood(z_class: np.ndarray, m_class_count: np.ndarray, m_total: np.ndarray) -> np.ndarray:
    """log of the map cell's normalized counter for z's dominant class."""
    del z_class  # the counter gather already selected the class
    return np.log(m_class_count / m_total)


def cell_log_likelihood(z_value, m_cell, map_type: MapType, cfg: FilterConfig) -> float:
    """Scalar convenience wrapper over the vectorized likelihood kernels.

    m_cell: occupancy -> (log_odds,); reflectivity -> (count, mean, var);
    semantic -> counter vector. Color cells go through ecc_score instead.
    """
    if map_type is MapType.OCCUPANCY:
        return float(
            occupancy_log_likelihood(
                np.array([bool(z_value)]), np.array([m_cell[0]]), cfg.occ_prob_floor
            )[0]
        )
    if map_type is MapType.REFLECTIVITY:
        count, mean, var = m_cell
        return float(
            reflectivity_log_likelihood(
                np.array([z_value]), np.array([mean]), np.array([var]), np.array([count]), cfg.measurement_std
            )[0]
        )
    if map_type is MapType.SEMANTIC:
        counters = np.asarray(m_cell, dtype=np.float64)
        return float(np.log(counters[int(z_value)] / counters.sum()))
    raise ValueError("color cells are scored with ecc_score, not per-cell likelihoods")


def histogram_entropy(h: np.ndarray) -> float:
    """Entropy in nats of a normalized histogram (marginal or joint)."""
    h = np.asarray(h, dtype=np.float64).ravel()
    if (h < 0).any():
        raise ValueError("histogram bins must be non-negative")
    if abs(h.sum() - 1.0) > 1e-9:
        raise ValueError("histogram must be normalized")
    nz = h[h > 0]
    return float(-(nz * np.log(nz)).sum())


def _gray_bins(v: np.ndarray, bins: int) -> np.ndarray:
    return np.clip((np.asarray(v, dtype=np.float64) * bins / 256.0).astype(np.int64), 0, bins - 1)


def ecc_score(z_values: np.ndarray, m_values: np.ndarray, bins: int = 16) -> float:
    """Entropy correlation coefficient between paired grayscale cell values.

    1 is complete dependence, 0 independence; both-constant unequal pairs
    score 0 by convention.
    """
    z_values = np.asarray(z_values, dtype=np.float64)
    m_values = np.asarray(m_values, dtype=np.float64)
    if len(z_values) == 0 or len(z_values) != len(m_values):
        raise ValueError("ecc_score needs equal-length non-empty pair sets")
    zi = _gray_bins(z_values, bins)
    mi = _gray_bins(m_values, bins)
    joint = np.bincount(zi * bins + mi, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    jm = joint.reshape(bins, bins)
    hz = histogram_entropy(jm.sum(axis=1))
    hm = histogram_entropy(jm.sum(axis=0))
    hj = histogram_entropy(joint)
    if hz + hm == 0.0:
        return 1.0 if np.array_equal(z_values, m_values) else 0.0
    return 2.0 - 2.0 * hj / (hz + hm)


# ------------------------------------------------------------------- scoring


class ScoringView:
    """Dense offline-map snapshot prepared for vectorized particle scoring."""

    def __init__(self, grid_or_view: GridMap | DenseView):
        view = dense_view(grid_or_view) if isinstance(grid_or_view, GridMap) else grid_or_view
        self.config = view.config
        self.origin_gx = view.origin_gx
        self.origin_gy = view.origin_gy
        self.rows, self.cols = view.shape
        mt = self.config.map_type
        if mt is MapType.OCCUPANCY:
            self.log_odds = view.log_odds.ravel()
        elif mt is MapType.REFLECTIVITY:
            self.count = view.count.ravel().astype(np.float64)
            self.mean = view.mean[..., 0].ravel()
            self.var = np.where(view.count > 0, view.m2[..., 0] / np.maximum(view.count, 1), 0.0).ravel()
        elif mt is MapType.SEMANTIC:
            self.counters = view.counters.reshape(-1)
            self.totals = view.totals.ravel().astype(np.float64)
            self.num_classes = self.config.num_classes
        else:
            self.count = view.count.ravel().astype(np.float64)
            self.luma = (view.mean @ LUMA).ravel()

    def cell_indices(self, wx: np.ndarray, wy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        res = self.config.resolution
        cols = np.floor(wx / res).astype(np.int64) - self.origin_gx
        rows = np.floor(wy / res).astype(np.int64) - self.origin_gy
        inside = (rows >= 0) & (rows < self.rows) & (cols >= 0) & (cols < self.cols)
        flat = np.where(inside, rows * self.cols + cols, 0)
        return flat, inside


def score_particles(
    particles: Particles, imap: InstantMap, view: ScoringView, cfg: FilterConfig
) -> tuple[np.ndarray, bool]:
    """Per-particle weights from the instant map against the offline map.

    Non-color maps: per-cell log likelihoods, shared-outlier rejection,
    then a max-shifted softmax. Color maps: direct normalization of ECC
    scores. Returns (weights, degenerate_flag); degenerate cycles fall back
    to uniform weights.
    """
    n = particles.n
    uniform = np.full(n, 1.0 / n)
    if imap.k == 0:
        return uniform, True
    mt = view.config.map_type
    c, s = np.cos(particles.theta)[:, None], np.sin(particles.theta)[:, None]
    cx, cy = imap.cell_x[None, :], imap.cell_y[None, :]
    wx = particles.x[:, None] + c * cx - s * cy
    wy = particles.y[:, None] + s * cx + c * cy
    flat, inside = view.cell_indices(wx, wy)

    if mt is MapType.COLOR:
        m_luma = view.luma[flat]
        observed = inside & (view.count[flat] > 0)
        scores = _ecc_rows(imap.luma, m_luma, observed, cfg.ecc_bins)
        total = scores.sum()
        if not np.isfinite(total) or total <= 0.0:
            return uniform, True
        return scores / total, False

    if mt is MapType.OCCUPANCY:
        lo = np.where(inside, view.log_odds[flat], 0.0)
        scores = occupancy_log_likelihood(imap.occupied_flag[None, :], lo, cfg.occ_prob_floor)
    elif mt is MapType.REFLECTIVITY:
        count = np.where(inside, view.count[flat], 0.0)
        scores = reflectivity_log_likelihood(
            imap.value[None, :],
            view.mean[flat],
            view.var[flat],
            count,
            cfg.measurement_std,
            cfg.mahal_clip_sigmas,
        )
    else:
        cls = imap.value.astype(np.int64)[None, :]
        cnt = np.where(inside, view.counters[flat * view.num_classes + cls], 1.0)
        tot = np.where(inside, view.totals[flat], float(view.num_classes))
        scores = np.log(cnt / tot)

    # outlier rejection: a cell that scores below the floor for most
    # particles is dropped from everyone's sum; the vote only means
    # "inconsistent measurement" once the cloud has locked on
    w = particles.weight / particles.weight.sum()
    spread = math.sqrt(
        float(w @ (particles.x - w @ particles.x) ** 2 + w @ (particles.y - w @ particles.y) ** 2)
    )
    if spread <= cfg.outlier_gate_spread:
        below = scores < cfg.outlier_loglik_floor
        drop = below.mean(axis=0) >= cfg.outlier_rate
        if drop.any():
            scores = scores[:, ~drop]
    totals = scores.sum(axis=1)
    if not np.isfinite(totals).any():
        return uniform, True
    excess = max(0.0, spread - cfg.outlier_gate_spread)
    temperature = 1.0 + cfg.acquisition_softening * excess / view.config.resolution
    shifted = (totals - totals.max()) / temperature
    w = np.exp(shifted)
    w_sum = w.sum()
    if not np.isfinite(w_sum) or w_sum <= 0.0:
        return uniform, True
    return w / w_sum, False


def _ecc_rows(z_luma: np.ndarray, m_luma: np.ndarray, observed: np.ndarray, bins: int) -> np.ndarray:
    """Vectorized per-particle ECC over the both-observed cell pairs.

    Particles whose pair set is empty score 0 (nothing to match this cycle).
    """
    n, k = m_luma.shape
    zi = _gray_bins(z_luma, bins)
    mi = _gray_bins(m_luma.ravel(), bins).reshape(n, k)
    row_ids = np.repeat(np.arange(n), k).reshape(n, k)
    joint = np.zeros((n, bins * bins))
    np.add.at(
        joint,
        (row_ids[observed], np.broadcast_to(zi, (n, k))[observed] * bins + mi[observed]),
        1.0,
    )
    totals = joint.sum(axis=1)
    out = np.zeros(n)
    ok = totals > 0
    if not ok.any():
        return out
    p = joint[ok] / totals[ok, None]
    jm = p.reshape(-1, bins, bins)

    def _h(prob):
        terms = np.where(prob > 0, prob * np.log(np.where(prob > 0, prob, 1.0)), 0.0)
        return -terms.reshape(len(prob), -1).sum(axis=1)

    hz, hm, hj = _h(jm.sum(axis=2)), _h(jm.sum(axis=1)), _h(p)
    denom = hz + hm
    vals = np.zeros(len(p))
    pos = denom > 0
    vals[pos] = 2.0 - 2.0 * hj[pos] / denom[pos]
    if (~pos).any():
        # both marginals constant: dependent iff every pair agrees exactly
        mismatch = np.zeros(n)
        np.add.at(
            mismatch,
            row_ids[observed],
            (np.broadcast_to(z_luma, (n, k))[observed] != m_luma[observed]).astype(float),
        )
        vals[~pos] = (mismatch[np.nonzero(ok)[0][~pos]] == 0).astype(float)
    out[ok] = np.clip(vals, 0.0, 1.0)
    return out


def correct(
    particles: Particles, imap: InstantMap, view: ScoringView, cfg: FilterConfig, seed
) -> tuple[Particles, bool]:
    """Reweight against the offline map and resample; returns the new set
    and a degenerate-cycle flag."""
    weights, degenerate = score_particles(particles, imap, view, cfg)
    reweighted = particles.copy()
    reweighted.weight = weights
    return low_variance_resample(reweighted, seed), degenerate


def low_variance_resample(particles: Particles, seed) -> Particles:
    """Systematic resampling with one shared uniform offset."""
    n = particles.n
    w = particles.weight
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("weights must be normalized, positive")
    rng = np.random.default_rng(seed)
    targets = rng.uniform(0.0, 1.0 / n) + np.arange(n) / n
    cum = np.cumsum(w / total)
    idx = np.minimum(np.searchsorted(cum, targets, side="left"), n - 1)
    out = Particles(
        v=particles.v[idx].copy(),
        phi=particles.phi[idx].copy(),
        bias=particles.bias[idx].copy(),
        x=particles.x[idx].copy(),
        y=particles.y[idx].copy(),
        theta=particles.theta[idx].copy(),
        weight=np.full(n, 1.0 / n),
    )
    return out


def point_estimate(particles: Particles) -> ParticleState:
    """Weighted mean state; heading via the circular mean."""
    if particles.n == 0:
        raise ValueError("empty particle set")
    w = particles.weight / particles.weight.sum()
    theta = normalize_angle(
        math.atan2(float(w @ np.sin(particles.theta)), float(w @ np.cos(particles.theta)))
    )
    return ParticleState(
        v=float(w @ particles.v),
        phi=float(w @ particles.phi),
        bias=float(w @ particles.bias),
        pose=Pose2D(float(w @ particles.x), float(w @ particles.y), theta),
        weight=1.0,
    )


def weighted_covariance(particles: Particles, floor_std: float = 0.05) -> np.ndarray:
    """Weighted pose covariance with eigenvalues floored at floor_std^2."""
    w = particles.weight / particles.weight.sum()
    est = point_estimate(particles)
    dx = particles.x - est.pose.x
    dy = particles.y - est.pose.y
    dth = _wrap(particles.theta - est.pose.theta)
    d = np.stack([dx, dy, dth], axis=1)
    cov = d.T @ (d * w[:, None])
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor_std * floor_std)
    return vecs @ np.diag(vals) @ vecs.T


# -------------------------------------------------------------------- driver


@dataclass(slots=True)
class LocalizationStep:
    t: float
    estimate: Pose2D
    cov: np.ndarray
    diverged: bool


def run_localization(
    packages: list[DataPackage],
    offline_map: GridMap | ScoringView,
    cfg: FilterConfig,
    params: VehicleParams,
    seed: int,
    odom_calib: OdomCalib | None = None,
    reflect_table: CalibTable | None = None,
    initial_guess: Pose2D | None = None,
    rev_period: float = 0.1,
) -> list[LocalizationStep]:
    """Track the vehicle over a package sequence against one offline map."""
    if not packages:
        raise DataError("no packages to localize")
    view = offline_map if isinstance(offline_map, ScoringView) else ScoringView(offline_map)
    if initial_guess is None:
        first_gps = next((p.gps for p in packages if p.gps is not None), None)
        if first_gps is None:
            raise DataError("no initial guess and no GPS in the log")
        initial_guess = Pose2D(first_gps.x, first_gps.y, first_gps.theta)
    particles = init_filter(initial_guess, cfg, np.random.default_rng((seed, 0)).integers(2**31))
    steps: list[LocalizationStep] = []
    prev_t = packages[0].t
    for k, pkg in enumerate(packages):
        dt = max(pkg.t - prev_t, 0.0)
        prev_t = pkg.t
        odom = odom_calib.apply(pkg.odom) if odom_calib else pkg.odom
        particles = predict(particles, odom, dt, cfg, params, (seed, k, 1))
        cloud = prepare_cloud(pkg, params, odom_calib, reflect_table, rev_period)
        imap = build_instant_map(cloud, view.config)
        weights, degenerate = score_particles(particles, imap, view, cfg)
        particles.weight = weights
        est = point_estimate(particles)
        cov = weighted_covariance(particles)
        steps.append(LocalizationStep(t=pkg.t, estimate=est.pose, cov=cov, diverged=degenerate))
        particles = low_variance_resample(particles, (seed, k, 2))
    return steps
