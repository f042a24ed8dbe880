"""Planar pose algebra and the Ackermann motion model.

Everything here is pure and side-effect free; poses are SE(2) elements
stored as (x, y, theta) with theta kept in (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi].

    The boundary convention keeps +pi (and maps -pi to +pi) so that
    equality tests on wrapped angles are deterministic.
    """
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    r = math.remainder(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@dataclass(frozen=True, slots=True)
class Pose2D:
    """Planar pose; theta is normalized to (-pi, pi] on construction."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


IDENTITY = Pose2D(0.0, 0.0, 0.0)


@dataclass(frozen=True, slots=True)
class VehicleParams:
    """Ackermann geometry: axle distance and steering range."""

    wheelbase_l: float = 2.625
    max_steering: float = 0.45

    def __post_init__(self) -> None:
        if self.wheelbase_l <= 0.0:
            raise ValueError("wheelbase_l must be positive")
        if self.max_steering <= 0.0:
            raise ValueError("max_steering must be positive")


@dataclass(frozen=True, slots=True)
class OdomSample:
    """One odometry reading: linear velocity, steering angle, timestamp."""

    v: float
    phi: float
    t: float


def compose_pose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Return the rigid transform a followed by b expressed in a's frame."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def relative_pose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Return the pose of a in b's frame, i.e. the d with compose_pose(b, d) == a."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = a.x - b.x, a.y - b.y
    return Pose2D(c * dx + s * dy, -s * dx + c * dy, a.theta - b.theta)


def invert_pose(a: Pose2D) -> Pose2D:
    """Return the inverse transform of a."""
    return relative_pose(IDENTITY, a)


def ackermann_step(
    p: Pose2D, v: float, phi: float, dt: float, params: VehicleParams
) -> Pose2D:
    """Advance a pose by one Euler step of the Ackermann (bicycle) model.

    The position update uses the pre-update heading; sub-stepping for
    curvature accuracy is the caller's responsibility.
    """
    if dt < 0.0:
        raise ValueError("dt must be non-negative")
    if abs(phi) >= math.pi / 2.0:
        raise ValueError(f"steering angle {phi} at or beyond the tangent singularity")
    ds = v * dt
    return Pose2D(
        p.x + ds * math.cos(p.theta),
        p.y + ds * math.sin(p.theta),
        p.theta + ds * math.tan(phi) / params.wheelbase_l,
    )


def motion_delta(odom: OdomSample, dt: float, params: VehicleParams) -> Pose2D:
    """Displacement over dt, expressed in the start pose's frame."""
    return ackermann_step(IDENTITY, odom.v, odom.phi, dt, params)
