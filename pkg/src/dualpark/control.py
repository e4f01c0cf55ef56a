"""Closed-loop execution of a planned path: rear-wheel-feedback steering, a
cascaded PID actuator model and a forward-Euler kinematic bicycle.

Sign conventions for the tracking law: the reference heading is the
*vehicle* heading along the path (travel direction + pi when reversing);
``e`` is the signed lateral offset of the rear axle, positive to the left of
the reference heading; ``theta_e`` is vehicle heading minus reference
heading; ``kappa`` is d(reference heading)/ds with ``s`` measured along the
reference heading. The commanded yaw rate is

    omega = V kappa cos(theta_e) / (1 - kappa e) - k_theta |V| theta_e - k_e V sinc(theta_e) e

which makes ``e**2 + theta_e**2 / k_e`` non-increasing for either sign of V.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import wrap_angle


@dataclass
class EgoPose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    frame: str = "t0"

    def __post_init__(self):
        self.heading = wrap_angle(self.heading)


@dataclass
class VehicleState:
    pose: EgoPose = field(default_factory=EgoPose)
    speed: float = 0.0
    steer: float = 0.0


@dataclass(frozen=True)
class PIDGains:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 1.0


@dataclass(frozen=True)
class ControllerConfig:
    k_e: float = 0.5
    k_theta: float = 1.0
    target_speed: float = 1.0
    wheelbase: float = 2.7
    dt: float = 0.01
    max_steer: float = 0.65
    max_steer_rate: float = 2.0
    max_accel: float = 2.0
    speed_pid: PIDGains = PIDGains(3.0, 0.0, 0.0)  # the speed plant is an integrator; P alone has no offset
    steer_pid: PIDGains = PIDGains(12.0, 0.0, 0.0)
    approach_gain: float = 1.2  # speed reference shrinks to approach_gain * remaining distance
    min_speed: float = 0.1
    goal_tolerance: float = 0.005
    timeout: float = 90.0
    replan_every: int = 0  # steps between replans; 0 keeps the t0 path for the whole manoeuvre

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("timestep must be positive")
        gains = (self.k_e, self.k_theta, *vars(self.speed_pid).values(), *vars(self.steer_pid).values())
        if not all(math.isfinite(g) for g in gains):
            raise ValueError("controller gains must be finite")

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["speed_pid"] = dict(vars(self.speed_pid))
        d["steer_pid"] = dict(vars(self.steer_pid))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        d = dict(d)
        for key in ("speed_pid", "steer_pid"):
            if isinstance(d.get(key), dict):
                d[key] = PIDGains(**d[key])
        return cls(**d)


@dataclass
class PIDState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_step(target: float, feedback: float, state: PIDState, gains: PIDGains, dt: float) -> float:
    error = target - feedback
    state.integral = float(np.clip(state.integral + error * dt, -gains.integral_limit, gains.integral_limit))
    derivative = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    state.prev_error = error
    return gains.kp * error + gains.ki * state.integral + gains.kd * derivative


# -- reference path ----------------------------------------------------------------

@dataclass
class ReferenceSegment:
    """A constant-gear stretch of path with vehicle headings and curvature per point."""

    xy: np.ndarray
    heading: np.ndarray
    curvature: np.ndarray
    gear: int
    cum: np.ndarray  # arc length at each point

    @property
    def length(self) -> float:
        return float(self.cum[-1])


def _dedupe(xy: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    if len(xy) == 0:
        return xy
    keep = [0]
    for k in range(1, len(xy)):
        if np.hypot(*(xy[k] - xy[keep[-1]])) > tol:
            keep.append(k)
    return xy[keep]


def build_reference(path, start_heading: float) -> list[ReferenceSegment]:
    """Split a polyline at direction reversals and annotate each stretch.

    The first stretch is driven forwards when it leaves along the start
    heading and in reverse otherwise.
    """
    xy = _dedupe(np.asarray(path, dtype=np.float64)[:, :2])
    if len(xy) < 2:
        return []
    d = np.diff(xy, axis=0)
    travel = np.arctan2(d[:, 1], d[:, 0])
    first = math.cos(travel[0] - start_heading)
    gear = 1 if first >= 0 else -1
    gears = [gear]
    for k in range(1, len(d)):
        if d[k] @ d[k - 1] < 0:
            gear = -gear
        gears.append(gear)
    segments, start = [], 0
    for k in range(1, len(d) + 1):
        if k == len(d) or gears[k] != gears[start]:
            segments.append(_annotate(xy[start : k + 1], travel[start:k], gears[start]))
            start = k
    return segments


def _annotate(xy: np.ndarray, travel: np.ndarray, gear: int) -> ReferenceSegment:
    seg_len = np.hypot(*np.diff(xy, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    n = len(xy)
    tangent = np.empty(n)
    tangent[0], tangent[-1] = travel[0], travel[-1]
    if n > 2:
        chord = xy[2:] - xy[:-2]
        tangent[1:-1] = np.arctan2(chord[:, 1], chord[:, 0])
        # chord directions lag the endpoint tangent by half the turn of the adjacent step
        tangent[0] = travel[0] - wrap_angle(travel[1] - travel[0]) / 2
        tangent[-1] = travel[-1] + wrap_angle(travel[-1] - travel[-2]) / 2
    heading = np.unwrap(tangent + (0.0 if gear > 0 else math.pi))
    kappa = np.zeros(n)
    if n > 2:
        ds_heading = gear * (cum[2:] - cum[:-2])
        kappa[1:-1] = (heading[2:] - heading[:-2]) / ds_heading
        kappa[0], kappa[-1] = kappa[1], kappa[-2]
    return ReferenceSegment(xy, heading, kappa, gear, cum)


@dataclass
class Projection:
    index: int
    frac: float
    point: np.ndarray
    heading: float
    curvature: float
    s: float


def project(seg: ReferenceSegment, p: np.ndarray, lo: int = 0, hi: int | None = None) -> Projection:
    """Closest point on segments [lo, hi) of the polyline."""
    hi = len(seg.xy) - 1 if hi is None else min(hi, len(seg.xy) - 1)
    a = seg.xy[lo:hi]
    b = seg.xy[lo + 1 : hi + 1]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    q = a + t[:, None] * ab
    k = int(np.argmin(np.hypot(*(q - p).T)))
    i, f = lo + k, float(t[k])
    heading = (1 - f) * seg.heading[i] + f * seg.heading[i + 1]
    kappa = (1 - f) * seg.curvature[i] + f * seg.curvature[i + 1]
    s = seg.cum[i] + f * (seg.cum[i + 1] - seg.cum[i])
    return Projection(i, f, q[k], float(heading), float(kappa), float(s))


def tracking_errors(seg: ReferenceSegment, proj: Projection, pose: EgoPose) -> tuple[float, float]:
    """(lateral offset e, heading error theta_e) of the pose against the projection."""
    normal = np.array([-math.sin(proj.heading), math.cos(proj.heading)])
    e = float((np.array([pose.x, pose.y]) - proj.point) @ normal)
    return e, wrap_angle(pose.heading - proj.heading)


def rwf_steering(path, pose: EgoPose, speed: float, cfg: ControllerConfig,
                 previous: float = 0.0) -> float:
    """Rear-wheel-feedback steering angle for one pose against a path (gear from the path)."""
    segs = build_reference(path, pose.heading)
    if not segs:
        return previous
    seg = segs[0]
    proj = project(seg, np.array([pose.x, pose.y]))
    return rwf_command(seg, proj, pose, speed, cfg, previous)


def rwf_command(seg: ReferenceSegment, proj: Projection, pose: EgoPose, speed: float,
                cfg: ControllerConfig, previous: float = 0.0) -> float:
    if speed == 0:
        return previous
    e, th = tracking_errors(seg, proj, pose)
    kappa = proj.curvature
    sinc = math.sin(th) / th if th != 0 else 1.0
    omega = (speed * kappa * math.cos(th) / (1.0 - kappa * e)
             - cfg.k_theta * abs(speed) * th - cfg.k_e * speed * sinc * e)
    steer = math.atan(omega * cfg.wheelbase / speed)
    return float(np.clip(steer, -cfg.max_steer, cfg.max_steer))


def bicycle_step(state: VehicleState, accel: float, steer_rate: float, cfg: ControllerConfig) -> VehicleState:
    """Forward Euler: x' = V cos th, y' = V sin th, th' = V tan A / L; then actuators."""
    p, v, a = state.pose, state.speed, state.steer
    dt = cfg.dt
    x = p.x + v * math.cos(p.heading) * dt
    y = p.y + v * math.sin(p.heading) * dt
    th = p.heading + v * math.tan(a) / cfg.wheelbase * dt
    v_new = v + accel * dt
    a_new = float(np.clip(a + steer_rate * dt, -cfg.max_steer, cfg.max_steer))
    return VehicleState(EgoPose(x, y, th, p.frame), v_new, a_new)


@dataclass
class SimResult:
    trace: np.ndarray  # rows: t, x, y, heading, V, A, cross-track error
    converged: bool
    position_error: float
    heading_error: float
    reason: str

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "heading", "V", "A", "cross_track_error"])
            for row in self.trace:
                w.writerow([f"{v:.9g}" for v in row])

    def report(self) -> dict:
        return {"converged": self.converged, "final_position_error_m": self.position_error,
                "final_heading_error_deg": math.degrees(self.heading_error), "reason": self.reason,
                "steps": int(len(self.trace))}


def simulate_parking(path, initial: VehicleState | None = None, cfg: ControllerConfig = ControllerConfig(),
                     replanner: Callable[[VehicleState], np.ndarray] | None = None) -> SimResult:
    """Track ``path`` (t0 ego frame) from ``initial`` until its end or the timeout."""
    state = initial or VehicleState()
    path = np.asarray(path, dtype=np.float64)
    segs = build_reference(path, state.pose.heading)
    rows: list[list[float]] = []
    t = 0.0

    def finish(converged: bool, reason: str) -> SimResult:
        if segs:
            end_xy = segs[-1].xy[-1]
            end_heading = segs[-1].heading[-1]
            pos_err = float(np.hypot(state.pose.x - end_xy[0], state.pose.y - end_xy[1]))
            head_err = abs(wrap_angle(state.pose.heading - end_heading))
        elif len(path):
            pos_err = float(np.hypot(state.pose.x - path[-1, 0], state.pose.y - path[-1, 1]))
            head_err = 0.0
        else:
            pos_err = head_err = 0.0
        trace = np.array(rows) if rows else np.zeros((0, 7))
        return SimResult(trace, converged, pos_err, head_err, reason)

    if not segs:
        return finish(True, "empty path")

    speed_pid, steer_pid = PIDState(), PIDState()
    seg_idx, lo = 0, 0
    step = 0
    while True:
        seg = segs[seg_idx]
        p = np.array([state.pose.x, state.pose.y])
        proj = project(seg, p, lo, lo + 12 if step else None)
        lo = max(0, proj.index - 1)
        remaining = seg.length - proj.s
        e, _ = tracking_errors(seg, proj, state.pose)
        at_end = remaining <= cfg.goal_tolerance or (
            proj.index == len(seg.xy) - 2 and proj.frac >= 1.0 and
            (p - seg.xy[-1]) @ (seg.xy[-1] - seg.xy[-2]) > 0)
        if at_end:
            state = VehicleState(state.pose, 0.0, state.steer)
            seg_idx += 1
            if seg_idx == len(segs):
                rows.append([t, state.pose.x, state.pose.y, state.pose.heading, state.speed, state.steer, e])
                return finish(True, "reached path end")
            lo = 0
            speed_pid, steer_pid = PIDState(), PIDState()
            continue
        if t >= cfg.timeout:
            return finish(False, "timeout")
        v_ref = seg.gear * float(np.clip(cfg.approach_gain * remaining, cfg.min_speed, cfg.target_speed))
        steer_ref = rwf_command(seg, proj, state.pose, state.speed if state.speed != 0 else v_ref,
                                cfg, state.steer)
        rows.append([t, state.pose.x, state.pose.y, state.pose.heading, state.speed, state.steer, e])
        accel = float(np.clip(pid_step(v_ref, state.speed, speed_pid, cfg.speed_pid, cfg.dt),
                              -cfg.max_accel, cfg.max_accel))
        rate = float(np.clip(pid_step(steer_ref, state.steer, steer_pid, cfg.steer_pid, cfg.dt),
                             -cfg.max_steer_rate, cfg.max_steer_rate))
        state = bicycle_step(state, accel, rate, cfg)
        t += cfg.dt
        step += 1
        if replanner is not None and cfg.replan_every and step % cfg.replan_every == 0:
            segs = build_reference(replanner(state), state.pose.heading) or segs
            seg_idx, lo = 0, 0
