"""Deterministic synthetic parking scenarios.

A scenario places a target bay relative to the ego pose at the start of the
manoeuvre (the t0 ego frame). The expert path is straight-arc-straight with
the arc at the minimum turning radius, driven forwards or in reverse. Scenes
are rendered either as top-down occupancy grids (direct-BEV mode) or through
the pinhole cameras of a rig.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraRig
from .geometry import point_rectangle_distance, to_local, to_world, wrap_angle
from .maps import GridSpec

MIN_TURN_RADIUS = 4.5
WHEELBASE = 2.7
WAYPOINT_SPACING = 0.3
# rear axle sits this far behind the body centre of a 4.7 m car
REAR_AXLE_TO_CENTER = 1.35
CAR_LENGTH, CAR_WIDTH = 4.6, 1.9
BAY_LENGTH, BAY_WIDTH = 5.3, 2.6
OBSTACLE_HEIGHT = 1.5
LINE_WIDTH = 0.25


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    """Oriented rectangle on the ground plane (t0 ego frame)."""

    x: float
    y: float
    heading: float
    length: float
    width: float

    def rotated(self, angle: float) -> "Box":
        p = to_world(np.array([self.x, self.y]), (0.0, 0.0, angle))
        return Box(float(p[0]), float(p[1]), self.heading + angle, self.length, self.width)


@dataclass(frozen=True)
class Scenario:
    slot_x: float
    slot_y: float
    slot_heading: float
    reverse: bool = True
    obstacles: tuple[Box, ...] = ()
    lane_y: float | None = None
    seed: int = 0
    lane_heading: float = 0.0

    @property
    def slot_pose(self) -> tuple[float, float, float]:
        """Final rear-axle pose."""
        return self.slot_x, self.slot_y, self.slot_heading

    @property
    def bay(self) -> Box:
        c = to_world(np.array([REAR_AXLE_TO_CENTER, 0.0]), self.slot_pose)
        return Box(float(c[0]), float(c[1]), self.slot_heading, BAY_LENGTH, BAY_WIDTH)

    @property
    def slot_center(self) -> tuple[float, float]:
        b = self.bay
        return b.x, b.y

    def rotated(self, angle: float) -> "Scenario":
        """The whole scene rotated about the t0 origin."""
        p = to_world(np.array([self.slot_x, self.slot_y]), (0.0, 0.0, angle))
        return replace(self, slot_x=float(p[0]), slot_y=float(p[1]),
                       slot_heading=self.slot_heading + angle,
                       obstacles=tuple(o.rotated(angle) for o in self.obstacles),
                       lane_heading=self.lane_heading + angle)

    def to_dict(self) -> dict:
        return {"slot": [self.slot_x, self.slot_y, self.slot_heading], "reverse": self.reverse,
                "obstacles": [[o.x, o.y, o.heading, o.length, o.width] for o in self.obstacles],
                "lane_y": self.lane_y, "lane_heading": self.lane_heading, "seed": self.seed,
                "slot_center": list(self.slot_center)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(*d["slot"], reverse=d["reverse"],
                   obstacles=tuple(Box(*o) for o in d["obstacles"]), lane_y=d["lane_y"],
                   seed=d["seed"], lane_heading=d.get("lane_heading", 0.0))


@dataclass
class ExpertTrajectory:
    waypoints: np.ndarray  # (N, 3) x, y, heading in the t0 ego frame
    gears: np.ndarray  # (N,) +1 forward, -1 reverse
    arc_range: tuple[int, int] = (0, 0)  # waypoint index span lying strictly on the arc
    radius: float = MIN_TURN_RADIUS
    segment_lengths: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    @property
    def xy(self) -> np.ndarray:
        return self.waypoints[:, :2]

    @property
    def length(self) -> float:
        return float(sum(self.segment_lengths))

    def segments(self) -> list[tuple[int, int, int]]:
        """(start, end_inclusive, gear) runs of constant gear."""
        out, start = [], 0
        for k in range(1, len(self.gears) + 1):
            if k == len(self.gears) or self.gears[k] != self.gears[start]:
                out.append((start, k - 1, int(self.gears[start])))
                start = k
        return out


def plan_expert(scenario: Scenario, radius: float = MIN_TURN_RADIUS,
                spacing: float = WAYPOINT_SPACING) -> ExpertTrajectory:
    """Straight-arc-straight path from the origin pose to the slot pose."""
    gear = -1 if scenario.reverse else 1
    phi0 = 0.0 if gear > 0 else math.pi
    phi1 = scenario.slot_heading + (0.0 if gear > 0 else math.pi)
    delta = wrap_angle(phi1 - phi0)
    target = np.array([scenario.slot_x, scenario.slot_y])
    u0 = np.array([math.cos(phi0), math.sin(phi0)])
    u1 = np.array([math.cos(phi1), math.sin(phi1)])

    if abs(delta) < 1e-9:
        along = float(target @ u0)
        lateral = float(target @ np.array([-u0[1], u0[0]]))
        if abs(lateral) > 1e-6 or along < 0:
            raise PlanningError("slot is aligned with the start pose but not reachable by a straight line")
        lengths = (along, 0.0, 0.0)
    else:
        if abs(delta) >= math.pi - 1e-9:
            raise PlanningError("a straight-arc-straight path cannot reverse the travel direction")
        # t0 * u0 + t1 * u1 = target: distances to the tangent-line intersection
        t0, t1 = np.linalg.solve(np.stack([u0, u1], axis=1), target)
        tangent = radius * math.tan(abs(delta) / 2)
        if t0 < tangent - 1e-9 or t1 < tangent - 1e-9:
            raise PlanningError(
                f"slot too close for turning radius {radius} m (legs {t0:.2f}, {t1:.2f} < {tangent:.2f})")
        lengths = (max(t0 - tangent, 0.0), radius * abs(delta), max(t1 - tangent, 0.0))

    total = sum(lengths)
    n_seg = max(1, math.ceil(total / spacing - 1e-9)) if total > 0 else 0
    s_values = np.array([total * k / n_seg for k in range(n_seg + 1)]) if n_seg else np.zeros(1)
    turn = 1.0 if delta > 0 else -1.0
    pts = []
    for s in s_values:
        pts.append(_travel_point(s, lengths, phi0, turn, radius))
    pts = np.array(pts)
    heading = wrap_angle(pts[:, 2] - (0.0 if gear > 0 else math.pi))
    waypoints = np.column_stack([pts[:, :2], heading])
    on_arc = np.flatnonzero((s_values > lengths[0] + 1e-9) & (s_values < lengths[0] + lengths[1] - 1e-9))
    arc_range = (int(on_arc[0]), int(on_arc[-1])) if on_arc.size else (0, 0)
    return ExpertTrajectory(waypoints, np.full(len(waypoints), gear), arc_range, radius, lengths)


def _travel_point(s: float, lengths, phi0: float, turn: float, radius: float):
    """Position and travel direction at arc length ``s`` along the three segments."""
    a, arc, _ = lengths
    u0 = np.array([math.cos(phi0), math.sin(phi0)])
    if s <= a:
        p = u0 * s
        return p[0], p[1], phi0
    start = u0 * a
    normal = np.array([-u0[1], u0[0]]) * turn
    center = start + normal * radius
    swept = min(s - a, arc) / radius
    phi = phi0 + turn * swept
    p = center - radius * turn * np.array([-math.sin(phi), math.cos(phi)])
    if s <= a + arc:
        return p[0], p[1], phi
    u1 = np.array([math.cos(phi), math.sin(phi)])
    q = p + u1 * (s - a - arc)
    return q[0], q[1], phi


def menger_curvature(xy: np.ndarray) -> np.ndarray:
    """Circumcircle curvature of every interior waypoint triple."""
    a, b, c = xy[:-2], xy[1:-1], xy[2:]
    ab = np.linalg.norm(b - a, axis=1)
    bc = np.linalg.norm(c - b, axis=1)
    ca = np.linalg.norm(a - c, axis=1)
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    denom = ab * bc * ca
    return np.where(denom > 0, 2.0 * np.abs(cross) / np.where(denom > 0, denom, 1.0), 0.0)


# -- scenario sampling -----------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    radius: float = MIN_TURN_RADIUS
    spacing: float = WAYPOINT_SPACING
    reverse_prob: float = 0.7
    min_turn_deg: float = 60.0
    max_turn_deg: float = 110.0
    neighbor_prob: float = 0.6
    clearance: float = 1.2
    extent: float = 9.0  # every path point and slot stays inside +-extent in every record frame


def random_scenario(seed: int, cfg: SynthConfig = SynthConfig()) -> Scenario:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5107]))
    for _ in range(1000):
        reverse = bool(rng.random() < cfg.reverse_prob)
        turn = math.radians(rng.uniform(cfg.min_turn_deg, cfg.max_turn_deg)) * rng.choice([-1.0, 1.0])
        lead = rng.uniform(0.3, 3.0)
        tail = rng.uniform(1.5, 3.5)
        phi0 = math.pi if reverse else 0.0
        lengths = (lead, cfg.radius * abs(turn), tail)
        x, y, phi = _travel_point(sum(lengths), lengths, phi0, math.copysign(1.0, turn), cfg.radius)
        heading = wrap_angle(phi - (math.pi if reverse else 0.0))
        base = Scenario(float(x), float(y), heading, reverse=reverse, seed=seed)
        try:
            traj = plan_expert(base, cfg.radius, cfg.spacing)
        except PlanningError:
            continue
        if not _fits(base, traj, cfg.extent):
            continue
        side = math.copysign(1.0, y) if abs(y) > 1e-6 else 1.0
        lane_y = -side * rng.uniform(2.5, 4.0)
        obstacles = []
        bay = base.bay
        lateral = np.array([-math.sin(bay.heading), math.cos(bay.heading)])
        for offset in (-1.0, 1.0):
            if rng.random() < cfg.neighbor_prob:
                c = np.array([bay.x, bay.y]) + offset * BAY_WIDTH * lateral
                car = Box(float(c[0]), float(c[1]), bay.heading, CAR_LENGTH, CAR_WIDTH)
                dist = point_rectangle_distance(traj.xy, car.x, car.y, car.heading, car.length, car.width)
                if dist.min() >= cfg.clearance:
                    obstacles.append(car)
        return replace(base, obstacles=tuple(obstacles), lane_y=float(lane_y))
    raise PlanningError(f"no feasible scenario found for seed {seed}")


def aligned_scenario(distance: float = 5.0, seed: int = 0) -> Scenario:
    """Slot straight behind the ego vehicle, same heading: a pure reverse line."""
    return Scenario(-distance, 0.0, 0.0, reverse=True, seed=seed)


def bay_scenario(lead: float = 2.0, tail: float = 2.5, left: bool = True,
                 radius: float = MIN_TURN_RADIUS, seed: int = 0) -> Scenario:
    """Reverse 90-degree bay park with the given straight leg lengths."""
    turn = -1.0 if left else 1.0  # reversing along -x, a right turn in travel terms ends at +y
    lengths = (lead, radius * math.pi / 2, tail)
    x, y, phi = _travel_point(sum(lengths), lengths, math.pi, turn, radius)
    return Scenario(float(x), float(y), wrap_angle(phi - math.pi), reverse=True, seed=seed)


def _fits(scenario: Scenario, traj: ExpertTrajectory, extent: float) -> bool:
    sc = np.array(scenario.slot_center)
    for pose in traj.waypoints:
        local = to_local(np.vstack([traj.xy, sc]), pose)
        if np.abs(local).max() > extent:
            return False
    return True


# -- rendering ----------------------------------------------------------------

def _marking_boxes(scenario: Scenario) -> list[Box]:
    """Bay side lines, the bay back line and the far lane edge as thin boxes."""
    bay = scenario.bay
    fwd = np.array([math.cos(bay.heading), math.sin(bay.heading)])
    lat = np.array([-fwd[1], fwd[0]])
    c = np.array([bay.x, bay.y])
    back_sign = -1.0 if scenario.reverse else 1.0  # closed end of the bay
    boxes = []
    for side in (-1.0, 1.0):
        p = c + side * lat * bay.width / 2
        boxes.append(Box(float(p[0]), float(p[1]), bay.heading, bay.length, LINE_WIDTH))
    p = c + back_sign * fwd * bay.length / 2
    boxes.append(Box(float(p[0]), float(p[1]), bay.heading + math.pi / 2, bay.width, LINE_WIDTH))
    if scenario.lane_y is not None:
        p = to_world(np.array([0.0, scenario.lane_y]), (0.0, 0.0, scenario.lane_heading))
        boxes.append(Box(float(p[0]), float(p[1]), scenario.lane_heading, 40.0, LINE_WIDTH))
    return boxes


def _inside(points: np.ndarray, box: Box, pad: float = 0.0) -> np.ndarray:
    local = to_local(points, (box.x, box.y, box.heading))
    return (np.abs(local[..., 0]) <= box.length / 2 + pad) & (np.abs(local[..., 1]) <= box.width / 2 + pad)


def render_bev(scenario: Scenario, pose, grid: GridSpec) -> np.ndarray:
    """(2, H, W) occupancy in the ego frame at ``pose``: markings, then obstacles."""
    xs, ys = grid.cell_centers()
    world = to_world(np.stack([xs, ys], axis=-1), pose)
    out = np.zeros((2, *grid.shape))
    # thin lines would alias away on coarse grids
    pad = max(0.0, (grid.resolution - LINE_WIDTH) / 2)
    for box in _marking_boxes(scenario):
        out[0][_inside(world, box, pad)] = 1.0
    for box in scenario.obstacles:
        out[1][_inside(world, box)] = 1.0
    return out


GROUND = np.array([0.35, 0.35, 0.35])
MARKING = np.array([0.95, 0.95, 0.9])
OBSTACLE = np.array([0.8, 0.15, 0.1])


def render_scene(scenario: Scenario, pose, rig: CameraRig) -> np.ndarray:
    """(n_cam, 3, H, W) images in [0, 1], quantised to 8 bits."""
    rig.validate()
    h, w = rig.image_size
    images = np.empty((len(rig), 3, h, w))
    markings = _marking_boxes(scenario)
    for k, cam in enumerate(rig.cameras):
        rays_cam = cam.pixel_rays().reshape(-1, 3)
        dirs_ego = rays_cam @ cam.rotation.T
        origin_ego = cam.translation
        # rotate into the t0 frame
        c, s = math.cos(pose[2]), math.sin(pose[2])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        dirs = dirs_ego @ rot.T
        origin = rot @ origin_ego + np.array([pose[0], pose[1], 0.0])
        color = np.tile(GROUND, (len(dirs), 1))
        ground_t = np.full(len(dirs), np.inf)
        down = dirs[:, 2] < 0
        ground_t[down] = -origin[2] / dirs[down, 2]
        hit = origin[None, :2] + dirs[:, :2] * np.where(np.isfinite(ground_t), ground_t, 0.0)[:, None]
        paint = np.zeros(len(dirs), dtype=bool)
        for box in markings:
            paint |= _inside(hit, box)
        color[paint & down] = MARKING
        best = ground_t.copy()
        for box in scenario.obstacles:
            t_box = _ray_box(origin, dirs, box)
            closer = t_box < best
            color[closer] = OBSTACLE
            best = np.minimum(best, t_box)
        images[k] = np.round(color.T.reshape(3, h, w) * 255) / 255
    return images


def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: Box) -> np.ndarray:
    """Entry distance of each ray into an extruded box, inf on a miss."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    o = origin[:2] - np.array([box.x, box.y])
    o_local = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], origin[2]])
    d_local = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    lo = np.array([-box.length / 2, -box.width / 2, 0.0])
    hi = np.array([box.length / 2, box.width / 2, OBSTACLE_HEIGHT])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o_local) / d_local
        t2 = (hi - o_local) / d_local
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside the slab -> unconstrained, outside -> miss
    parallel = d_local == 0
    inside = (o_local >= lo) & (o_local <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    ok = (enter <= leave) & (leave > 0)
    return np.where(ok, np.maximum(enter, 0.0), np.inf)
