"""Scenario definition and deterministic point cloud rendering.

A scenario is a handful of agents (static or constant-velocity sensor
platforms) plus rigid object tracks moving on a fixed frame grid.  Rendering
draws a frozen set of body-frame surface points per (agent, object) pair so
that two renders of the same scene at different times differ by exactly the
rigid motion of the tracks, which is what the temporal alignment checks rely
on.
"""

import json
import math

import numpy as np
from dataclasses import dataclass, asdict

from ..domain_align import Pose2
from ..numerics import ShapeError
from ..pointcloud import OrientedBox, normalize_angle
from ..temporal_align import MotionField

_RENDER_TAG = 0x5E0D
_GROUND_TAG = 0x6E0D
_FRAME_TOL = 1e-6


@dataclass
class ObjectTrack:
    """Rigid box trajectory: pose at t=0 plus planar velocity and yaw rate."""

    box: OrientedBox
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0


@dataclass
class AgentSpec:
    agent_id: str
    pose: Pose2
    vx: float = 0.0
    vy: float = 0.0


@dataclass
class Scenario:
    agents: list
    objects: list
    duration: float = 1.2
    frame_interval: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.agents:
            raise ShapeError("scenario needs at least one agent")
        if self.frame_interval <= 0.0:
            raise ShapeError("frame_interval must be positive")
        if self.duration < 0.0:
            raise ShapeError("duration must be non-negative")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ShapeError("agent ids must be unique")

    @property
    def n_frames(self):
        return int(round(self.duration / self.frame_interval)) + 1

    def frame_index(self, t: float) -> int:
        """Map a timestamp onto the frame grid; off-grid times are an error."""
        k = t / self.frame_interval
        ki = int(round(k))
        if abs(k - ki) > _FRAME_TOL:
            raise ShapeError(f"time {t} is not on the {self.frame_interval}s frame grid")
        if ki < 0 or ki >= self.n_frames:
            raise ShapeError(f"time {t} outside scenario duration {self.duration}")
        return ki

    def agent(self, agent_id: str) -> AgentSpec:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(f"unknown agent id {agent_id!r}")

    def agent_index(self, agent_id: str) -> int:
        for i, a in enumerate(self.agents):
            if a.agent_id == agent_id:
                return i
        raise KeyError(f"unknown agent id {agent_id!r}")


def agent_pose_at(scenario: Scenario, agent: AgentSpec, t: float) -> Pose2:
    k = scenario.frame_index(t)
    dt = k * scenario.frame_interval
    return Pose2(agent.pose.x + agent.vx * dt, agent.pose.y + agent.vy * dt,
                 agent.pose.yaw)


def object_box_at(scenario: Scenario, track: ObjectTrack, t: float) -> OrientedBox:
    """Box pose after k frame steps.

    Straight tracks use the closed form so equal time deltas give bitwise
    equal displacements; turning tracks integrate per frame with the velocity
    vector rotating alongside the heading.
    """
    k = scenario.frame_index(t)
    dt = scenario.frame_interval
    b = track.box
    if track.yaw_rate == 0.0:
        return OrientedBox(b.cx + track.vx * (k * dt), b.cy + track.vy * (k * dt),
                           b.cz, b.length, b.width, b.height, b.yaw)
    cx, cy, yaw = b.cx, b.cy, b.yaw
    vx, vy = track.vx, track.vy
    for _ in range(k):
        cx += vx * dt
        cy += vy * dt
        step = track.yaw_rate * dt
        c, s = math.cos(step), math.sin(step)
        vx, vy = c * vx - s * vy, s * vx + c * vy
        yaw = normalize_angle(yaw + step)
    return OrientedBox(cx, cy, b.cz, b.length, b.width, b.height, yaw)


def scenario_boxes_at(scenario: Scenario, t: float) -> list:
    return [object_box_at(scenario, tr, t) for tr in scenario.objects]


@dataclass
class RenderConfig:
    """Point budget and ground plane settings for the renderer."""

    density: float = 6000.0      # points = density / distance^2, then clipped
    min_points: int = 8
    max_points: int = 500
    interior_fraction: float = 0.2
    include_ground: bool = True
    ground_points: int = 400
    ground_extent: float = 20.0
    ground_z_sigma: float = 0.02

    def __post_init__(self):
        if self.density <= 0.0 or self.max_points < self.min_points:
            raise ShapeError("invalid render configuration")


def _object_local_points(rng, box: OrientedBox, n: int, interior_fraction: float):
    """Sample body-frame points on the box shell plus a sprinkle inside."""
    n_in = int(round(n * interior_fraction))
    n_surf = n - n_in
    hl, hw, hh = box.length / 2.0, box.width / 2.0, box.height / 2.0
    # faces: +x, -x, +y, -y, top; weighted by area
    areas = np.array([
        box.width * box.height, box.width * box.height,
        box.length * box.height, box.length * box.height,
        box.length * box.width,
    ])
    face = rng.choice(5, size=n_surf, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n_surf)
    v = rng.uniform(-1.0, 1.0, size=n_surf)
    pts = np.empty((n_surf, 3))
    for i in range(n_surf):
        f = face[i]
        if f == 0:
            pts[i] = (hl, u[i] * hw, v[i] * hh)
        elif f == 1:
            pts[i] = (-hl, u[i] * hw, v[i] * hh)
        elif f == 2:
            pts[i] = (u[i] * hl, hw, v[i] * hh)
        elif f == 3:
            pts[i] = (u[i] * hl, -hw, v[i] * hh)
        else:
            pts[i] = (u[i] * hl, v[i] * hw, hh)
    if n_in > 0:
        inner = rng.uniform(-1.0, 1.0, size=(n_in, 3)) * np.array([hl, hw, hh])
        pts = np.concatenate([pts, inner], axis=0)
    inten = rng.uniform(0.3, 1.0, size=(pts.shape[0], 1))
    return np.concatenate([pts, inten], axis=1)


def _frozen_object_samples(scenario: Scenario, agent_idx: int, cfg: RenderConfig):
    """Per-object body-frame samples, frozen at t=0 geometry.

    The point count depends only on the distance at t=0 so later frames reuse
    the exact same body-frame points and renders differ by a rigid transform.
    """
    agent = scenario.agents[agent_idx]
    samples = []
    for oi, track in enumerate(scenario.objects):
        b0 = track.box
        d = math.hypot(b0.cx - agent.pose.x, b0.cy - agent.pose.y)
        d = max(d, 1.0)
        n = int(np.clip(round(cfg.density / (d * d)), cfg.min_points, cfg.max_points))
        rng = np.random.default_rng(
            np.random.SeedSequence([scenario.seed, _RENDER_TAG, agent_idx, oi]))
        samples.append(_object_local_points(rng, b0, n, cfg.interior_fraction))
    return samples


def _ground_points(scenario: Scenario, agent_idx: int, cfg: RenderConfig):
    agent = scenario.agents[agent_idx]
    rng = np.random.default_rng(
        np.random.SeedSequence([scenario.seed, _GROUND_TAG, agent_idx]))
    half = cfg.ground_extent / 2.0
    xy = rng.uniform(-half, half, size=(cfg.ground_points, 2))
    xy += np.array([agent.pose.x, agent.pose.y])
    z = rng.normal(0.0, cfg.ground_z_sigma, size=(cfg.ground_points, 1))
    inten = rng.uniform(0.05, 0.25, size=(cfg.ground_points, 1))
    return np.concatenate([xy, z, inten], axis=1)


def render_pointcloud(scenario: Scenario, agent_id: str, t: float,
                      cfg: RenderConfig = None) -> np.ndarray:
    """Render the scene into the agent frame at time t as (n, 4) xyzi."""
    if cfg is None:
        cfg = RenderConfig()
    agent_idx = scenario.agent_index(agent_id)
    agent = scenario.agents[agent_idx]
    pose = agent_pose_at(scenario, agent, t)
    chunks = []
    samples = _frozen_object_samples(scenario, agent_idx, cfg)
    for track, local in zip(scenario.objects, samples):
        box = object_box_at(scenario, track, t)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
        world[:, 2] = local[:, 2] + box.cz
        world[:, 3] = local[:, 3]
        chunks.append(world)
    if cfg.include_ground and cfg.ground_points > 0:
        chunks.append(_ground_points(scenario, agent_idx, cfg))
    if not chunks:
        return np.zeros((0, 4))
    world = np.concatenate(chunks, axis=0)
    out = world.copy()
    xy = pose.to_local(world[:, :2])
    out[:, 0] = xy[:, 0]
    out[:, 1] = xy[:, 1]
    return out


def _box_in_agent_frame(box: OrientedBox, pose: Pose2) -> OrientedBox:
    local = pose.to_local(np.array([[box.cx, box.cy]]))[0]
    return OrientedBox(local[0], local[1], box.cz, box.length, box.width,
                       box.height, normalize_angle(box.yaw - pose.yaw))


def scenario_boxes_local(scenario: Scenario, agent_id: str, t: float) -> list:
    """Ground-truth boxes at time t expressed in the agent frame."""
    agent = scenario.agent(agent_id)
    pose = agent_pose_at(scenario, agent, t)
    return [_box_in_agent_frame(b, pose) for b in scenario_boxes_at(scenario, t)]


def _footprint_cells(box: OrientedBox, origin_x, origin_y, cell, h, w,
                     pad_cells: int) -> np.ndarray:
    """Closed footprint membership of cell centers on an arbitrary grid."""
    grown = OrientedBox(box.cx, box.cy, box.cz,
                        box.length + 2.0 * pad_cells * cell,
                        box.width + 2.0 * pad_cells * cell,
                        box.height, box.yaw)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = origin_x + (jj + 0.5) * cell
    cy = origin_y + (ii + 0.5) * cell
    pts = np.stack([cx.ravel(), cy.ravel()], axis=1)
    local = grown.to_local(np.concatenate(
        [pts, np.full((pts.shape[0], 1), grown.cz)], axis=1))
    inside = ((np.abs(local[:, 0]) <= grown.length / 2.0)
              & (np.abs(local[:, 1]) <= grown.width / 2.0))
    return inside.reshape(h, w)


def ideal_motion_field(scenario: Scenario, agent_id: str, src_t: float,
                       dst_t: float, origin_x: float, origin_y: float,
                       cell: float, h: int, w: int, mode: str = "footprint",
                       dilate: int = 3) -> MotionField:
    """Ground-truth one-frame displacement field on an agent-frame grid.

    Values are the per-frame step of each track in cell units, measured at the
    destination time, so scaling by the frame count of the gap reproduces the
    full displacement.  "footprint" stamps each track's step over the union of
    its source and destination footprints (dilated to cover feature bleed from
    small convolutions); everywhere else the displacement is zero, which keeps
    static structure pinned.  "global" writes one shared step into every cell
    and requires all tracks to agree on it.
    """
    if mode not in ("footprint", "global"):
        raise ShapeError(f"unknown ideal motion mode {mode!r}")
    if not scenario.objects:
        raise ShapeError("scenario has no objects to derive motion from")
    agent = scenario.agent(agent_id)
    pose = agent_pose_at(scenario, agent, dst_t)
    dt = scenario.frame_interval
    dp = np.zeros((2, h, w))
    steps = []
    for track in scenario.objects:
        b_dst = object_box_at(scenario, track, dst_t)
        b_pre = object_box_at(scenario, track, dst_t - dt)
        d_world = np.array([[b_dst.cx, b_dst.cy], [b_pre.cx, b_pre.cy]])
        d_local = pose.to_local(d_world)
        step = (d_local[0] - d_local[1]) / cell
        steps.append(step)
        if mode == "footprint":
            b_src = object_box_at(scenario, track, src_t)
            m = (_footprint_cells(_box_in_agent_frame(b_src, pose),
                                  origin_x, origin_y, cell, h, w, dilate)
                 | _footprint_cells(_box_in_agent_frame(b_dst, pose),
                                    origin_x, origin_y, cell, h, w, dilate))
            dp[0][m] = step[0]
            dp[1][m] = step[1]
    if mode == "global":
        base = steps[0]
        for s in steps[1:]:
            if np.max(np.abs(s - base)) > 1e-9:
                raise ShapeError("global ideal motion needs a shared velocity")
        dp[0].fill(base[0])
        dp[1].fill(base[1])
    w_map = np.full((1, h, w), np.nextafter(1.0, 0.0))
    return MotionField(dp=dp, w=w_map)


# ---------------------------------------------------------------------------
# templates and serialization

_CAR = dict(length=4.2, width=1.8, height=1.6, cz=0.8)


def _car(cx, cy, yaw=0.0):
    return OrientedBox(cx=cx, cy=cy, yaw=yaw, **_CAR)


def generate_scenario(template: str, seed: int = 0, speed: float = 4.0,
                      duration: float = 1.2, frame_interval: float = 0.1) -> Scenario:
    """Build one of the canned two-agent scenes."""
    agents = [
        AgentSpec("ego", Pose2(0.0, 0.0, 0.0)),
        AgentSpec("collab", Pose2(1.6, 0.8, 0.0)),
    ]
    if template == "straight":
        objects = [
            ObjectTrack(_car(-6.0, 3.6), vx=speed),
            ObjectTrack(_car(4.0, -3.6, yaw=math.pi), vx=-0.5 * speed),
        ]
    elif template == "crossing":
        objects = [
            ObjectTrack(_car(-6.0, -4.8), vx=speed),
            ObjectTrack(_car(4.8, -6.0, yaw=math.pi / 2.0), vy=speed),
        ]
    elif template == "turning":
        objects = [
            ObjectTrack(_car(-4.0, -4.0, yaw=math.pi / 4.0),
                        vx=speed * math.cos(math.pi / 4.0),
                        vy=speed * math.sin(math.pi / 4.0),
                        yaw_rate=0.3),
        ]
    else:
        raise ShapeError(f"unknown template {template!r}")
    return Scenario(agents=agents, objects=objects, duration=duration,
                    frame_interval=frame_interval, seed=seed)


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "duration": scn.duration,
        "frame_interval": scn.frame_interval,
        "seed": scn.seed,
        "agents": [
            {"id": a.agent_id, "x": a.pose.x, "y": a.pose.y, "yaw": a.pose.yaw,
             "vx": a.vx, "vy": a.vy}
            for a in scn.agents
        ],
        "objects": [
            {"box": asdict(tr.box), "vx": tr.vx, "vy": tr.vy,
             "yaw_rate": tr.yaw_rate}
            for tr in scn.objects
        ],
    }


def scenario_from_dict(data: dict) -> Scenario:
    try:
        agents = [
            AgentSpec(a["id"], Pose2(float(a["x"]), float(a["y"]),
                                     float(a["yaw"])),
                      vx=float(a.get("vx", 0.0)), vy=float(a.get("vy", 0.0)))
            for a in data["agents"]
        ]
        objects = [
            ObjectTrack(OrientedBox(**{k: float(v)
                                       for k, v in tr["box"].items()}),
                        vx=float(tr.get("vx", 0.0)), vy=float(tr.get("vy", 0.0)),
                        yaw_rate=float(tr.get("yaw_rate", 0.0)))
            for tr in data["objects"]
        ]
        return Scenario(agents=agents, objects=objects,
                        duration=float(data.get("duration", 1.2)),
                        frame_interval=float(data.get("frame_interval", 0.1)),
                        seed=int(data.get("seed", 0)))
    except (KeyError, TypeError) as exc:
        raise ShapeError(f"malformed scenario document: {exc}") from exc


def save_scenario(scn: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=2)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
