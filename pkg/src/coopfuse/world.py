"""Synthetic multi-agent world and lossy, laggy feature channel.

Scenes are axis-aligned rectangles moving at constant velocity inside a
square arena, reflecting at the walls. Each agent renders a top-down
occupancy grid in its own pose-centered, heading-aligned frame, restricted
to its field of view, plus fixed sinusoidal coordinate channels. Features
travel to the ego through a channel that drops packets independently and
delays survivors by a uniform integer latency; the ego re-projects arrived
features into its frame using the sender's (possibly noise-corrupted)
reported pose. One simulation tick corresponds to 100 ms.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ops import bilinear_sample
from .tensor import Tensor


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if w == -math.pi else w


def stream(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible generator for (seed, label)."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF,
                                                         zlib.crc32(label.encode())]))


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass
class Scene:
    """Moving rectangles: columns are x, y, width, height, vx, vy."""

    objects: np.ndarray
    bounds: float
    seed: int

    def __post_init__(self):
        self.objects = np.asarray(self.objects, dtype=np.float64).reshape(-1, 6)


def step_scene(scene: Scene) -> Scene:
    """Advance one tick; reflect position and velocity at the arena walls."""
    obj = scene.objects.copy()
    b = scene.bounds
    for axis in (0, 1):
        obj[:, axis] += obj[:, 4 + axis]
        over = obj[:, axis] > b
        obj[over, axis] = 2.0 * b - obj[over, axis]
        obj[over, 4 + axis] *= -1.0
        under = obj[:, axis] < -b
        obj[under, axis] = -2.0 * b - obj[under, axis]
        obj[under, 4 + axis] *= -1.0
    return Scene(objects=obj, bounds=scene.bounds, seed=scene.seed)


def make_scene(seed: int, n_objects: int = 5, bounds: float = 9.0,
               speed_range: tuple[float, float] = (1.2, 2.2),
               extent_range: tuple[float, float] = (1.8, 3.0)) -> Scene:
    rng = stream(seed, "scene")
    pos = rng.uniform(-0.8 * bounds, 0.8 * bounds, size=(n_objects, 2))
    ext = rng.uniform(*extent_range, size=(n_objects, 2))
    ang = rng.uniform(-math.pi, math.pi, size=n_objects)
    spd = rng.uniform(*speed_range, size=n_objects)
    vel = np.stack([spd * np.cos(ang), spd * np.sin(ang)], axis=1)
    return Scene(objects=np.hstack([pos, ext, vel]), bounds=bounds, seed=seed)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_COORD_CACHE: dict[tuple[int, int, int], np.ndarray] = {}
_CELL_CACHE: dict[tuple[int, int, float], tuple[np.ndarray, np.ndarray]] = {}


def coordinate_channels(h: int, w: int, n: int) -> np.ndarray:
    """n fixed sinusoidal positional channels over the grid."""
    key = (h, w, n)
    if key not in _COORD_CACHE:
        rr, cc = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        planes = []
        freq = 1
        while len(planes) < n:
            for p in (np.sin(2 * math.pi * freq * rr), np.cos(2 * math.pi * freq * rr),
                      np.sin(2 * math.pi * freq * cc), np.cos(2 * math.pi * freq * cc)):
                planes.append(p)
            freq += 1
        _COORD_CACHE[key] = np.stack(planes[:n])
    return _COORD_CACHE[key]


def _cell_centers(h: int, w: int, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Local-frame metric coordinates of every cell center."""
    key = (h, w, cell_size)
    if key not in _CELL_CACHE:
        rows = (np.arange(h) - (h - 1) / 2.0) * cell_size
        cols = (np.arange(w) - (w - 1) / 2.0) * cell_size
        ys, xs = np.meshgrid(rows, cols, indexing="ij")
        _CELL_CACHE[key] = (xs, ys)
    return _CELL_CACHE[key]


def render_bev(scene: Scene, pose: Pose2D, h: int, w: int, cell_size: float,
               fov_m: float | None = None, channels: int = 8) -> Tensor:
    """Occupancy plus positional channels in the agent's local frame.

    Only objects whose center lies within fov_m of the agent are drawn;
    fov_m=None draws everything (ground-truth mode).
    """
    if h % 4 or w % 4:
        raise ValueError(f"grid dims must be divisible by 4, got {h}x{w}")
    xs, ys = _cell_centers(h, w, cell_size)
    ct, st = math.cos(pose.heading), math.sin(pose.heading)
    world_x = pose.x + ct * xs - st * ys
    world_y = pose.y + st * xs + ct * ys
    occ = np.zeros((h, w))
    for ox, oy, ow, oh, _, _ in scene.objects:
        if fov_m is not None and math.hypot(ox - pose.x, oy - pose.y) > fov_m:
            continue
        inside = (np.abs(world_x - ox) <= ow / 2.0) & (np.abs(world_y - oy) <= oh / 2.0)
        occ = np.maximum(occ, inside)
    planes = np.concatenate([occ[None], coordinate_channels(h, w, channels - 1)])
    return Tensor(planes)


# ---------------------------------------------------------------------------
# pose noise and frame transforms
# ---------------------------------------------------------------------------

def perturb_pose(pose: Pose2D, loc_sigma: float, head_sigma: float,
                 rng: np.random.Generator) -> Pose2D:
    return Pose2D(
        x=pose.x + loc_sigma * rng.standard_normal(),
        y=pose.y + loc_sigma * rng.standard_normal(),
        heading=wrap_angle(pose.heading + head_sigma * rng.standard_normal()),
    )


def source_coords(h: int, w: int, cell_size: float, sender: Pose2D,
                  ego: Pose2D) -> np.ndarray:
    """Fractional (row, col) positions in the sender grid for each ego cell."""
    xs, ys = _cell_centers(h, w, cell_size)
    ce, se = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.x + ce * xs - se * ys
    wy = ego.y + se * xs + ce * ys
    cs, ss = math.cos(sender.heading), math.sin(sender.heading)
    dx, dy = wx - sender.x, wy - sender.y
    lx = cs * dx + ss * dy
    ly = -ss * dx + cs * dy
    cols = lx / cell_size + (w - 1) / 2.0
    rows = ly / cell_size + (h - 1) / 2.0
    return np.stack([rows, cols])


def transform_to_ego(feature: Tensor, sender: Pose2D, ego: Pose2D,
                     cell_size: float) -> Tensor:
    """Resample a sender-frame grid into the ego frame; outside reads zero."""
    _, h, w = feature.data.shape
    return bilinear_sample(feature, Tensor(source_coords(h, w, cell_size, sender, ego)))


# ---------------------------------------------------------------------------
# the channel
# ---------------------------------------------------------------------------

@dataclass
class ChannelConfig:
    max_latency_ticks: int = 3
    drop_p: float = 0.0
    loc_sigma: float = 0.0
    head_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_latency_ticks < 0:
            raise ValueError(f"max latency must be >= 0, got {self.max_latency_ticks}")
        if not 0.0 <= self.drop_p <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {self.drop_p}")
        if self.loc_sigma < 0 or self.head_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class FeaturePacket:
    feature: Tensor
    sender: str
    emit_tick: int
    arrive_tick: int            # -1 while undecided / dropped
    reported_pose: Pose2D
    dropped: bool = False


class Channel:
    """Stateful per-scenario channel: independent drops, uniform latency."""

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self.rng = stream(cfg.seed, "channel")
        self.pending: list[FeaturePacket] = []

    def send(self, sender: str, feature: Tensor, reported_pose: Pose2D,
             tick: int) -> FeaturePacket:
        dropped = bool(self.rng.random() < self.cfg.drop_p)
        latency = int(self.rng.integers(0, self.cfg.max_latency_ticks + 1))
        pkt = FeaturePacket(feature=feature, sender=sender, emit_tick=tick,
                            arrive_tick=-1 if dropped else tick + latency,
                            reported_pose=reported_pose, dropped=dropped)
        if not dropped:
            self.pending.append(pkt)
        return pkt

    def deliver(self, now: int) -> list[FeaturePacket]:
        ready = [p for p in self.pending if p.arrive_tick <= now]
        self.pending = [p for p in self.pending if p.arrive_tick > now]
        return sorted(ready, key=lambda p: (p.arrive_tick, p.sender))


def channel_deliver(packets: list[FeaturePacket], cfg: ChannelConfig, now: int,
                    rng: np.random.Generator) -> list[FeaturePacket]:
    """One-shot form: assign fates to a packet batch, return what has arrived."""
    delivered = []
    for pkt in packets:
        dropped = bool(rng.random() < cfg.drop_p)
        latency = int(rng.integers(0, cfg.max_latency_ticks + 1))
        arrive = -1 if dropped else pkt.emit_tick + latency
        out = replace(pkt, arrive_tick=arrive, dropped=dropped)
        if not dropped and arrive <= now:
            delivered.append(out)
    return sorted(delivered, key=lambda p: (p.arrive_tick, p.sender))


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass
class AgentSpec:
    id: str
    pose: Pose2D
    fov_m: float


@dataclass
class Scenario:
    seed: int
    ticks: int
    agents: list[AgentSpec]      # ego first
    scene: Scene
    channel: ChannelConfig

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ticks": self.ticks,
            "agents": [{"id": a.id,
                        "pose": {"x": a.pose.x, "y": a.pose.y, "heading": a.pose.heading},
                        "fov_m": a.fov_m} for a in self.agents],
            "objects": [{"x": o[0], "y": o[1], "w": o[2], "h": o[3],
                         "vx": o[4], "vy": o[5]} for o in self.scene.objects],
            "bounds_m": self.scene.bounds,
            "channel": {"L_ticks": self.channel.max_latency_ticks,
                        "drop_p": self.channel.drop_p,
                        "loc_sigma": self.channel.loc_sigma,
                        "head_sigma": self.channel.head_sigma},
        }

    @staticmethod
    def from_json(doc: dict) -> "Scenario":
        ch = doc["channel"]
        objects = np.array([[o["x"], o["y"], o["w"], o["h"], o["vx"], o["vy"]]
                            for o in doc["objects"]]).reshape(-1, 6)
        return Scenario(
            seed=int(doc["seed"]),
            ticks=int(doc["ticks"]),
            agents=[AgentSpec(id=a["id"],
                              pose=Pose2D(a["pose"]["x"], a["pose"]["y"],
                                          a["pose"]["heading"]),
                              fov_m=float(a["fov_m"])) for a in doc["agents"]],
            scene=Scene(objects=objects, bounds=float(doc.get("bounds_m", 10.0)),
                        seed=int(doc["seed"])),
            channel=ChannelConfig(max_latency_ticks=int(ch["L_ticks"]),
                                  drop_p=float(ch["drop_p"]),
                                  loc_sigma=float(ch["loc_sigma"]),
                                  head_sigma=float(ch["head_sigma"]),
                                  seed=int(doc["seed"])),
        )


def load_scenario(path) -> Scenario:
    return Scenario.from_json(json.loads(Path(path).read_text()))


def save_scenario(path, scenario: Scenario) -> None:
    Path(path).write_text(json.dumps(scenario.to_json(), indent=2) + "\n")


def make_scenario(seed: int, channel: ChannelConfig, ticks: int,
                  n_agents: int = 3, n_objects: int = 5, bounds: float = 9.0,
                  fov_ego: float = 8.0, fov_collab: float = 9.0) -> Scenario:
    """Random stationary agents around the origin watching moving objects."""
    rng = stream(seed, "agents")
    agents = [AgentSpec(id="ego",
                        pose=Pose2D(0.0, 0.0, rng.uniform(-math.pi, math.pi)),
                        fov_m=fov_ego)]
    for i in range(n_agents - 1):
        radius = rng.uniform(4.0, 9.0)
        angle = rng.uniform(-math.pi, math.pi)
        agents.append(AgentSpec(
            id=f"c{i + 1}",
            pose=Pose2D(radius * math.cos(angle), radius * math.sin(angle),
                        rng.uniform(-math.pi, math.pi)),
            fov_m=fov_collab))
    scene = make_scene(seed, n_objects=n_objects, bounds=bounds)
    return Scenario(seed=seed, ticks=ticks, agents=agents, scene=scene,
                    channel=replace(channel, seed=seed))
