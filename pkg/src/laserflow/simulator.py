"""Deterministic synthetic scenes of box actors seen by a moving spinning LiDAR."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from laserflow.geometry import (
    BASE_CHANNELS,
    HEIGHT,
    ROAD,
    Pose,
    RangeImage,
    RasterConfig,
)
from laserflow.trajectory import BoxTrajectory

GROUND_REFLECTANCE = 0.3
CLASS_REFLECTANCE = {1: 0.7, 2: 0.5, 3: 0.9}


@dataclass(frozen=True)
class Actor:
    class_id: int
    length: float
    width: float
    center: tuple[float, float]
    heading: float
    speed: float = 0.0
    yaw_rate: float = 0.0
    height: float = 1.5
    z_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ValueError("actor dimensions must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


def _advance(a: Actor, dt: float) -> Actor:
    """Closed-form constant turn rate and speed motion over any signed ``dt``."""
    dh = a.yaw_rate * dt
    if abs(dh) < 1e-12:
        chord = a.speed * dt
    else:
        chord = 2.0 * a.speed / a.yaw_rate * math.sin(0.5 * dh)
    mid = a.heading + 0.5 * dh
    cx, cy = a.center
    return replace(a, center=(cx + chord * math.cos(mid), cy + chord * math.sin(mid)), heading=a.heading + dh)


def step_actor(a: Actor, dt: float) -> Actor:
    """Move an actor forward by ``dt`` seconds along its constant-turn-rate arc."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _advance(a, dt)


@dataclass(frozen=True)
class SimulatorConfig:
    num_scenes: int = 200
    width: int = 256
    height: int = 32
    fov_up_deg: float = 2.0
    fov_down_deg: float = -24.0
    max_range: float = 70.0
    sensor_height: float = 1.8
    num_sweeps: int = 5
    sweep_dt: float = 0.1
    horizon: int = 6
    step_dt: float = 0.5
    num_classes: int = 2
    actors_min: int = 3
    actors_max: int = 8
    actor_range: tuple[float, float] = (6.0, 35.0)
    actor_speed_max: float = 12.0
    actor_yaw_rate_max: float = 0.2
    static_fraction: float = 0.2
    ego_speed_max: float = 10.0
    ego_yaw_rate_max: float = 0.1
    ground: bool = True
    hd_map_channels: bool = False

    @property
    def raster(self) -> RasterConfig:
        return RasterConfig.uniform(self.width, self.height, math.radians(self.fov_up_deg),
                                    math.radians(self.fov_down_deg))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_range"] = list(self.actor_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulatorConfig":
        d = dict(d)
        if "actor_range" in d:
            d["actor_range"] = tuple(d["actor_range"])
        return cls(**d)


@dataclass
class Scene:
    """Actors (at the first sweep time) and the ego sensor pose per tick.

    Ticks ``0..S`` are the sweeps (the last is the current one); ticks
    ``S+1..S+T`` are the future label steps.
    """

    actors: list[Actor]
    ego_poses: list[Pose]
    tick_times: list[float]
    raster: RasterConfig
    max_range: float = 70.0
    ground: bool = True
    hd_map_channels: bool = False
    seed: int = 0
    num_sweeps: int = 1

    def actors_at(self, time: float) -> list[Actor]:
        start = self.tick_times[0]
        return [_advance(a, time - start) if time != start else a for a in self.actors]


def _box_hits(origin: np.ndarray, dirs: np.ndarray, a: Actor) -> np.ndarray:
    """Ray distance to an actor's oriented 3D box (inf where missed)."""
    c, s = math.cos(a.heading), math.sin(a.heading)
    ox, oy = origin[0] - a.center[0], origin[1] - a.center[1]
    o_local = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2] - (a.z_offset + 0.5 * a.height)])
    d_local = np.stack([c * dirs[..., 0] + s * dirs[..., 1], -s * dirs[..., 0] + c * dirs[..., 1], dirs[..., 2]], -1)
    half = np.array([0.5 * a.length, 0.5 * a.width, 0.5 * a.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_local) * inv
        t2 = (half - o_local) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = d_local == 0
    inside = np.abs(o_local) <= half
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.inf, t2)
    near = np.max(np.minimum(t1, t2), axis=-1)
    far = np.min(np.maximum(t1, t2), axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def raycast_with_attribution(scene: Scene, tick: int) -> tuple[RangeImage, np.ndarray]:
    """Cast every beam of ``tick``; returns the image and the hit actor per pixel (-1 if none)."""
    if not 0 <= tick < len(scene.ego_poses):
        raise IndexError("tick outside ego trajectory")
    pose = scene.ego_poses[tick]
    cfg = scene.raster
    dirs_s = cfg.beam_directions()
    dirs_w = dirs_s @ pose.rotation  # R^T d for each row vector d
    origin = pose.origin
    h, w = cfg.shape

    best = np.full((h, w), np.inf)
    owner = np.full((h, w), -1, dtype=np.int64)
    if scene.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dirs_w[..., 2] < 0, -origin[2] / dirs_w[..., 2], np.inf)
        best = np.where(tg > 0, tg, np.inf)
    for i, a in enumerate(scene.actors_at(scene.tick_times[tick])):
        t = _box_hits(origin, dirs_w, a)
        closer = t < best
        best = np.where(closer, t, best)
        owner = np.where(closer, i, owner)
    valid = best <= scene.max_range
    owner = np.where(valid, owner, -1)
    rng = np.where(valid, best, 0.0)

    actors = scene.actors
    refl = np.where(owner >= 0, 0.0, GROUND_REFLECTANCE)
    for i, a in enumerate(actors):
        refl = np.where(owner == i, CLASS_REFLECTANCE.get(a.class_id, 0.5), refl)
    channels = BASE_CHANNELS + ((HEIGHT, ROAD) if scene.hd_map_channels else ())
    raster = np.zeros((h, w, len(channels)), dtype=np.float32)
    raster[..., 0] = rng
    raster[..., 1] = np.where(valid, refl, 0.0)
    raster[..., 2] = valid
    points = dirs_s * rng[..., None]
    if scene.hd_map_channels:
        z_world = origin[2] + dirs_w[..., 2] * rng
        raster[..., 3] = np.where(valid, z_world, 0.0)
        raster[..., 4] = valid
    sweep_index = min(tick - (scene.num_sweeps - 1), 0)
    return RangeImage(raster, pose, sweep_index, channels, points), owner


def raycast_sweep(scene: Scene, tick: int) -> RangeImage:
    return raycast_with_attribution(scene, tick)[0]


@dataclass
class SweepSequence:
    """Past sweeps (oldest first, current last) with per-pixel and per-actor labels."""

    sweeps: list[RangeImage]
    class_ids: np.ndarray
    actor_ids: np.ndarray
    trajectories: list[BoxTrajectory]
    actor_classes: list[int]
    raster: RasterConfig
    step_dt: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def current(self) -> RangeImage:
        return self.sweeps[-1]

    @property
    def horizon(self) -> int:
        return self.trajectories[0].steps - 1 if self.trajectories else self.meta.get("horizon", 0)

    def points_per_actor(self) -> np.ndarray:
        return np.bincount(self.actor_ids[self.actor_ids >= 0], minlength=len(self.trajectories))


def _sample_scene(cfg: SimulatorConfig, rng: np.random.Generator, seed: int) -> Scene:
    t_start = -(cfg.num_sweeps - 1) * cfg.sweep_dt
    sweep_times = [t_start + k * cfg.sweep_dt for k in range(cfg.num_sweeps)]
    future_times = [k * cfg.step_dt for k in range(1, cfg.horizon + 1)]
    times = sweep_times + future_times

    ego_speed = rng.uniform(0.0, cfg.ego_speed_max)
    ego_yaw_rate = rng.uniform(-cfg.ego_yaw_rate_max, cfg.ego_yaw_rate_max)
    ego0 = Actor(0, 4.5, 2.0, (0.0, 0.0), 0.0, ego_speed, ego_yaw_rate)
    poses = []
    for t in times:
        e = _advance(ego0, t)
        poses.append(Pose.from_placement((e.center[0], e.center[1], cfg.sensor_height), e.heading))

    n_actors = int(rng.integers(cfg.actors_min, cfg.actors_max + 1))
    placed: list[Actor] = []
    attempts = 0
    while len(placed) < n_actors and attempts < 200:
        attempts += 1
        cls = int(rng.integers(1, cfg.num_classes)) if cfg.num_classes > 2 else 1
        length = rng.uniform(4.0, 5.0) if cls == 1 else rng.uniform(0.6, 2.0)
        width = rng.uniform(1.8, 2.1) if cls == 1 else rng.uniform(0.6, 0.9)
        r = rng.uniform(*cfg.actor_range)
        az = rng.uniform(-math.pi, math.pi)
        center = (r * math.cos(az), r * math.sin(az))
        radius = 0.5 * math.hypot(length, width)
        if math.hypot(*center) < radius + 3.0:
            continue
        if any(math.hypot(center[0] - o.center[0], center[1] - o.center[1])
               < radius + 0.5 * math.hypot(o.length, o.width) + 0.5 for o in placed):
            continue
        static = rng.uniform() < cfg.static_fraction
        speed = 0.0 if static else rng.uniform(0.0, cfg.actor_speed_max)
        yaw_rate = 0.0 if static else rng.uniform(-cfg.actor_yaw_rate_max, cfg.actor_yaw_rate_max)
        placed.append(Actor(cls, length, width, center, rng.uniform(-math.pi, math.pi), speed, yaw_rate,
                            1.5 if cls == 1 else 1.7, 0.0))
    # placement happened at t=0; store states at the first sweep time
    actors = [_advance(a, t_start) for a in placed]
    return Scene(actors, poses, times, cfg.raster, cfg.max_range, cfg.ground, cfg.hd_map_channels, seed,
                 cfg.num_sweeps)


def label_trajectories(scene: Scene, num_sweeps: int, horizon: int, step_dt: float) -> list[BoxTrajectory]:
    """Ground-truth boxes at t = 0, dt, ..., T*dt in the current sensor frame."""
    current = scene.ego_poses[num_sweeps - 1]
    yaw0 = current.yaw
    states = [scene.actors_at(k * step_dt) for k in range(horizon + 1)]
    out = []
    for i, a in enumerate(scene.actors):
        centers = np.array([[s[i].center[0], s[i].center[1], 0.0] for s in states])
        local = current.apply(centers)[:, :2]
        headings = np.array([s[i].heading - yaw0 for s in states])
        out.append(BoxTrajectory(local, headings, a.length, a.width))
    return out


def simulate_scene(scene: Scene, num_sweeps: int, horizon: int, step_dt: float) -> SweepSequence:
    sweeps = []
    owner = None
    for tick in range(num_sweeps):
        img, own = raycast_with_attribution(scene, tick)
        sweeps.append(img)
        owner = own
    classes = [a.class_id for a in scene.actors]
    lookup = np.array(classes + [0], dtype=np.int64)  # index -1 -> background
    class_ids = lookup[owner]
    trajs = label_trajectories(scene, num_sweeps, horizon, step_dt)
    return SweepSequence(sweeps, class_ids, owner, trajs, classes, scene.raster, step_dt,
                         {"seed": scene.seed, "horizon": horizon})


def generate_dataset(cfg: SimulatorConfig, seed: int) -> list[SweepSequence]:
    """``cfg.num_scenes`` independent sequences, deterministic in ``seed``."""
    children = np.random.SeedSequence(seed).spawn(cfg.num_scenes)
    out = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        scene = _sample_scene(cfg, rng, int(child.generate_state(1)[0]))
        out.append(simulate_scene(scene, cfg.num_sweeps, cfg.horizon, cfg.step_dt))
    return out
