"""Deterministic synthetic dataset generator.

World geometry is analytic (infinite ground plane, axis-aligned boxes,
bounded tilted ramps), scans are ray-cast against it, and the vehicle
follows a planar figure-eight with heading tangent to the path.  All
randomness flows from one seed; per-scan noise streams are derived from
(seed, sensor index, scan index) so scans can be generated in any order or
in parallel with identical output.

Dataset layout written by :func:`write_dataset`:

    gins_poses.txt      noisy GINS poses, "t tx ty tz qx qy qz qw"
    gins_poses_gt.txt   ground-truth poses, same format
    lidar_<id>/<stamp>.pcd   one scan per file, binary PCD
    sensors.txt         id kind base h_fov v_fov density max_range sigma
    gt_extrinsics.txt   per sensor: id tx ty tz qx qy qz qw (GINS<-lidar)
    meta.txt            "key = value" echo of the generating config
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import PointCloud, write_pcd
from .se3 import PlaneModel, RigidTransform, Trajectory


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class Ramp:
    """Bounded tilted plane patch, n . x + d = 0 inside the xy rectangle."""

    plane: PlaneModel
    x_range: tuple[float, float]
    y_range: tuple[float, float]


@dataclass
class World:
    boxes: list = field(default_factory=list)
    ramps: list = field(default_factory=list)
    ground: PlaneModel = field(default_factory=lambda: PlaneModel(np.array([0.0, 0.0, 1.0]), 0.0))


@dataclass(frozen=True)
class LidarModel:
    kind: str  # "spinning" | "solid_state"
    h_fov_deg: float
    v_fov_deg: float
    density: int  # channels for spinning, total rays for solid state
    max_range: float
    range_sigma: float
    azimuth_steps: int = 900

    def __post_init__(self):
        if not (0.0 < self.h_fov_deg <= 360.0):
            raise ValueError("horizontal FoV must be in (0, 360]")
        if self.range_sigma < 0.0:
            raise ValueError("range noise must be nonnegative")


@dataclass(frozen=True)
class SensorMount:
    sensor_id: str
    model: LidarModel
    extrinsic: RigidTransform  # GINS <- lidar
    base: bool = False


@dataclass
class SimConfig:
    seed: int = 0
    amp_x: float = 16.0
    amp_y: float = 9.0
    duration: float = 68.0
    gins_rate: float = 50.0
    scan_rate: float = 1.0
    gins_pos_sigma: float = 0.03
    gins_rot_sigma_deg: float = 0.1
    ripple_deg: float = 0.0
    ripple_hz: float = 1.7
    height: float = 1.8  # GINS unit above the ground
    motion_distortion: bool = False
    sensors: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sensors:
            self.sensors = default_sensors()


def zero_noise(config: SimConfig) -> SimConfig:
    """Copy of the config with GINS and range noise switched off."""
    sensors = [
        replace(m, model=replace(m.model, range_sigma=0.0)) for m in config.sensors
    ]
    return replace(config, gins_pos_sigma=0.0, gins_rot_sigma_deg=0.0, sensors=sensors)


def default_sensors() -> list[SensorMount]:
    """Two-sensor rig with disjoint instantaneous fields of view: a spinning
    base unit and a solid-state unit pitched down toward the rear."""
    spinning = LidarModel(
        kind="spinning",
        h_fov_deg=360.0,
        v_fov_deg=16.0,
        density=16,
        max_range=50.0,
        range_sigma=0.02,
        azimuth_steps=900,
    )
    solid = LidarModel(
        kind="solid_state",
        h_fov_deg=80.0,
        v_fov_deg=18.0,
        density=8000,
        max_range=40.0,
        range_sigma=0.01,
    )
    return [
        SensorMount(
            "l0",
            spinning,
            RigidTransform.from_rpy(
                math.radians(1.5), math.radians(2.0), math.radians(25.0), t=(1.1, 0.2, 0.6)
            ),
            base=True,
        ),
        SensorMount(
            "l1",
            solid,
            RigidTransform.from_rpy(
                math.radians(1.0), math.radians(31.0), math.radians(175.0), t=(-1.6, -0.4, 0.9)
            ),
        ),
    ]


# ---------------------------------------------------------------------------
# Trajectory


def _pose_arrays(config: SimConfig, times: np.ndarray):
    """Batched ground-truth GINS poses: rotations (N,3,3), positions (N,3)."""
    times = np.asarray(times, dtype=float)
    w = 2.0 * math.pi / config.duration
    a, b = config.amp_x, config.amp_y
    x = a * np.sin(w * times)
    y = b * np.sin(w * times) * np.cos(w * times)
    z = np.full_like(times, config.height)
    vx = a * w * np.cos(w * times)
    vy = b * w * np.cos(2.0 * w * times)
    yaw = np.arctan2(vy, vx)
    if config.ripple_deg > 0.0:
        amp = math.radians(config.ripple_deg)
        pitch = amp * np.sin(2.0 * math.pi * config.ripple_hz * times)
        roll = amp * np.sin(2.0 * math.pi * config.ripple_hz * 1.37 * times + 0.9)
    else:
        pitch = np.zeros_like(times)
        roll = np.zeros_like(times)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rot = np.empty((len(times), 3, 3))
    rot[:, 0, 0] = cy * cp
    rot[:, 0, 1] = cy * sp * sr - sy * cr
    rot[:, 0, 2] = cy * sp * cr + sy * sr
    rot[:, 1, 0] = sy * cp
    rot[:, 1, 1] = sy * sp * sr + cy * cr
    rot[:, 1, 2] = sy * sp * cr - cy * sr
    rot[:, 2, 0] = -sp
    rot[:, 2, 1] = cp * sr
    rot[:, 2, 2] = cp * cr
    return rot, np.column_stack([x, y, z])


def gt_pose(config: SimConfig, t: float) -> RigidTransform:
    rot, pos = _pose_arrays(config, np.array([t]))
    return RigidTransform.from_rotation(rot[0], pos[0])


def generate_trajectory(config: SimConfig) -> Trajectory:
    """Ground-truth GINS trajectory sampled at the GINS rate."""
    n = int(round(config.duration * config.gins_rate)) + 1
    times = np.arange(n) / config.gins_rate
    rot, pos = _pose_arrays(config, times)
    poses = [RigidTransform.from_rotation(rot[i], pos[i]) for i in range(n)]
    return Trajectory(times, poses)


def noisy_trajectory(config: SimConfig) -> Trajectory:
    """Measured GINS trajectory: iid position and attitude noise per sample."""
    traj = generate_trajectory(config)
    if config.gins_pos_sigma <= 0.0 and config.gins_rot_sigma_deg <= 0.0:
        return traj
    rng = np.random.default_rng((config.seed, 777))
    s_rot = math.radians(config.gins_rot_sigma_deg)
    poses = []
    for pose in traj.poses:
        dt = rng.normal(scale=config.gins_pos_sigma, size=3)
        dw = rng.normal(scale=s_rot, size=3)
        from .se3 import exp_map

        poses.append(pose @ exp_map(np.concatenate([dw, dt])))
    return Trajectory(traj.times, poses)


# ---------------------------------------------------------------------------
# Worlds


def make_world(seed: int, preset: str = "boxes", config: SimConfig | None = None) -> World:
    """Analytic world around the trajectory; presets:

    * ``empty``       ground plane only,
    * ``boxes``       scattered boxes clear of the driving corridor,
    * ``boxes_bumpy`` boxes plus a rubble patch of small blocks,
    * ``boxes_ramp``  boxes plus a gently sloped region.
    """
    world = World()
    if preset == "empty":
        return world
    cfg = config if config is not None else SimConfig(seed=seed)
    rng = np.random.default_rng((seed, 101))
    corridor = _pose_arrays(cfg, np.linspace(0.0, cfg.duration, 600))[1][:, :2]
    extent = max(cfg.amp_x, cfg.amp_y) + 18.0
    placed = 0
    while placed < 34:
        cx, cy = rng.uniform(-extent, extent, size=2)
        if np.min(np.hypot(corridor[:, 0] - cx, corridor[:, 1] - cy)) < 2.6:
            continue
        sx, sy = rng.uniform(1.0, 4.0, size=2)
        h = rng.uniform(1.2, 5.0)
        world.boxes.append(
            Box(np.array([cx - sx / 2, cy - sy / 2, 0.0]), np.array([cx + sx / 2, cy + sy / 2, h]))
        )
        placed += 1
    if preset == "boxes_bumpy":
        # rubble field near the first bend of the path
        bx, by = cfg.amp_x * 0.75, cfg.amp_y * 0.55
        for _ in range(60):
            cx = bx + rng.uniform(-6.0, 6.0)
            cy = by + rng.uniform(-6.0, 6.0)
            s = rng.uniform(0.15, 0.45)
            h = rng.uniform(0.05, 0.28)
            world.boxes.append(
                Box(np.array([cx - s, cy - s, 0.0]), np.array([cx + s, cy + s, h]))
            )
    elif preset == "boxes_ramp":
        n = PlaneModel.canonical(np.array([-0.12, 0.0, 1.0]), 0.0).normal
        world.ramps.append(
            Ramp(
                PlaneModel(n, float(-n[0] * (cfg.amp_x + 2.0))),
                (cfg.amp_x + 2.0, cfg.amp_x + 16.0),
                (-14.0, 14.0),
            )
        )
    elif preset != "boxes":
        raise ValueError(f"unknown world preset {preset!r}")
    return world


# ---------------------------------------------------------------------------
# Ray casting


def ray_cast(world: World, origins: np.ndarray, dirs: np.ndarray, max_range: float):
    """Smallest positive hit distance per ray, inf on miss."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    if len(origins) == 1 and n > 1:
        origins = np.broadcast_to(origins, (n, 3))
    best = np.full(n, np.inf)

    # ground plane z = 0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dz
    ok = (dz != 0.0) & (t > 1e-6)
    best = np.where(ok & (t < best), t, best)

    for ramp in world.ramps:
        nrm, d = ramp.plane.normal, ramp.plane.intercept
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -(origins @ nrm + d) / denom
        hit = origins + t[:, None] * dirs
        ok = (
            (np.abs(denom) > 1e-12)
            & (t > 1e-6)
            & (hit[:, 0] >= ramp.x_range[0])
            & (hit[:, 0] <= ramp.x_range[1])
            & (hit[:, 1] >= ramp.y_range[0])
            & (hit[:, 1] <= ramp.y_range[1])
        )
        best = np.where(ok & (t < best), t, best)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for box in world.boxes:
        t1 = (box.lo[None, :] - origins) * inv
        t2 = (box.hi[None, :] - origins) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= tmin) & (tmin > 1e-6)
        best = np.where(ok & (tmin < best), tmin, best)

    return np.where(best <= max_range, best, np.inf)


def scan_directions(model: LidarModel) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions in the sensor frame plus per-ray times relative to
    the scan timestamp (the sweep ends at the timestamp, so times span
    [-period, 0] and are non-decreasing)."""
    if model.kind == "spinning":
        el = np.radians(np.linspace(-model.v_fov_deg / 2.0, model.v_fov_deg / 2.0, model.density))
        half_h = math.radians(model.h_fov_deg) / 2.0
        az = -half_h + math.radians(model.h_fov_deg) * (
            np.arange(model.azimuth_steps) / model.azimuth_steps
        )
        azg, elg = np.meshgrid(az, el, indexing="ij")
        rel = (np.arange(model.azimuth_steps) / model.azimuth_steps - 1.0).repeat(model.density)
    elif model.kind == "solid_state":
        n = model.density
        theta = 2.0 * math.pi * np.arange(n) / n
        azg = math.radians(model.h_fov_deg) / 2.0 * np.sin(7.0 * theta)
        elg = math.radians(model.v_fov_deg) / 2.0 * np.sin(11.0 * theta + math.pi / 3.0)
        rel = np.arange(n) / n - 1.0
    else:
        raise ValueError(f"unknown lidar kind {model.kind!r}")
    azf, elf = azg.ravel(), elg.ravel()
    dirs = np.column_stack(
        [np.cos(elf) * np.cos(azf), np.cos(elf) * np.sin(azf), np.sin(elf)]
    )
    return dirs, rel.astype(float)


def simulate_scan(
    world: World,
    model: LidarModel,
    sensor_pose: RigidTransform,
    rng: np.random.Generator | None = None,
) -> PointCloud:
    """Single scan from a static pose (no motion distortion)."""
    dirs_local, _ = scan_directions(model)
    dirs_world = dirs_local @ sensor_pose.rotation.T
    ranges = ray_cast(world, sensor_pose.t, dirs_world, model.max_range)
    hit = np.isfinite(ranges)
    r = ranges[hit]
    if rng is not None and model.range_sigma > 0.0:
        r = r + rng.normal(scale=model.range_sigma, size=len(r))
    return PointCloud(dirs_local[hit] * r[:, None])


def _simulate_scan_moving(world, model, config, mount, scan_time, rng):
    """Scan while driving: each ray fires from the pose at its own time, the
    returned point is expressed in that instantaneous sensor frame, and the
    cloud carries the per-point times."""
    dirs_local, rel = scan_directions(model)
    period = 1.0 / config.scan_rate
    times = scan_time + rel * period
    rot_g, pos_g = _pose_arrays(config, times)
    r_e, t_e = mount.extrinsic.rotation, mount.extrinsic.t
    rot_s = rot_g @ r_e
    pos_s = np.einsum("nij,j->ni", rot_g, t_e) + pos_g
    dirs_world = np.einsum("nij,nj->ni", rot_s, dirs_local)
    ranges = ray_cast(world, pos_s, dirs_world, model.max_range)
    hit = np.isfinite(ranges)
    r = ranges[hit]
    if rng is not None and model.range_sigma > 0.0:
        r = r + rng.normal(scale=model.range_sigma, size=len(r))
    return PointCloud(dirs_local[hit] * r[:, None], per_point_time=(rel * period)[hit])


def scan_times(config: SimConfig) -> np.ndarray:
    """Scan (sweep-end) timestamps; the first full sweep ends at one period."""
    period = 1.0 / config.scan_rate
    n = int(math.floor(config.duration * config.scan_rate))
    return period * np.arange(1, n + 1)


def simulate_dataset_scans(world: World, config: SimConfig):
    """Yield (mount, scan index, timestamp, cloud) over all sensors."""
    stamps = scan_times(config)
    for s_idx, mount in enumerate(config.sensors):
        for k, stamp in enumerate(stamps):
            rng = np.random.default_rng((config.seed, s_idx, k))
            if config.motion_distortion:
                pc = _simulate_scan_moving(world, mount.model, config, mount, stamp, rng)
            else:
                pose = gt_pose(config, stamp) @ mount.extrinsic
                pc = simulate_scan(world, mount.model, pose, rng)
            pc.timestamp = float(stamp)
            pc.sensor_id = mount.sensor_id
            yield mount, k, float(stamp), pc


# ---------------------------------------------------------------------------
# Dataset files


def _write_pose_file(path: Path, traj: Trajectory) -> None:
    lines = ["# t tx ty tz qx qy qz qw"]
    for t, pose in zip(traj.times, traj.poses):
        q = pose.xyzw()
        lines.append(
            f"{t:.6f} {pose.t[0]:.9f} {pose.t[1]:.9f} {pose.t[2]:.9f} "
            f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}"
        )
    path.write_text("\n".join(lines) + "\n")


def read_pose_file(path) -> Trajectory:
    times, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        times.append(vals[0])
        poses.append(RigidTransform.from_xyzw(*vals[4:8], t=vals[1:4]))
    return Trajectory(np.array(times), poses)


def write_dataset(world: World, config: SimConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    _write_pose_file(out / "gins_poses_gt.txt", generate_trajectory(config))
    _write_pose_file(out / "gins_poses.txt", noisy_trajectory(config))

    sensor_lines = ["# id kind base h_fov_deg v_fov_deg density max_range_m range_sigma_m"]
    gt_lines = ["# id tx ty tz qx qy qz qw  (GINS<-lidar)"]
    for mount in config.sensors:
        m = mount.model
        sensor_lines.append(
            f"{mount.sensor_id} {m.kind} {int(mount.base)} {m.h_fov_deg:.3f} "
            f"{m.v_fov_deg:.3f} {m.density} {m.max_range:.3f} {m.range_sigma:.4f}"
        )
        q = mount.extrinsic.xyzw()
        t = mount.extrinsic.t
        gt_lines.append(
            f"{mount.sensor_id} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}"
        )
    (out / "sensors.txt").write_text("\n".join(sensor_lines) + "\n")
    (out / "gt_extrinsics.txt").write_text("\n".join(gt_lines) + "\n")

    meta = {
        "seed": config.seed,
        "amp_x": config.amp_x,
        "amp_y": config.amp_y,
        "duration": config.duration,
        "gins_rate": config.gins_rate,
        "scan_rate": config.scan_rate,
        "gins_pos_sigma": config.gins_pos_sigma,
        "gins_rot_sigma_deg": config.gins_rot_sigma_deg,
        "ripple_deg": config.ripple_deg,
        "height_m": config.height,
        "motion_distortion": str(config.motion_distortion).lower(),
    }
    (out / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))

    for mount, _k, stamp, pc in simulate_dataset_scans(world, config):
        sensor_dir = out / f"lidar_{mount.sensor_id}"
        sensor_dir.mkdir(exist_ok=True)
        write_pcd(sensor_dir / f"{stamp:012.6f}.pcd", pc, binary=True)
    return out


def elevation_band(model: LidarModel, mount_rotation: np.ndarray) -> tuple[float, float]:
    """Elevation range (degrees) of the ray directions in the vehicle frame."""
    dirs, _ = scan_directions(model)
    world = dirs @ mount_rotation.T
    el = np.degrees(np.arcsin(np.clip(world[:, 2], -1.0, 1.0)))
    return float(el.min()), float(el.max())


def direction_cones_overlap(
    a: LidarModel, rot_a: np.ndarray, b: LidarModel, rot_b: np.ndarray
) -> bool:
    """True when the instantaneous direction sets can intersect: elevation
    bands overlap and (unless either unit sweeps a full circle) azimuth
    sectors overlap too."""
    lo_a, hi_a = elevation_band(a, rot_a)
    lo_b, hi_b = elevation_band(b, rot_b)
    if hi_a < lo_b or hi_b < lo_a:
        return False
    if a.h_fov_deg >= 360.0 or b.h_fov_deg >= 360.0:
        return True

    def az_sector(model, rot):
        dirs, _ = scan_directions(model)
        world = dirs @ rot.T
        az = np.degrees(np.arctan2(world[:, 1], world[:, 0]))
        return float(az.min()), float(az.max())

    a_lo, a_hi = az_sector(a, rot_a)
    b_lo, b_hi = az_sector(b, rot_b)
    return not (a_hi < b_lo or b_hi < a_lo)
