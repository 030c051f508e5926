"""LiDAR-GINS calibration stages: rotation-only global initialization,
batch refinement against the GINS trajectory, and ground-alignment
compensation of the height component left unobservable by planar motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import build_kdtree, nearest_neighbors, voxel_downsample, PointCloud
from .errors import (
    DivergedSolveError,
    InsufficientMotionError,
    NoGroundFoundError,
)
from .factors import MatchFactor, PriorFactor, gated_matches
from .se3 import PlaneModel, RigidTransform, Trajectory
from .solver import Problem, RobustKernel, SearchSpace, direct_search, lm_minimize


@dataclass(frozen=True)
class SensorInfo:
    sensor_id: str
    base: bool = False


@dataclass
class Rig:
    """Sensor set, measured GINS trajectory, extrinsic estimates, and the
    measured installation height of the GINS unit."""

    sensors: list
    gins_trajectory: Trajectory
    extrinsics: dict = field(default_factory=dict)  # sensor_id -> GINS<-lidar
    height: float = 0.0

    def __post_init__(self):
        bases = [s.sensor_id for s in self.sensors if s.base]
        if len(bases) != 1:
            raise ValueError(f"need exactly one base sensor, found {bases}")
        self._base = bases[0]

    @property
    def base_id(self) -> str:
        return self._base

    def sensor_ids(self) -> list[str]:
        return [s.sensor_id for s in self.sensors]


@dataclass
class GroundPlane:
    plane: PlaneModel
    inliers: int
    rms: float
    inlier_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class StageReport:
    """Per-sensor outcome of an outer re-association loop."""

    solver: object
    round_mean_costs: list
    correspondences: int = 0


# ---------------------------------------------------------------------------
# Stage 1: rotation-only initialization


def _rpy_rotation(yaw: float, pitch: float, roll: float) -> RigidTransform:
    return RigidTransform.from_rpy(roll, pitch, yaw)


def map_consistency(
    frames: list[np.ndarray],
    poses: list[RigidTransform],
    rotation: RigidTransform,
    gate: float = 1.0,
) -> float:
    """Mean gated NN distance between consecutive frames stitched through a
    candidate rotation-only extrinsic; misses count at the gate value."""
    world = [(p @ rotation).apply(f) for f, p in zip(frames, poses)]
    total, count = 0.0, 0
    for a, b in zip(world, world[1:]):
        tree = build_kdtree(b)
        _, dist = nearest_neighbors(tree, a, gate)
        total += float(np.minimum(dist, gate).sum())
        count += len(a)
    return total / max(count, 1)


def initialize_rotation(
    clouds: list[np.ndarray],
    gins_poses: list[RigidTransform],
    gate: float = 1.0,
    tilt_bound_deg: float = 30.0,
    max_evaluations: int = 700,
    max_rounds: int = 200,
    min_yaw_span_deg: float = 10.0,
    max_frames: int = 12,
    max_points: int = 400,
) -> RigidTransform:
    """Rotation-only estimate of the GINS<-lidar extrinsic.

    Derivative-free search over yaw (full circle) and pitch/roll (near
    upright); the objective is the mean gated nearest-neighbor distance
    between consecutive keyframe clouds stitched through the candidate
    rotation; translation is fixed at zero.  The search re-runs on bounds
    shrunk around the incumbent until the estimate stops moving.
    """
    if len(clouds) < 5:
        raise InsufficientMotionError(f"need >= 5 keyframes, have {len(clouds)}")
    yaws = np.unwrap(
        [math.atan2(p.rotation[1, 0], p.rotation[0, 0]) for p in gins_poses]
    )
    if math.degrees(yaws.max() - yaws.min()) < min_yaw_span_deg:
        raise InsufficientMotionError(
            f"trajectory yaw span {math.degrees(yaws.max() - yaws.min()):.1f} deg too small"
        )

    stride = max(1, len(clouds) // max_frames)
    frames = []
    poses = []
    for pts, pose in list(zip(clouds, gins_poses))[::stride]:
        pc = voxel_downsample(PointCloud(pts), 0.5)
        sub = pc.points
        if len(sub) > max_points:
            sub = sub[:: -(-len(sub) // max_points)]
        frames.append(sub)
        poses.append(pose)

    def objective(x) -> float:
        return map_consistency(frames, poses, _rpy_rotation(*x), gate)

    tilt = math.radians(tilt_bound_deg)
    lower = np.array([-math.pi, -tilt, -tilt])
    upper = np.array([math.pi, tilt, tilt])
    best = None
    for _ in range(max_rounds):
        space = SearchSpace(lower, upper, max_evaluations=max_evaluations)
        res = direct_search(objective, space)
        if best is not None:
            prev = _rpy_rotation(*best)
            cur = _rpy_rotation(*res.argmin)
            delta = (prev.inverse() @ cur).rotation_angle()
            best = res.argmin
            if math.degrees(delta) < 0.5:
                break
        else:
            best = res.argmin
        # shrink around the incumbent, yaw included, tilt bounds clamped
        half = (upper - lower) * 0.125
        lower = np.maximum(best - half, [-math.pi, -tilt, -tilt])
        upper = np.minimum(best + half, [math.pi, tilt, tilt])
    return _rpy_rotation(*best)


# ---------------------------------------------------------------------------
# Stage 2: batch LiDAR-GINS refinement


def proximate_pairs(positions: np.ndarray, prune_dist: float) -> list[tuple[int, int]]:
    """Frame index pairs (i < j) whose positions are within prune_dist."""
    n = len(positions)
    out = []
    for i in range(n):
        d = np.linalg.norm(positions[i + 1 :] - positions[i], axis=1)
        for j in np.nonzero(d <= prune_dist)[0]:
            out.append((i, int(i + 1 + j)))
    return out


def calibrate_lidar_gins(
    rig: Rig,
    keyframe_clouds: dict,
    covariances: dict,
    initial: dict,
    gate: float = 1.0,
    huber_delta: float = 0.1,
    rounds: int = 5,
    prune_dist: float = 15.0,
    max_pairs: int = 2000,
    workers: int = 1,
    sensor_ids=None,
):
    """Refine each sensor's GINS<-lidar extrinsic by minimizing the
    robustified self-consistency of its stitched keyframe map.

    GINS poses stay fixed at this stage.  Outer loop: re-associate
    correspondences, solve, repeat until the extrinsic stops moving
    (< 1e-4 m, < 0.01 deg) or the round budget runs out.

    ``keyframe_clouds[(sensor_id, t)]`` holds sensor-frame points;
    ``covariances`` the matching regularized per-point covariances.
    """
    results = {}
    reports = {}
    kernel = RobustKernel(huber_delta)
    for sid in sensor_ids if sensor_ids is not None else rig.sensor_ids():
        stamps = sorted(t for (s, t) in keyframe_clouds if s == sid)
        gposes = [rig.gins_trajectory.pose_at(t) for t in stamps]
        ext = initial[sid]
        prev_mean = None
        report = None
        mean_costs = []
        n_corr = 0
        for _round in range(rounds):
            world = [
                (gp @ ext).apply(keyframe_clouds[(sid, t)])
                for gp, t in zip(gposes, stamps)
            ]
            positions = np.array([(gp @ ext).t for gp in gposes])
            prob = Problem()
            prob.add_variable("ext", ext, kind="extrinsic")
            # Weak prior toward the initialization: planar motion leaves one
            # translation direction unobservable and this pins it in place
            # without biasing the well-constrained directions.
            prob.add_factor(
                PriorFactor(
                    "ext",
                    initial[sid],
                    np.concatenate([np.full(3, math.radians(10.0) ** 2), np.ones(3)]),
                )
            )
            n_corr = 0
            for i, j in proximate_pairs(positions, prune_dist):
                ia, ib = gated_matches(world[i], world[j], gate, max_pairs, workers)
                if len(ia) == 0:
                    continue
                pts_i = keyframe_clouds[(sid, stamps[i])]
                pts_j = keyframe_clouds[(sid, stamps[j])]
                cov_i = covariances[(sid, stamps[i])]
                cov_j = covariances[(sid, stamps[j])]
                prob.add_factor(
                    MatchFactor(
                        [("const", gposes[i]), ("var", "ext")],
                        [("const", gposes[j]), ("var", "ext")],
                        pts_i[ia],
                        pts_j[ib],
                        cov_i[ia],
                        cov_j[ib],
                        robust=kernel,
                    )
                )
                n_corr += len(ia)
            if n_corr == 0:
                raise DivergedSolveError(f"sensor {sid}: no gated correspondences")
            report = lm_minimize(prob)
            new_ext = prob.variables["ext"].value
            mean_cost = report.final_cost / n_corr
            mean_costs.append(mean_cost)
            if prev_mean is not None and mean_cost > 2.0 * prev_mean + 1e-12:
                raise DivergedSolveError(
                    f"sensor {sid}: mean cost rose {prev_mean:.3e} -> {mean_cost:.3e}"
                )
            prev_mean = mean_cost
            delta = ext.inverse() @ new_ext
            ext = new_ext
            if (
                np.linalg.norm(delta.t) < 1e-4
                and math.degrees(delta.rotation_angle()) < 0.01
            ):
                break
        results[sid] = ext
        reports[sid] = StageReport(report, mean_costs, n_corr)
    return results, reports


# ---------------------------------------------------------------------------
# Ground plane extraction and alignment


def fit_ground_plane(
    points_in_gins: np.ndarray,
    height: float,
    ransac_iters: int = 500,
    inlier_thresh: float = 0.05,
    max_tilt_deg: float = 30.0,
    min_inlier_ratio: float = 0.2,
    seed: int = 0,
) -> GroundPlane:
    """RANSAC ground plane on a cloud expressed in the GINS frame.

    Candidate points are gated to a band around the expected ground depth
    (z within [-height-2, -height+2]); hypotheses are 3-point planes,
    refined by least squares over the inliers; planes tilted more than
    max_tilt_deg from horizontal are rejected.
    """
    pts = np.asarray(points_in_gins, dtype=float).reshape(-1, 3)
    band_mask = (pts[:, 2] >= -height - 2.0) & (pts[:, 2] <= -height + 2.0)
    band_idx = np.nonzero(band_mask)[0]
    band = pts[band_idx]
    if len(band) < 100:
        raise NoGroundFoundError(f"only {len(band)} points in the ground band")

    rng = np.random.default_rng(seed)
    best_count, best_normal, best_d = 0, None, 0.0
    n = len(band)
    for _ in range(ransac_iters):
        i, j, k = rng.choice(n, size=3, replace=False)
        v1, v2 = band[j] - band[i], band[k] - band[i]
        nrm = np.cross(v1, v2)
        norm = np.linalg.norm(nrm)
        if norm < 1e-9:
            continue
        nrm = nrm / norm
        d = -float(nrm @ band[i])
        count = int(np.count_nonzero(np.abs(band @ nrm + d) <= inlier_thresh))
        if count > best_count:
            best_count, best_normal, best_d = count, nrm, d

    if best_normal is None or best_count < min_inlier_ratio * n:
        raise NoGroundFoundError(
            f"best hypothesis has {best_count}/{n} inliers, below the gate"
        )

    inl = np.abs(band @ best_normal + best_d) <= inlier_thresh
    sel = band[inl]
    centroid = sel.mean(axis=0)
    _, vecs = np.linalg.eigh(np.cov((sel - centroid).T))
    normal = vecs[:, 0]
    plane = PlaneModel.canonical(normal, -float(normal @ centroid))
    tilt = math.degrees(math.acos(max(-1.0, min(1.0, plane.normal[2]))))
    if tilt > max_tilt_deg:
        raise NoGroundFoundError(f"ground candidate tilted {tilt:.1f} deg")

    dist = plane.signed_distance(band)
    final_mask = np.abs(dist) <= inlier_thresh
    rms = float(np.sqrt(np.mean(dist[final_mask] ** 2)))
    return GroundPlane(
        plane=plane,
        inliers=int(final_mask.sum()),
        rms=rms,
        inlier_indices=band_idx[final_mask],
    )


def flattest_keyframe(poses: list[RigidTransform]) -> int:
    """Index of the pose with the smallest combined pitch and roll."""
    best, best_tilt = 0, float("inf")
    for i, p in enumerate(poses):
        r = p.rotation
        pitch = abs(math.asin(max(-1.0, min(1.0, -r[2, 0]))))
        roll = abs(math.atan2(r[2, 1], r[2, 2]))
        if pitch + roll < best_tilt:
            best, best_tilt = i, pitch + roll
    return best


def ground_align(
    rig: Rig,
    clouds_in_gins: dict,
    inlier_thresh: float = 0.05,
    seed: int = 0,
) -> tuple[dict, dict]:
    """Shift each non-base extrinsic along z so every sensor's detected
    ground plane coincides with the base sensor's in the GINS frame.

    ``clouds_in_gins[sensor_id]`` is one scan per sensor already expressed
    in the GINS frame through the current extrinsic estimate.  Returns the
    compensated extrinsics plus the fitted planes.
    """
    planes = {
        sid: fit_ground_plane(pts, rig.height, inlier_thresh=inlier_thresh, seed=seed)
        for sid, pts in clouds_in_gins.items()
    }
    base_d = planes[rig.base_id].plane.intercept
    out = dict(rig.extrinsics)
    for sid, gp in planes.items():
        if sid == rig.base_id:
            continue
        delta_h = gp.plane.intercept - base_d
        out[sid] = RigidTransform.translation(0.0, 0.0, delta_h) @ out[sid]
    return out, planes
