"""Point clouds: representation, PCD I/O, neighbor search, covariance
estimation, keyframe selection, downsampling, and motion compensation.

Supported PCD subset: VERSION .7, FIELDS ``x y z`` plus an optional
``time`` field (seconds relative to the scan timestamp), TYPE F, SIZE 4,
DATA ascii or little-endian binary.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptyTrajectoryError,
    MissingPerPointTimeError,
    PcdIoError,
    PcdParseError,
    TooFewPointsError,
)
from .se3 import RigidTransform, log_map

COVARIANCE_EPSILON = 1e-3  # smallest eigenvalue after plane-aligned regularization
DEFAULT_COV_NEIGHBORS = 20


@dataclass
class PointCloud:
    """Timestamped scan; points in the sensor frame, float64 (N, 3)."""

    points: np.ndarray
    timestamp: float = 0.0
    per_point_time: np.ndarray | None = None
    sensor_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.per_point_time is not None:
            self.per_point_time = np.asarray(self.per_point_time, dtype=float).reshape(-1)
            if len(self.per_point_time) != len(self.points):
                raise ValueError("per_point_time length must match points")
            if np.any(np.diff(self.per_point_time) < 0.0):
                raise ValueError("per_point_time must be non-decreasing")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class KeyframeIndex:
    """Greedy keyframe selection result."""

    selected: list  # (sensor_id, timestamp) pairs
    dist_thresh: float
    angle_thresh_deg: float

    def timestamps(self, sensor_id: str) -> list[float]:
        return [t for sid, t in self.selected if sid == sensor_id]


# ---------------------------------------------------------------------------
# PCD I/O


def write_pcd(path, cloud: PointCloud, binary: bool = True) -> None:
    has_time = cloud.per_point_time is not None
    fields = ["x", "y", "z"] + (["time"] if has_time else [])
    n = len(cloud)
    header = (
        "# .PCD v.7 - Point Cloud Data file format\n"
        "VERSION .7\n"
        f"FIELDS {' '.join(fields)}\n"
        f"SIZE {' '.join(['4'] * len(fields))}\n"
        f"TYPE {' '.join(['F'] * len(fields))}\n"
        f"COUNT {' '.join(['1'] * len(fields))}\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    )
    data = cloud.points.astype("<f4")
    if has_time:
        data = np.hstack([data, cloud.per_point_time.astype("<f4").reshape(-1, 1)])
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if binary:
                fh.write(data.tobytes())
            else:
                for row in data:
                    fh.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))
    except OSError as exc:
        raise PcdIoError(f"cannot write {path}: {exc}") from exc


def read_pcd(path) -> PointCloud:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise PcdIoError(f"cannot read {path}: {exc}") from exc

    header: dict[str, list[str]] = {}
    offset = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise PcdParseError("unterminated header")
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        header[key.upper()] = rest
        if key.upper() == "DATA":
            break

    for required in ("FIELDS", "POINTS", "DATA"):
        if required not in header:
            raise PcdParseError(f"missing {required} in header")
    fields = header["FIELDS"]
    if fields not in (["x", "y", "z"], ["x", "y", "z", "time"]):
        raise PcdParseError(f"unsupported FIELDS {' '.join(fields)}; need x y z [time]")
    nf = len(fields)
    if header.get("TYPE", ["F"] * nf) != ["F"] * nf:
        raise PcdParseError("only TYPE F supported")
    if header.get("SIZE", ["4"] * nf) != ["4"] * nf:
        raise PcdParseError("only SIZE 4 supported")
    if header.get("COUNT", ["1"] * nf) != ["1"] * nf:
        raise PcdParseError("only COUNT 1 supported")
    try:
        n = int(header["POINTS"][0])
    except (ValueError, IndexError) as exc:
        raise PcdParseError("bad POINTS value") from exc

    mode = header["DATA"][0]
    if mode == "binary":
        need = 4 * nf * n
        payload = raw[offset : offset + need]
        if len(payload) != need:
            raise PcdParseError(f"binary payload truncated: {len(payload)} < {need}")
        data = np.frombuffer(payload, dtype="<f4").reshape(n, nf).astype(float)
    elif mode == "ascii":
        text = raw[offset:].decode("ascii", errors="replace")
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if len(rows) != n:
            raise PcdParseError(f"expected {n} ascii rows, found {len(rows)}")
        try:
            data = np.array([[float(v) for v in row] for row in rows])
        except ValueError as exc:
            raise PcdParseError("non-numeric ascii payload") from exc
        if data.size and data.shape[1] != nf:
            raise PcdParseError("ascii field count mismatch")
        data = data.reshape(n, nf)
    else:
        raise PcdParseError(f"unsupported DATA mode {mode!r}")

    times = data[:, 3] if nf == 4 else None
    return PointCloud(points=data[:, :3], per_point_time=times)


# ---------------------------------------------------------------------------
# Neighbor search


def build_kdtree(points: np.ndarray) -> cKDTree:
    return cKDTree(np.asarray(points, dtype=float))


def nearest_neighbor(tree: cKDTree, query: np.ndarray, max_dist: float):
    """Index and distance of the nearest point within max_dist, else None."""
    dist, idx = tree.query(np.asarray(query, dtype=float), k=1)
    if dist > max_dist:
        return None
    return int(idx), float(dist)


def nearest_neighbors(
    tree: cKDTree, queries: np.ndarray, max_dist: float, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Batch gated NN: returns (indices with -1 for no match, distances)."""
    dist, idx = tree.query(
        np.asarray(queries, dtype=float), k=1, distance_upper_bound=max_dist, workers=workers
    )
    miss = ~np.isfinite(dist)
    idx = np.where(miss, -1, idx).astype(np.int64)
    dist = np.where(miss, np.inf, dist)
    return idx, dist


# ---------------------------------------------------------------------------
# Covariance estimation


def sample_covariances(cloud: PointCloud, k: int = DEFAULT_COV_NEIGHBORS, workers: int = 1):
    """Unregularized sample covariance of each point's k nearest neighbors
    (the point itself excluded), np.cov semantics (1/(k-1))."""
    pts = cloud.points
    if len(pts) < k + 1:
        raise TooFewPointsError(f"need at least {k + 1} points, have {len(pts)}")
    tree = build_kdtree(pts)
    _, idx = tree.query(pts, k=k + 1, workers=workers)
    neigh = pts[idx[:, 1:]]  # (N, k, 3), self dropped
    mean = neigh.mean(axis=1, keepdims=True)
    centered = neigh - mean
    return np.einsum("nki,nkj->nij", centered, centered) / (k - 1)


def regularize_covariances(cov: np.ndarray, epsilon: float = COVARIANCE_EPSILON):
    """Replace eigenvalues with (1, 1, epsilon), keeping eigenvectors.

    Equivalent to I - (1 - eps) * u u^T with u the smallest-eigenvalue
    eigenvector, which keeps the Mahalanobis metric bounded on degenerate
    neighborhoods while preserving the plane-to-plane behavior.
    """
    _, vecs = np.linalg.eigh(cov)
    u = vecs[..., :, 0]  # eigenvector of the smallest eigenvalue
    outer = np.einsum("ni,nj->nij", u, u)
    return np.eye(3)[None, :, :] - (1.0 - epsilon) * outer


def estimate_covariances(
    cloud: PointCloud, k: int = DEFAULT_COV_NEIGHBORS, workers: int = 1
) -> np.ndarray:
    """Regularized per-point covariances, (N, 3, 3)."""
    return regularize_covariances(sample_covariances(cloud, k, workers=workers))


# ---------------------------------------------------------------------------
# Keyframe selection


def select_keyframes(
    trajectory,
    dist_thresh: float = 2.0,
    angle_thresh_deg: float = 30.0,
    sensor_ids=("0",),
) -> KeyframeIndex:
    """Greedy rule: the first pose is a keyframe; a later pose becomes one
    when its translation from the last keyframe reaches dist_thresh or the
    relative rotation reaches angle_thresh_deg."""
    traj = list(trajectory)
    if not traj:
        raise EmptyTrajectoryError("cannot select keyframes from an empty trajectory")
    angle_thresh = math.radians(angle_thresh_deg)
    sel_times = [traj[0][0]]
    last = traj[0][1]
    for t, pose in traj[1:]:
        rel = last.inverse() @ pose
        if np.linalg.norm(rel.t) >= dist_thresh or rel.rotation_angle() >= angle_thresh:
            sel_times.append(t)
            last = pose
    selected = [(sid, t) for sid in sensor_ids for t in sel_times]
    return KeyframeIndex(selected=selected, dist_thresh=dist_thresh, angle_thresh_deg=angle_thresh_deg)


# ---------------------------------------------------------------------------
# Downsampling


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One centroid per occupied voxel of side ``leaf``; output sorted by
    voxel key so the result is deterministic."""
    if leaf <= 0.0:
        raise ValueError("leaf size must be positive")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(pts.copy(), cloud.timestamp, None, cloud.sensor_id)
    keys = np.floor(pts / leaf).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    pts_sorted = pts[order]
    boundaries = np.any(np.diff(keys_sorted, axis=0) != 0, axis=1)
    group_id = np.concatenate([[0], np.cumsum(boundaries)])
    n_groups = group_id[-1] + 1
    sums = np.zeros((n_groups, 3))
    np.add.at(sums, group_id, pts_sorted)
    counts = np.bincount(group_id, minlength=n_groups).astype(float)
    centroids = sums / counts[:, None]
    times = None
    if cloud.per_point_time is not None:
        tsum = np.zeros(n_groups)
        np.add.at(tsum, group_id, cloud.per_point_time[order])
        times = np.sort(tsum / counts)
        centroids = centroids[np.argsort(tsum / counts, kind="stable")]
    return PointCloud(centroids, cloud.timestamp, times, cloud.sensor_id)


# ---------------------------------------------------------------------------
# Motion compensation


def motion_compensate(
    cloud: PointCloud, pose_start: RigidTransform, pose_end: RigidTransform
) -> PointCloud:
    """Re-express each point in the scan-end frame using the pose
    interpolated at its per-point time.

    Per-point times are taken relative to the scan timestamp, spanning the
    scan duration; the earliest time maps to pose_start and the latest to
    pose_end.  A static scene scanned during motion becomes rigid-consistent.
    """
    if cloud.per_point_time is None:
        raise MissingPerPointTimeError("cloud has no per-point timestamps")
    times = cloud.per_point_time
    t0, t1 = float(times.min()), float(times.max())
    if t1 - t0 < 1e-12:
        return PointCloud(cloud.points.copy(), cloud.timestamp, times.copy(), cloud.sensor_id)
    xi = log_map(pose_start.inverse() @ pose_end)
    s = (times - t0) / (t1 - t0)
    rot_s, trans_s = _exp_scaled_batch(xi, s)
    # out_i = (end^-1 start) exp(s_i xi) p_i
    head = pose_end.inverse() @ pose_start
    local = np.einsum("nij,nj->ni", rot_s, cloud.points) + trans_s
    out = local @ head.rotation.T + head.t
    return PointCloud(out, cloud.timestamp, times.copy(), cloud.sensor_id)


def _exp_scaled_batch(xi: np.ndarray, s: np.ndarray):
    """exp(s_i * xi) for an array of scales: rotations (N,3,3), translations (N,3)."""
    omega, v = xi[:3], xi[3:]
    theta0 = float(np.linalg.norm(omega))
    n = len(s)
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    if theta0 < 1e-12:
        return eye.copy(), np.outer(s, v)
    k = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    k2 = k @ k
    ang = s * theta0
    small = ang < 1e-4
    a2 = ang * ang
    with np.errstate(divide="ignore", invalid="ignore"):
        coef_a = np.where(small, 1.0 - a2 / 6.0 + a2 * a2 / 120.0, np.sin(ang) / ang)
        coef_b = np.where(
            small, 0.5 - a2 / 24.0 + a2 * a2 / 720.0, 2.0 * np.sin(ang / 2.0) ** 2 / a2
        )
        coef_c = np.where(
            small,
            1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0,
            (ang - np.sin(ang)) / (a2 * ang),
        )
    # With unnormalized k: exp(s xi) rotation = I + A s k + B s^2 k^2,
    # translation = (I + B s k + C s^2 k^2) (s v).
    sa = (coef_a * s)[:, None, None]
    sb = (coef_b * s * s)[:, None, None]
    sc = (coef_c * s * s)[:, None, None]
    rot = eye + sa * k + sb * k2
    vmat = eye + (coef_b * s)[:, None, None] * k + sc * k2
    trans = np.einsum("nij,nj->ni", vmat, np.outer(s, v))
    return rot, trans


def motion_compensate_or_warn(
    cloud: PointCloud, pose_start: RigidTransform, pose_end: RigidTransform
) -> PointCloud:
    """Compensate when per-point times are present; otherwise warn and pass through."""
    if cloud.per_point_time is None:
        warnings.warn(
            f"scan {cloud.sensor_id}@{cloud.timestamp}: no per-point times, "
            "motion compensation skipped",
            stacklevel=2,
        )
        return cloud
    return motion_compensate(cloud, pose_start, pose_end)
