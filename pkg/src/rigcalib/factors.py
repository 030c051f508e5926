"""Residual factors: point matching with propagated covariances, the
installation-height observation, motion consistency, and pose priors.

Transform chains are lists of links, each either ``("const", T)`` or
``("var", key)``.  A matching residual is

    d = chain_a(p_a) - chain_b(p_b)

with combined covariance R_a C_a R_a^T + R_b C_b R_b^T built from the
rotation parts of the full chains.  For a variable X inside a chain
``Pre * X * Post`` the right-perturbation Jacobian of the transformed point
is ``R_pre_x [-skew(q) | I]`` with ``q = Post(p)`` and ``R_pre_x`` the
rotation of the prefix including X, in [w, v] twist ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import build_kdtree, nearest_neighbors
from .se3 import (
    RigidTransform,
    adjoint,
    exp_map,
    log_map,
    se3_left_jacobian_inv,
    se3_right_jacobian_inv,
)
from .solver import RobustKernel

ConstLink = tuple  # ("const", RigidTransform) | ("var", key)


def _batch_skew(pts: np.ndarray) -> np.ndarray:
    n = len(pts)
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -pts[:, 2]
    out[:, 0, 2] = pts[:, 1]
    out[:, 1, 0] = pts[:, 2]
    out[:, 1, 2] = -pts[:, 0]
    out[:, 2, 0] = -pts[:, 1]
    out[:, 2, 1] = pts[:, 0]
    return out


def _resolve(link, values) -> RigidTransform:
    tag, payload = link
    return values[payload] if tag == "var" else payload


def _compose_chain(chain, values) -> RigidTransform:
    t = _resolve(chain[0], values)
    for link in chain[1:]:
        t = t @ _resolve(link, values)
    return t


@dataclass(frozen=True)
class Correspondence:
    frame_a: tuple  # (sensor_id, timestamp, point index)
    frame_b: tuple
    gate_dist: float


def gated_matches(
    points_a: np.ndarray,
    points_b: np.ndarray,
    gate: float,
    max_pairs: int = 0,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (ia, ib): for each point of a, its gated nearest neighbor
    in b.  When over budget, subsampled deterministically by index stride."""
    if len(points_a) == 0 or len(points_b) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    tree = build_kdtree(points_b)
    idx, _ = nearest_neighbors(tree, points_a, gate, workers=workers)
    ia = np.nonzero(idx >= 0)[0]
    ib = idx[ia]
    if max_pairs and len(ia) > max_pairs:
        stride = -(-len(ia) // max_pairs)  # ceil
        ia, ib = ia[::stride], ib[::stride]
    return ia, ib


def build_correspondences(
    cloud_a_world: np.ndarray,
    cloud_b_world: np.ndarray,
    gate: float,
    frame_a=("a", 0.0),
    frame_b=("b", 0.0),
) -> list[Correspondence]:
    """Gated nearest-neighbor pairing between two world-frame clouds."""
    ia, ib = gated_matches(cloud_a_world, cloud_b_world, gate)
    return [
        Correspondence(frame_a + (int(i),), frame_b + (int(j),), gate)
        for i, j in zip(ia, ib)
    ]


class MatchFactor:
    """A batch of point correspondences sharing one pair of transform chains."""

    def __init__(
        self,
        chain_a,
        chain_b,
        pts_a: np.ndarray,
        pts_b: np.ndarray,
        cov_a: np.ndarray,
        cov_b: np.ndarray,
        robust: RobustKernel | None = None,
    ):
        self.chain_a = list(chain_a)
        self.chain_b = list(chain_b)
        self.pts_a = np.asarray(pts_a, dtype=float).reshape(-1, 3)
        self.pts_b = np.asarray(pts_b, dtype=float).reshape(-1, 3)
        if len(self.pts_a) != len(self.pts_b):
            raise ValueError("pts_a and pts_b must pair up")
        self.cov_a = np.asarray(cov_a, dtype=float).reshape(-1, 3, 3)
        self.cov_b = np.asarray(cov_b, dtype=float).reshape(-1, 3, 3)
        self.robust = robust
        keys = []
        for tag, payload in self.chain_a + self.chain_b:
            if tag == "var" and payload not in keys:
                keys.append(payload)
        self.keys = tuple(keys)

    def __len__(self) -> int:
        return len(self.pts_a)

    def _terms(self, values):
        ta = _compose_chain(self.chain_a, values)
        tb = _compose_chain(self.chain_b, values)
        wa = ta.apply(self.pts_a)
        wb = tb.apply(self.pts_b)
        d = wa - wb
        ra, rb = ta.rotation, tb.rotation
        sigma = np.einsum("ij,njk,lk->nil", ra, self.cov_a, ra) + np.einsum(
            "ij,njk,lk->nil", rb, self.cov_b, rb
        )
        return d, sigma

    def cost_terms(self, values):
        return self._terms(values)

    def residual_raw(self, values):
        return self._terms(values)[0]

    def linearize(self, values):
        d, sigma = self._terms(values)
        jacs: dict = {}
        for chain, pts, sign in (
            (self.chain_a, self.pts_a, 1.0),
            (self.chain_b, self.pts_b, -1.0),
        ):
            for i, (tag, payload) in enumerate(chain):
                if tag != "var":
                    continue
                pre = _compose_chain(chain[: i + 1], values)
                q = pts
                for link in reversed(chain[i + 1 :]):
                    q = _resolve(link, values).apply(q)
                r_pre = pre.rotation
                n = len(pts)
                j = np.empty((n, 3, 6))
                j[:, :, :3] = -sign * np.einsum("ij,njk->nik", r_pre, _batch_skew(q))
                j[:, :, 3:] = sign * np.broadcast_to(r_pre, (n, 3, 3))
                if payload in jacs:
                    jacs[payload] = jacs[payload] + j
                else:
                    jacs[payload] = j
        return d, sigma, jacs


@dataclass(frozen=True)
class HeightObservation:
    """Measured unit installation height above the ground.

    The covariance is huge in five twist slots and small only in the
    z-translation slot, so the observation constrains just the vertical
    offset of the ground-frame extrinsic.
    """

    height: float
    c_big: float = 1e8
    c_small: float = 1e-3

    def covariance(self) -> np.ndarray:
        return np.diag([self.c_big] * 5 + [self.c_small])

    def measurement(self) -> RigidTransform:
        return exp_map([0.0, 0.0, 0.0, 0.0, 0.0, self.height])


def height_residual(extrinsic_gnd_from_gins: RigidTransform, obs: HeightObservation):
    """Raw 6-vector residual log(y * T^-1), T the ground<-GINS extrinsic."""
    return log_map(obs.measurement() @ extrinsic_gnd_from_gins.inverse())


class HeightFactor:
    """Constrains the GINS<-ground extrinsic block via the measured height.

    The graph stores the gins-from-ground transform Y; the residual is
    log(y * (Y^-1)^-1) = log(y * Y), so the Jacobian with respect to a right
    perturbation of Y is the inverse right Jacobian at the residual.
    """

    def __init__(self, key, obs: HeightObservation):
        self.keys = (key,)
        self.obs = obs
        self.robust = None
        self._sigma = obs.covariance()[None, :, :]

    def _residual(self, values):
        return log_map(self.obs.measurement() @ values[self.keys[0]])

    def cost_terms(self, values):
        return self._residual(values)[None, :], self._sigma

    def residual_raw(self, values):
        return self._residual(values)[None, :]

    def linearize(self, values):
        r = self._residual(values)
        jac = se3_right_jacobian_inv(r)[None, :, :]
        return r[None, :], self._sigma, {self.keys[0]: jac}


class MotionFactor:
    """Ties a pair of GINS poses and the matching pair of leveled base
    poses through the gins-from-ground extrinsic.

    residual = log(Y^-1 * Gj^-1 * Gi * Y * Pi^-1 * Pj) with Y the
    gins-from-ground block, G the GINS poses and P the leveled base poses;
    it vanishes exactly when P_t = G_t * Y for both times.
    """

    def __init__(self, key_ext, key_gi, key_gj, key_pi, key_pj, sigma: np.ndarray):
        self.keys = (key_ext, key_gi, key_gj, key_pi, key_pj)
        self.robust = None
        self._sigma = np.asarray(sigma, dtype=float).reshape(1, 6, 6)

    def _terms(self, values):
        y = values[self.keys[0]]
        gi = values[self.keys[1]]
        gj = values[self.keys[2]]
        pi = values[self.keys[3]]
        pj = values[self.keys[4]]
        a = gj.inverse() @ gi
        b = pi.inverse() @ pj
        k = y.inverse() @ a @ y
        n = k @ b
        return y, a, b, k, log_map(n)

    def cost_terms(self, values):
        return self._terms(values)[4][None, :], self._sigma

    def residual_raw(self, values):
        return self._terms(values)[4][None, :]

    def linearize(self, values):
        y, a, b, k, r = self._terms(values)
        jl_inv = se3_left_jacobian_inv(r)
        jr_inv = se3_right_jacobian_inv(r)
        ad_binv = adjoint(b.inverse())
        ad_yinv = adjoint(y.inverse())
        jacs = {
            self.keys[0]: (-jl_inv + jr_inv @ ad_binv)[None, :, :],
            self.keys[1]: (jr_inv @ ad_binv @ ad_yinv)[None, :, :],
            self.keys[2]: (-jl_inv @ ad_yinv)[None, :, :],
            self.keys[3]: (-jl_inv @ adjoint(k))[None, :, :],
            self.keys[4]: jr_inv[None, :, :],
        }
        return r[None, :], self._sigma, jacs


class PriorFactor:
    """Quadratic prior pulling a block toward a measured transform."""

    def __init__(self, key, measurement: RigidTransform, sigma_diag):
        self.keys = (key,)
        self.measurement = measurement
        self.robust = None
        self._meas_inv = measurement.inverse()
        self._sigma = np.diag(np.asarray(sigma_diag, dtype=float))[None, :, :]

    def _residual(self, values):
        return log_map(self._meas_inv @ values[self.keys[0]])

    def cost_terms(self, values):
        return self._residual(values)[None, :], self._sigma

    def residual_raw(self, values):
        return self._residual(values)[None, :]

    def linearize(self, values):
        r = self._residual(values)
        return r[None, :], self._sigma, {self.keys[0]: se3_right_jacobian_inv(r)[None, :, :]}


def motion_sigma(rot_sigma_deg: float = 0.1, trans_sigma_m: float = 0.02) -> np.ndarray:
    s_rot = np.radians(rot_sigma_deg) ** 2
    s_tr = trans_sigma_m**2
    return np.diag([s_rot] * 3 + [s_tr] * 3)
