import math

import numpy as np
import pytest

from rigcalib import calib_lg, simgen
from rigcalib.calib_lg import (
    Rig,
    SensorInfo,
    calibrate_lidar_gins,
    fit_ground_plane,
    flattest_keyframe,
    ground_align,
    initialize_rotation,
    map_consistency,
    proximate_pairs,
)
from rigcalib.errors import InsufficientMotionError, NoGroundFoundError
from rigcalib.se3 import RigidTransform, Trajectory, extrinsic_error

from simutil import make_bundle, shared_point_clouds


def rotation_only_bundle(yaw_deg: float, seed: int = 7):
    """Single-sensor bundle whose true extrinsic is a pure rotation."""
    spin = simgen.LidarModel("spinning", 360.0, 16.0, 16, 50.0, 0.0, azimuth_steps=360)
    mount = simgen.SensorMount(
        "l0", spin, RigidTransform.from_rpy(0.0, 0.0, math.radians(yaw_deg)), base=True
    )
    return make_bundle(seed=seed, noise=False, duration=24.0, sensors=[mount], leaf=0.4)


class TestInitializeRotation:
    def test_identity_extrinsic_recovered(self):
        b = rotation_only_bundle(0.0)
        clouds = [b.clouds[("l0", t)] for t in b.kf_times]
        poses = [b.kf_gins_pose(t) for t in b.kf_times]
        est = initialize_rotation(clouds, poses)
        rot_err, _ = extrinsic_error(est, RigidTransform.identity())
        assert rot_err < 2.0

    def test_fifteen_degree_yaw_recovered(self):
        b = rotation_only_bundle(15.0, seed=8)
        clouds = [b.clouds[("l0", t)] for t in b.kf_times]
        poses = [b.kf_gins_pose(t) for t in b.kf_times]
        est = initialize_rotation(clouds, poses)
        rot_err, _ = extrinsic_error(est, b.gt_extrinsic("l0"))
        assert rot_err < 2.0

    def test_single_keyframe_insufficient(self):
        with pytest.raises(InsufficientMotionError):
            initialize_rotation([np.zeros((10, 3))], [RigidTransform.identity()])

    def test_no_yaw_span_insufficient(self):
        clouds = [np.random.default_rng(0).normal(size=(50, 3)) for _ in range(6)]
        poses = [RigidTransform.translation(i * 2.0, 0, 0) for i in range(6)]
        with pytest.raises(InsufficientMotionError):
            initialize_rotation(clouds, poses)

    def test_true_rotation_beats_perturbations(self):
        b = rotation_only_bundle(20.0, seed=9)
        frames = [b.clouds[("l0", t)] for t in b.kf_times][:8]
        poses = [b.kf_gins_pose(t) for t in b.kf_times][:8]
        truth = b.gt_extrinsic("l0")
        base = map_consistency(frames, poses, truth)
        rng = np.random.default_rng(1)
        for _ in range(10):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = math.radians(rng.uniform(5.0, 25.0))
            from rigcalib.se3 import exp_map

            pert = truth @ exp_map(np.concatenate([axis * ang, np.zeros(3)]))
            assert map_consistency(frames, poses, pert) >= base


class TestProximatePairs:
    def test_all_within(self):
        pos = np.zeros((4, 3))
        assert proximate_pairs(pos, 1.0) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

    def test_pruning(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [30.0, 0, 0]])
        assert proximate_pairs(pos, 5.0) == [(0, 1)]


class TestCalibrateLidarGins:
    def test_fixpoint_at_truth(self, sim_small_zero):
        b = sim_small_zero
        clouds, covs, _ = shared_point_clouds(b, "l0")
        truth = b.gt_extrinsic("l0")
        rig = Rig(
            sensors=[SensorInfo("l0", True)],
            gins_trajectory=b.gt_trajectory,
            extrinsics={"l0": truth},
            height=b.config.height,
        )
        result, reports = calibrate_lidar_gins(
            rig, clouds, covs, {"l0": truth}, sensor_ids=["l0"]
        )
        delta = truth.inverse() @ result["l0"]
        assert np.linalg.norm(delta.t) < 1e-8
        assert delta.rotation_angle() < 1e-8

    def test_recovers_inplane_perturbation(self, sim_small_zero):
        b = sim_small_zero
        clouds, covs, _ = shared_point_clouds(b, "l0")
        truth = b.gt_extrinsic("l0")
        init = (
            RigidTransform.from_rpy(0, 0, math.radians(5.0), t=(0.3, -0.2, 0.0)) @ truth
        )
        rig = Rig(
            sensors=[SensorInfo("l0", True)],
            gins_trajectory=b.gt_trajectory,
            extrinsics={"l0": init},
            height=b.config.height,
        )
        result, reports = calibrate_lidar_gins(
            rig, clouds, covs, {"l0": init}, sensor_ids=["l0"]
        )
        est = result["l0"]
        # world-frame error: xy and yaw must recover; z is the flat direction
        rel = est @ truth.inverse()
        assert np.linalg.norm(rel.t[:2]) < 1e-3
        assert math.degrees(rel.rotation_angle()) < 0.01
        assert abs(rel.t[2]) < 0.05  # held near the init by the weak prior

    def test_monotone_round_costs(self, sim_small_zero):
        b = sim_small_zero
        truth = b.gt_extrinsic("l0")
        init = RigidTransform.from_rpy(0, 0, math.radians(3.0), t=(0.2, 0.1, 0.0)) @ truth
        clouds = {k: v for k, v in b.clouds.items() if k[0] == "l0"}
        covs = {k: v for k, v in b.covs.items() if k[0] == "l0"}
        result, reports = calibrate_lidar_gins(
            b.rig, clouds, covs, {"l0": init}, sensor_ids=["l0"]
        )
        costs = reports["l0"].round_mean_costs
        assert len(costs) >= 1
        for a, c in zip(costs, costs[1:]):
            assert c <= 2.0 * a + 1e-12

    def test_noisy_recovery_planar_components(self, sim_small_noisy):
        b = sim_small_noisy
        truth = b.gt_extrinsic("l0")
        init = RigidTransform.from_rpy(0, 0, math.radians(3.0), t=(0.2, -0.1, 0.0)) @ truth
        clouds = {k: v for k, v in b.clouds.items() if k[0] == "l0"}
        covs = {k: v for k, v in b.covs.items() if k[0] == "l0"}
        result, _ = calibrate_lidar_gins(
            b.rig, clouds, covs, {"l0": init}, sensor_ids=["l0"]
        )
        rel = result["l0"] @ truth.inverse()
        assert np.linalg.norm(rel.t[:2]) < 0.05
        assert math.degrees(rel.rotation_angle()) < 0.2


class TestFitGroundPlane:
    def test_exact_plane_with_clutter(self):
        rng = np.random.default_rng(0)
        ground = np.column_stack(
            [rng.uniform(-10, 10, 800), rng.uniform(-10, 10, 800), np.full(800, -1.8)]
        )
        clutter = rng.uniform(-10, 10, size=(60, 3))
        pts = np.vstack([ground, clutter])
        gp = fit_ground_plane(pts, height=1.8)
        assert np.allclose(gp.plane.normal, [0, 0, 1], atol=1e-9)
        assert gp.plane.intercept == pytest.approx(1.8, abs=1e-6)
        assert gp.rms < 1e-9

    def test_noisy_plane_intercept_statistics(self):
        rng = np.random.default_rng(1)
        n = 4000
        sigma = 0.01
        pts = np.column_stack(
            [
                rng.uniform(-10, 10, n),
                rng.uniform(-10, 10, n),
                -1.8 + rng.normal(scale=sigma, size=n),
            ]
        )
        gp = fit_ground_plane(pts, height=1.8)
        assert abs(gp.plane.intercept - 1.8) < 3 * sigma / math.sqrt(gp.inliers) * 3
        assert gp.rms == pytest.approx(sigma, rel=0.2)

    def test_all_clutter_rejected(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-5, 5, size=(2000, 3)) * np.array([1, 1, 0.8]) - [0, 0, 1.8]
        with pytest.raises(NoGroundFoundError):
            fit_ground_plane(pts, height=1.8)

    def test_too_few_band_points(self):
        pts = np.random.default_rng(3).uniform(5, 10, size=(500, 3))  # all above band
        with pytest.raises(NoGroundFoundError):
            fit_ground_plane(pts, height=1.8)

    def test_tilt_gate(self):
        rng = np.random.default_rng(4)
        n = 1000
        # plane tilted 45 degrees crossing the band
        x = rng.uniform(-3, 3, n)
        y = rng.uniform(-3, 3, n)
        z = x - 1.8
        with pytest.raises(NoGroundFoundError):
            fit_ground_plane(np.column_stack([x, y, z]), height=1.8)


class TestGroundAlign:
    def _clouds_in_g(self, bundle, extrinsics):
        out = {}
        for sid in bundle.rig.sensor_ids():
            t = bundle.kf_times[flattest_keyframe(
                [bundle.kf_gins_pose(t) for t in bundle.kf_times]
            )]
            out[sid] = extrinsics[sid].apply(bundle.clouds[(sid, t)])
        return out

    def test_consistent_sensors_unchanged(self, sim_small_zero):
        b = sim_small_zero
        exts = {sid: b.gt_extrinsic(sid) for sid in b.rig.sensor_ids()}
        b.rig.extrinsics = dict(exts)
        aligned, planes = ground_align(b.rig, self._clouds_in_g(b, exts))
        base_rms = planes[b.rig.base_id].rms
        for sid in exts:
            delta = exts[sid].inverse() @ aligned[sid]
            assert np.linalg.norm(delta.t) < 2 * (planes[sid].rms + base_rms) + 1e-9

    def test_injected_offset_cancelled(self, sim_small_zero):
        b = sim_small_zero
        exts = {sid: b.gt_extrinsic(sid) for sid in b.rig.sensor_ids()}
        exts["l1"] = RigidTransform.translation(0, 0, 0.3) @ exts["l1"]
        b.rig.extrinsics = dict(exts)
        aligned, planes = ground_align(b.rig, self._clouds_in_g(b, exts))
        err = b.gt_extrinsic("l1").inverse() @ aligned["l1"]
        assert abs(err.t[2]) < 1e-3
        # the compensation is the (negated) injection
        comp = aligned["l1"].t[2] - exts["l1"].t[2]
        assert comp == pytest.approx(-0.3, abs=1e-3)

    def test_three_sensor_independent_offsets(self):
        solid = simgen.LidarModel("solid_state", 80.0, 18.0, 4000, 40.0, 0.0)
        mounts = [
            simgen.SensorMount(
                "l0",
                simgen.LidarModel("spinning", 360.0, 16.0, 16, 50.0, 0.0, 360),
                RigidTransform.from_rpy(0.02, 0.03, 0.4, t=(1.0, 0.2, 0.6)),
                base=True,
            ),
            simgen.SensorMount(
                "l1",
                solid,
                RigidTransform.from_rpy(0.0, math.radians(31.0), math.radians(175.0), t=(-1.5, 0, 0.9)),
            ),
            simgen.SensorMount(
                "l2",
                solid,
                RigidTransform.from_rpy(0.0, math.radians(33.0), math.radians(90.0), t=(0, 1.2, 0.8)),
            ),
        ]
        b = make_bundle(seed=10, noise=False, duration=24.0, sensors=mounts, leaf=0.25)
        injections = {"l0": 0.0, "l1": 0.25, "l2": -0.4}
        exts = {
            sid: RigidTransform.translation(0, 0, injections[sid]) @ b.gt_extrinsic(sid)
            for sid in b.rig.sensor_ids()
        }
        b.rig.extrinsics = dict(exts)
        aligned, _ = ground_align(b.rig, self._clouds_in_g(b, exts))
        for sid in ("l1", "l2"):
            err = b.gt_extrinsic(sid).inverse() @ aligned[sid]
            assert abs(err.t[2]) < 1e-3

    def test_idempotent(self, sim_small_zero):
        b = sim_small_zero
        exts = {sid: b.gt_extrinsic(sid) for sid in b.rig.sensor_ids()}
        exts["l1"] = RigidTransform.translation(0, 0, 0.15) @ exts["l1"]
        b.rig.extrinsics = dict(exts)
        aligned1, planes1 = ground_align(b.rig, self._clouds_in_g(b, exts))
        b.rig.extrinsics = dict(aligned1)
        aligned2, planes2 = ground_align(b.rig, self._clouds_in_g(b, aligned1))
        for sid in b.rig.sensor_ids():
            delta = aligned1[sid].inverse() @ aligned2[sid]
            tol = 2 * max(planes2[sid].rms, 1e-9) + 1e-9
            assert np.linalg.norm(delta.t) < tol

    def test_planes_coincide_after_alignment(self, sim_small_zero):
        b = sim_small_zero
        exts = {sid: b.gt_extrinsic(sid) for sid in b.rig.sensor_ids()}
        exts["l1"] = RigidTransform.translation(0, 0, 0.2) @ exts["l1"]
        b.rig.extrinsics = dict(exts)
        aligned, planes_before = ground_align(b.rig, self._clouds_in_g(b, exts))
        b.rig.extrinsics = dict(aligned)
        _, planes_after = ground_align(b.rig, self._clouds_in_g(b, aligned))
        d0 = planes_after[b.rig.base_id].plane.intercept
        for sid, gp in planes_after.items():
            assert abs(gp.plane.intercept - d0) < 2 * max(gp.rms, 1e-9) + 1e-9


class TestFlattestKeyframe:
    def test_picks_level_pose(self):
        poses = [
            RigidTransform.from_rpy(0.1, 0.05, 1.0),
            RigidTransform.from_rpy(0.001, -0.002, -2.0),
            RigidTransform.from_rpy(-0.2, 0.0, 0.3),
        ]
        assert flattest_keyframe(poses) == 1
