import numpy as np
import pytest

from keylift.camera import (
    CAMERA_FRAME,
    ROBOT_FRAME,
    CameraIntrinsics,
    DegenerateProjectionError,
    Keypoints2D,
    Keypoints3D,
    NormalizedKeypoints2D,
    Pose,
    from_nccs,
    intrinsics_from_fov,
    project,
    to_nccs,
    transform_to_camera,
)


def random_pose(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose(q, rng.uniform(-1, 1, 3))


class TestIntrinsicsFromFov:
    def test_fov_90(self):
        intr = intrinsics_from_fov(90.0, 640, 480)
        assert intr.fx == pytest.approx(320.0)
        assert intr.fy == intr.fx
        assert (intr.cx, intr.cy) == (320.0, 240.0)

    def test_xbox_kinect_fov(self):
        intr = intrinsics_from_fov(62.73, 640, 480)
        assert intr.fx == pytest.approx(320.0 / np.tan(np.deg2rad(31.365)))

    def test_azure_kinect_fov(self):
        intr = intrinsics_from_fov(93.01, 640, 480)
        assert intr.fx == pytest.approx(320.0 / np.tan(np.deg2rad(46.505)))

    @pytest.mark.parametrize("fov", [0.0, -10.0, 180.0, 250.0])
    def test_out_of_range_fov(self, fov):
        with pytest.raises(ValueError):
            intrinsics_from_fov(fov, 640, 480)

    def test_bad_principal_point(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=300, fy=300, cx=-1, cy=240, width=640, height=480)


class TestTransform:
    def test_identity(self):
        pts = Keypoints3D(np.arange(12.0).reshape(4, 3), ROBOT_FRAME)
        out = transform_to_camera(Pose(np.eye(3), np.zeros(3)), pts)
        np.testing.assert_array_equal(out.points, pts.points)
        assert out.frame == CAMERA_FRAME

    def test_pure_translation(self):
        pts = Keypoints3D(np.zeros((2, 3)), ROBOT_FRAME)
        out = transform_to_camera(Pose(np.eye(3), np.array([0.0, 0.0, 1.0])), pts)
        np.testing.assert_allclose(out.points[:, 2], 1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            pose = random_pose(rng)
            pts = rng.uniform(-2, 2, (6, 3))
            there = pose.apply(pts)
            back = pose.inverse().apply(there)
            np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_wrong_frame_tag(self):
        pts = Keypoints3D(np.zeros((4, 3)), CAMERA_FRAME)
        with pytest.raises(ValueError, match="robot-frame"):
            transform_to_camera(Pose(np.eye(3), np.zeros(3)), pts)

    def test_rotation_validated(self):
        with pytest.raises(ValueError, match="SO"):
            Pose(np.eye(3) * 2.0, np.zeros(3))


class TestProject:
    def test_optical_axis(self):
        intr = intrinsics_from_fov(70.0, 640, 480)
        c = project(intr, Keypoints3D(np.array([[0.0, 0.0, 1.0]]), CAMERA_FRAME))
        np.testing.assert_allclose(c.points[0], [intr.cx, intr.cy])
        assert c.visibility[0]

    def test_formula(self):
        intr = CameraIntrinsics(500, 500, 320, 240, 640, 480)
        c = project(intr, Keypoints3D(np.array([[0.2, 0.2, 1.0]]), CAMERA_FRAME))
        np.testing.assert_allclose(c.points[0], [420.0, 340.0])

    def test_behind_camera_names_index(self):
        intr = intrinsics_from_fov(70.0, 640, 480)
        pts = Keypoints3D(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -0.1]]), CAMERA_FRAME)
        with pytest.raises(DegenerateProjectionError, match="keypoint 1"):
            project(intr, pts)

    def test_out_of_image_flagged_invisible(self):
        intr = intrinsics_from_fov(70.0, 640, 480)
        pts = Keypoints3D(np.array([[0.0, 0.0, 1.0], [5.0, 0.0, 1.0]]), CAMERA_FRAME)
        c = project(intr, pts)
        assert c.visibility.tolist() == [True, False]


class TestNccs:
    def test_principal_point_maps_to_origin(self):
        intr = CameraIntrinsics(500, 500, 320, 240, 640, 480)
        nc = to_nccs(intr, Keypoints2D(np.array([[320.0, 240.0]]), np.array([True])))
        np.testing.assert_array_equal(nc.points[0], [0.0, 0.0])

    def test_formula_matches_ray(self):
        intr = CameraIntrinsics(500, 500, 320, 240, 640, 480)
        nc = to_nccs(intr, Keypoints2D(np.array([[420.0, 340.0]]), np.array([True])))
        np.testing.assert_allclose(nc.points[0], [0.2, 0.2], atol=1e-12)

    def test_equals_x_over_z(self):
        rng = np.random.default_rng(9)
        intr = intrinsics_from_fov(80.0, 640, 480)
        pts = np.column_stack([rng.uniform(-0.5, 0.5, 50), rng.uniform(-0.4, 0.4, 50), rng.uniform(0.8, 3, 50)])
        nc = to_nccs(intr, project(intr, Keypoints3D(pts, CAMERA_FRAME)))
        np.testing.assert_allclose(nc.points, pts[:, :2] / pts[:, 2:3], atol=1e-12)

    def test_intrinsics_invariance(self):
        # core canonicalization claim over random scenes and intrinsic pairs
        rng = np.random.default_rng(21)
        for _ in range(10_000):
            fov1, fov2 = rng.uniform(50, 100, 2)
            intr1 = intrinsics_from_fov(fov1, 640, 480)
            intr2 = intrinsics_from_fov(fov2, 640, 480)
            pts = np.column_stack(
                [rng.uniform(-0.3, 0.3, 4), rng.uniform(-0.25, 0.25, 4), rng.uniform(1.0, 3.0, 4)]
            )
            x = Keypoints3D(pts, CAMERA_FRAME)
            n1 = to_nccs(intr1, project(intr1, x))
            n2 = to_nccs(intr2, project(intr2, x))
            assert np.max(np.abs(n1.points - n2.points)) < 1e-10

    def test_projection_consistency(self):
        intr = intrinsics_from_fov(65.0, 640, 480)
        pts = np.array([[0.1, -0.2, 1.7], [-0.3, 0.05, 2.4]])
        nc = to_nccs(intr, project(intr, Keypoints3D(pts, CAMERA_FRAME)))
        np.testing.assert_allclose(nc.points * pts[:, 2:3], pts[:, :2], atol=1e-12)

    def test_affine_inverse(self):
        rng = np.random.default_rng(33)
        intr = CameraIntrinsics(433.7, 501.2, 317.0, 198.5, 640, 480)
        pixels = Keypoints2D(
            np.column_stack([rng.uniform(0, 640, 100), rng.uniform(0, 480, 100)]),
            np.ones(100, dtype=bool),
        )
        back = from_nccs(intr, to_nccs(intr, pixels))
        np.testing.assert_allclose(back.points, pixels.points, atol=1e-10)

    def test_visibility_passes_through(self):
        intr = intrinsics_from_fov(70.0, 640, 480)
        vis = np.array([True, False, True])
        nc = to_nccs(intr, Keypoints2D(np.zeros((3, 2)), vis))
        np.testing.assert_array_equal(nc.visibility, vis)
        assert isinstance(nc, NormalizedKeypoints2D)
