import numpy as np
import pytest

from keylift.camera import Keypoints2D, project, transform_to_camera
from keylift.config import DataConfig
from keylift.data import (
    DataRecord,
    DatasetFormatError,
    DetectionNoiseModel,
    derive_rng,
    generate_dataset,
    perturb_detections,
    read_dataset,
    sample_camera_pose,
    split_of_sequence,
    split_records,
    write_dataset,
)
from keylift.kinematics import default_chain, keypoints_robot_frame, load_chain


@pytest.fixture(scope="module")
def chain():
    return default_chain()


def small_cfg(**kw):
    base = dict(count=30, seed=7, fovs=[62.73, 93.01], width=640, height=480)
    base.update(kw)
    return DataConfig(**base)


class TestCameraPose:
    def test_unit_radius_zero_elevation(self):
        pose = sample_camera_pose(derive_rng(0, "pose"), (1.0, 1.0), (0.0, 0.0))
        origin_cam = pose.apply(np.zeros((1, 3)))[0]
        assert origin_cam[2] == pytest.approx(1.0)
        np.testing.assert_allclose(origin_cam[:2], 0.0, atol=1e-12)

    def test_seed_determinism(self):
        a = sample_camera_pose(derive_rng(3, "pose"), (1.5, 2.5), (0.1, 1.0))
        b = sample_camera_pose(derive_rng(3, "pose"), (1.5, 2.5), (0.1, 1.0))
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)

    def test_rotations_in_so3(self):
        rng = derive_rng(9, "pose")
        for _ in range(500):
            pose = sample_camera_pose(rng, (1.0, 3.0), (0.0, 1.3))
            np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(pose.rotation) > 0

    def test_points_in_front(self, chain):
        rng = derive_rng(11, "pose")
        pts = keypoints_robot_frame(chain, np.array([0.5, -1.0, 0.4]))
        for _ in range(100):
            pose = sample_camera_pose(rng, (1.5, 2.5), (0.15, 1.1), points=pts)
            assert np.all(pose.apply(pts)[:, 2] > 0)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            sample_camera_pose(derive_rng(0), (0.0, 1.0), (0.0, 0.5))

    def test_unreachable_condition(self):
        # antipodal far points: every camera on the shell has one behind it
        pts = np.array([[100.0, 0.0, 0.0], [-100.0, 0.0, 0.0]])
        with pytest.raises(RuntimeError, match="attempts"):
            sample_camera_pose(derive_rng(0), (1.0, 1.0), (0.0, 0.1), points=pts, max_retries=8)


class TestPerturb:
    def make_c(self, n=8):
        rng = derive_rng(1, "c")
        pts = np.column_stack([rng.uniform(0, 640, n), rng.uniform(0, 480, n)])
        return Keypoints2D(pts, np.ones(n, dtype=bool))

    def test_zero_noise_is_identity(self):
        c = self.make_c()
        out = perturb_detections(c, DetectionNoiseModel(0.0, 0.0, 0.0), 640, 480, derive_rng(0))
        np.testing.assert_array_equal(out.points, c.points)
        np.testing.assert_array_equal(out.visibility, c.visibility)

    def test_full_dropout(self):
        c = self.make_c()
        out = perturb_detections(c, DetectionNoiseModel(0.0, 1.0, 0.0), 640, 480, derive_rng(0))
        assert not out.visibility.any()

    def test_gaussian_std(self):
        n = 100_000
        c = Keypoints2D(np.full((n, 2), 100.0), np.ones(n, dtype=bool))
        out = perturb_detections(c, DetectionNoiseModel(2.0, 0.0, 0.0), 640, 480, derive_rng(5))
        resid = out.points - c.points
        # std of sample std ~ sigma/sqrt(2(n-1))
        tol = 3 * 2.0 / np.sqrt(2 * (n - 1))
        assert abs(resid[:, 0].std() - 2.0) < tol
        assert abs(resid[:, 1].std() - 2.0) < tol

    def test_outliers_land_in_image(self):
        n = 10_000
        c = Keypoints2D(np.full((n, 2), -50.0), np.ones(n, dtype=bool))
        out = perturb_detections(c, DetectionNoiseModel(0.0, 0.0, 1.0), 640, 480, derive_rng(2))
        assert np.all(out.points[:, 0] >= 0) and np.all(out.points[:, 0] <= 640)
        assert np.all(out.points[:, 1] >= 0) and np.all(out.points[:, 1] <= 480)
        assert out.visibility.all()

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            DetectionNoiseModel(1.0, 1.5, 0.0)


class TestGenerate:
    def test_single_record_invariants(self, chain):
        recs = list(generate_dataset(chain, small_cfg(count=1)))
        assert len(recs) == 1
        r = recs[0]
        x_cam = transform_to_camera(r.pose, r.x_rob)
        np.testing.assert_allclose(x_cam.points, r.x_cam.points, atol=1e-9)
        c = project(r.intrinsics, r.x_cam)
        np.testing.assert_allclose(c.points, r.c_clean.points, atol=1e-9)

    def test_byte_identical_under_seed(self, chain, tmp_path):
        cfg = small_cfg()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        write_dataset(generate_dataset(chain, cfg), p1, chain)
        write_dataset(generate_dataset(chain, cfg), p2, chain)
        assert p1.read_bytes() == p2.read_bytes()

    def test_sequences_drift_slowly(self, chain):
        cfg = small_cfg(count=30)
        recs = list(generate_dataset(chain, cfg))
        by_seq = {}
        for r in recs:
            by_seq.setdefault(r.sequence_id, []).append(r)
        for frames in by_seq.values():
            frames.sort(key=lambda r: r.frame_index)
            assert len(frames) == 3
            for a, b in zip(frames, frames[1:]):
                assert np.abs(b.angles - a.angles).max() <= cfg.max_angle_step + 1e-12
                assert a.intrinsics == b.intrinsics

    def test_fov_frequencies(self, chain):
        cfg = small_cfg(count=9999, fovs=[62.73, 70.21, 93.01], pixel_sigma=0.0)
        fovs = []
        seen = set()
        for r in generate_dataset(chain, cfg):
            if r.sequence_id not in seen:
                seen.add(r.sequence_id)
                fovs.append(r.intrinsics.fx)
        counts = np.unique(np.round(fovs, 6), return_counts=True)[1]
        n = len(fovs)
        sigma = np.sqrt(n * (1 / 3) * (2 / 3))
        assert counts.shape == (3,)
        assert np.all(np.abs(counts - n / 3) < 3 * sigma)

    def test_angle_coverage(self, chain):
        cfg = small_cfg(count=10_000)
        lo = np.full(chain.n_joints, np.inf)
        hi = np.full(chain.n_joints, -np.inf)
        for r in generate_dataset(chain, cfg):
            lo = np.minimum(lo, r.angles)
            hi = np.maximum(hi, r.angles)
        span = (hi - lo) / (chain.joint_limits[:, 1] - chain.joint_limits[:, 0])
        assert np.all(span >= 0.95)

    def test_count_not_divisible_by_sequence_length(self, chain):
        recs = list(generate_dataset(chain, small_cfg(count=8)))
        assert len(recs) == 8


class TestSerialization:
    def test_round_trip_bitwise(self, chain, tmp_path):
        recs = list(generate_dataset(chain, small_cfg()))
        path = tmp_path / "d.bin"
        write_dataset(recs, path, chain, extra={"note": "test"})
        back, header = read_dataset(path, expected_chain=chain)
        assert header["count"] == len(recs) == len(back)
        assert header["extra"] == {"note": "test"}
        for a, b in zip(recs, back):
            assert a.intrinsics == b.intrinsics
            np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
            np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
            np.testing.assert_array_equal(a.angles, b.angles)
            np.testing.assert_array_equal(a.x_rob.points, b.x_rob.points)
            np.testing.assert_array_equal(a.x_cam.points, b.x_cam.points)
            np.testing.assert_array_equal(a.c_clean.points, b.c_clean.points)
            np.testing.assert_array_equal(a.c_clean.visibility, b.c_clean.visibility)
            np.testing.assert_array_equal(a.c_noisy.points, b.c_noisy.points)
            np.testing.assert_array_equal(a.c_noisy.visibility, b.c_noisy.visibility)
            assert (a.sequence_id, a.frame_index) == (b.sequence_id, b.frame_index)

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"{broken\nstuff")
        with pytest.raises(DatasetFormatError, match="header"):
            read_dataset(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(DatasetFormatError, match="not a keylift"):
            read_dataset(path)

    def test_truncated_body(self, chain, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(generate_dataset(chain, small_cfg(count=3)), path, chain)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(DatasetFormatError, match="truncated"):
            read_dataset(path)

    def test_chain_hash_mismatch(self, chain, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(generate_dataset(chain, small_cfg(count=3)), path, chain)
        other = load_chain(
            """
format_version: 1
links:
  - rotation_axis: [0.0, 0.0, 1.0]
    translation_offset: [1.0, 0.0, 0.0]
joint_limits:
  - [-1.0, 1.0]
keypoints:
  - {link: 0, offset: [0.0, 0.0, 0.0]}
  - {link: 0, offset: [0.1, 0.0, 0.0]}
  - {link: 0, offset: [0.0, 0.1, 0.0]}
  - {link: 0, offset: [0.0, 0.0, 0.1]}
"""
        )
        with pytest.raises(DatasetFormatError, match="different chain"):
            read_dataset(path, expected_chain=other)


class TestSplits:
    def test_split_fractions(self):
        labels = [split_of_sequence(i) for i in range(20_000)]
        frac = {k: labels.count(k) / len(labels) for k in ("train", "val", "test")}
        assert abs(frac["train"] - 0.8) < 0.02
        assert abs(frac["val"] - 0.1) < 0.02
        assert abs(frac["test"] - 0.1) < 0.02

    def test_split_records_partition(self, chain):
        recs = list(generate_dataset(chain, small_cfg(count=60)))
        parts = [split_records(recs, s) for s in ("train", "val", "test")]
        assert sum(len(p) for p in parts) == len(recs)
        assert len(split_records(recs, "all")) == len(recs)

    def test_sequences_not_straddling_splits(self, chain):
        recs = list(generate_dataset(chain, small_cfg(count=60)))
        for split in ("train", "val", "test"):
            ids = {r.sequence_id for r in split_records(recs, split)}
            for other in ("train", "val", "test"):
                if other != split:
                    assert ids.isdisjoint({r.sequence_id for r in split_records(recs, other)})

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            split_records([], "bogus")
