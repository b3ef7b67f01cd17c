"""Tests for two-eye alignment and directory preparation."""

import math

import numpy as np
import pytest

from sketchforge import preprocess as prep
from sketchforge.errors import AlignmentError, FormatError
from sketchforge.fileio import read_image, write_image
from sketchforge.synthetic import face_photo, landmarks_with_eyes, random_face_landmarks


def gaussian_spot(shape, center, sigma=3.0):
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    x, y = center
    return np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * sigma ** 2))


def window_centroid(image, center, half=15):
    x0, y0 = int(round(center[0])), int(round(center[1]))
    rows, cols = np.mgrid[y0 - half:y0 + half + 1, x0 - half:x0 + half + 1]
    patch = image[y0 - half:y0 + half + 1, x0 - half:x0 + half + 1]
    return float((patch * cols).sum() / patch.sum()), float((patch * rows).sum() / patch.sum())


class TestSimilarity:

    def test_worked_example(self):
        transform = prep.estimate_similarity((np.array([50.0, 100.0]), np.array([150.0, 100.0])))
        assert transform.scale == pytest.approx(0.5)
        assert transform.rotation == pytest.approx(0.0, abs=1e-12)
        assert (transform.tx, transform.ty) == (pytest.approx(50.0), pytest.approx(75.0))

    def test_eyes_hit_targets(self, rng):
        for _ in range(20):
            landmarks = random_face_landmarks(rng, (300, 260))
            left, right = prep.eye_centers(landmarks)
            transform = prep.estimate_similarity((left, right))
            np.testing.assert_allclose(transform.apply(np.stack([left, right])), prep.EYE_TARGETS, atol=1e-9)

    def test_rotation_sign(self):
        transform = prep.estimate_similarity((np.array([0.0, 0.0]), np.array([0.0, 50.0])))
        assert transform.rotation == pytest.approx(-math.pi / 2)

    def test_coincident_eyes(self):
        eye = np.array([40.0, 60.0])
        with pytest.raises(AlignmentError, match="coincide"):
            prep.estimate_similarity((eye, eye.copy()))

    def test_inverse(self, rng):
        transform = prep.SimilarityTransform(scale=1.7, rotation=0.3, tx=-4.0, ty=12.5)
        points = rng.uniform(0, 100, (10, 2))
        np.testing.assert_allclose(transform.inverse().apply(transform.apply(points)), points, atol=1e-9)

    def test_non_positive_scale(self):
        with pytest.raises(AlignmentError):
            prep.SimilarityTransform(scale=0.0)


class TestLandmarks:

    def test_eye_centers_are_contour_means(self):
        landmarks = landmarks_with_eyes((30.0, 40.0), (70.0, 42.0))
        left, right = prep.eye_centers(landmarks)
        np.testing.assert_allclose(left, [30.0, 40.0], atol=1e-12)
        np.testing.assert_allclose(right, [70.0, 42.0], atol=1e-12)

    def test_wrong_count(self):
        with pytest.raises(FormatError, match="68 x 2"):
            prep.LandmarkSet(np.zeros((67, 2)))

    def test_non_finite(self):
        points = np.zeros((68, 2))
        points[3, 1] = np.nan
        with pytest.raises(FormatError):
            prep.LandmarkSet(points)

    def test_load(self, tmp_path):
        landmarks = landmarks_with_eyes((30.0, 40.0), (70.0, 42.0))
        np.savetxt(tmp_path / "face.txt", landmarks.points)
        loaded = prep.load_landmarks(tmp_path / "face.txt")
        assert loaded.source_id == "face"
        np.testing.assert_allclose(loaded.points, landmarks.points)

    def test_unparseable(self, tmp_path):
        (tmp_path / "bad.txt").write_text("left eye\nright eye\n")
        with pytest.raises(FormatError):
            prep.load_landmarks(tmp_path / "bad.txt")


class TestWarp:

    def test_crop_extent(self):
        landmarks = landmarks_with_eyes((100.0, 120.0), (160.0, 118.0))
        aligned = prep.align_face(face_photo((300, 260)), landmarks)
        assert aligned.image.shape == (3, 250, 200)
        assert aligned.image.dtype == np.float32

    def test_eye_spot_lands_on_target(self, rng):
        for _ in range(20):
            landmarks = random_face_landmarks(rng, (300, 260))
            left, _ = prep.eye_centers(landmarks)
            image = gaussian_spot((300, 260), left)[None]
            aligned = prep.align_face(image, landmarks).image[0]
            cx, cy = window_centroid(aligned, prep.EYE_TARGETS[0])
            assert abs(cx - prep.EYE_TARGETS[0][0]) <= 0.5
            assert abs(cy - prep.EYE_TARGETS[0][1]) <= 0.5

    def test_flat_image(self):
        with pytest.raises(FormatError):
            prep.warp_crop(np.zeros((20, 20)), prep.SimilarityTransform())


class TestPrepareDirectory:

    @pytest.fixture
    def photo_dirs(self, tmp_path):
        photos, marks = tmp_path / "photos", tmp_path / "landmarks"
        photos.mkdir()
        marks.mkdir()
        write_image(photos / "a.ppm", face_photo((300, 260), seed=1))
        write_image(photos / "b.pgm", face_photo((250, 200), seed=2, channels=1))
        np.savetxt(marks / "a.txt", landmarks_with_eyes((100.0, 120.0), (160.0, 118.0)).points)
        return photos, marks

    def test_empty_directory(self, tmp_path):
        (tmp_path / "photos").mkdir()
        manifest = prep.prepare_directory(tmp_path / "photos", tmp_path / "marks", tmp_path / "out")
        assert manifest.empty
        assert (tmp_path / "out" / "manifest.csv").exists()

    def test_aligned_and_skipped(self, tmp_path, photo_dirs):
        manifest = prep.prepare_directory(*photo_dirs, tmp_path / "out")
        assert list(manifest["name"]) == ["a.ppm", "b.pgm"]
        assert list(manifest["status"]) == ["aligned", "skipped"]
        assert manifest.loc[1, "reason"] == "missing landmarks"
        assert read_image(tmp_path / "out" / "a.ppm").shape == (3, 250, 200)
        assert not (tmp_path / "out" / "b.pgm").exists()

    def test_rerun_is_byte_identical(self, tmp_path, photo_dirs):
        prep.prepare_directory(*photo_dirs, tmp_path / "first")
        prep.prepare_directory(*photo_dirs, tmp_path / "second")
        for name in ("a.ppm", "manifest.csv"):
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()

    def test_keep_aligned(self, tmp_path, photo_dirs):
        manifest = prep.prepare_directory(*photo_dirs, tmp_path / "out", keep_aligned=True)
        assert manifest.loc[1, "status"] == "passthrough"
        original = read_image(photo_dirs[0] / "b.pgm")
        np.testing.assert_array_equal(read_image(tmp_path / "out" / "b.pgm"), original)

    def test_unreadable_image(self, tmp_path, photo_dirs):
        (photo_dirs[0] / "c.pgm").write_bytes(b"not an image")
        with pytest.raises(FormatError, match="c.pgm"):
            prep.prepare_directory(*photo_dirs, tmp_path / "out")
