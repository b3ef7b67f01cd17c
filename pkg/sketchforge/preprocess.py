"""
Face alignment
Two-eye similarity transform from 68-point landmarks, warp and 250 x 200
crop, and batch alignment of a photo directory.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from skimage import transform as sktransform

from sketchforge.errors import AlignmentError, FormatError
from sketchforge.fileio import PathLike, image_extension, read_image, write_csv, write_image

logger = logging.getLogger(__name__)

CROP_SHAPE = (250, 200)  # rows, cols
EYE_TARGETS = ((75.0, 125.0), (125.0, 125.0))  # (x, y)
IMAGE_SUFFIXES = {".pgm", ".ppm", ".png", ".jpg", ".jpeg", ".bmp"}

# 0-based slices of the 68-point scheme (points 37-42 and 43-48)
LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # 68 x 2, (x, y)
    source_id: str = ""

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.shape != (68, 2):
            raise FormatError(f"landmarks of '{self.source_id}' must be 68 x 2, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise FormatError(f"landmarks of '{self.source_id}' contain non-finite values")
        object.__setattr__(self, "points", points)


def load_landmarks(path: PathLike) -> LandmarkSet:
    """Read 68 lines of 'x y'."""
    path = Path(path)
    try:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise FormatError(f"cannot parse landmark file {path}: {e}") from None
    return LandmarkSet(points, source_id=path.stem)


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = s * R(theta) * p + t on (x, y) points."""
    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise AlignmentError(f"similarity scale must be positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([
            [self.scale * c, -self.scale * s, self.tx],
            [self.scale * s, self.scale * c, self.ty],
            [0.0, 0.0, 1.0],
        ])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        flat = points.reshape(-1, 2)
        out = flat @ self.matrix[:2, :2].T + self.matrix[:2, 2]
        return out.reshape(points.shape)

    def inverse(self) -> "SimilarityTransform":
        inv = np.linalg.inv(self.matrix)
        return SimilarityTransform(1.0 / self.scale, -self.rotation, float(inv[0, 2]), float(inv[1, 2]))

    def to_skimage(self) -> sktransform.SimilarityTransform:
        return sktransform.SimilarityTransform(matrix=self.matrix)


@dataclass
class AlignedFace:
    image: np.ndarray  # C x 250 x 200
    transform: SimilarityTransform
    source_id: str = ""


def eye_centers(landmarks: LandmarkSet) -> Tuple[np.ndarray, np.ndarray]:
    """Means of the left-eye and right-eye contour points."""
    return landmarks.points[LEFT_EYE].mean(axis=0), landmarks.points[RIGHT_EYE].mean(axis=0)


def estimate_similarity(eyes: Tuple[np.ndarray, np.ndarray],
                        targets: Tuple[Tuple[float, float], Tuple[float, float]] = EYE_TARGETS) -> SimilarityTransform:
    """
    The similarity transform taking the left eye to targets[0] and the right eye to targets[1].

    With points as complex numbers the map is z -> a z + b, so two
    correspondences fix a and b exactly.
    """
    p1, p2 = (complex(*np.asarray(e, dtype=np.float64)) for e in eyes)
    t1, t2 = (complex(*t) for t in targets)
    if abs(p2 - p1) < 1e-12:
        raise AlignmentError(f"eye centers coincide at ({p1.real:.3f}, {p1.imag:.3f})")
    a = (t2 - t1) / (p2 - p1)
    b = t1 - a * p1
    return SimilarityTransform(scale=abs(a), rotation=math.atan2(a.imag, a.real), tx=b.real, ty=b.imag)


def warp_crop(image: np.ndarray, transform: SimilarityTransform, source_id: str = "",
              output_shape: Tuple[int, int] = CROP_SHAPE) -> AlignedFace:
    """
    Resample a C x H x W image into the aligned 250 x 200 frame.

    Bilinear sampling through the inverse map; samples outside the source
    replicate the nearest edge pixel.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise FormatError(f"warp_crop expects a C x H x W image, got shape {image.shape}")
    warped = sktransform.warp(
        np.moveaxis(image, 0, -1).astype(np.float64),
        inverse_map=transform.to_skimage().inverse,
        output_shape=output_shape,
        order=1,
        mode="edge",
        preserve_range=True,
    )
    out = np.moveaxis(warped, -1, 0).astype(image.dtype)
    return AlignedFace(image=np.ascontiguousarray(out), transform=transform, source_id=source_id)


def align_face(image: np.ndarray, landmarks: LandmarkSet) -> AlignedFace:
    return warp_crop(image, estimate_similarity(eye_centers(landmarks)), source_id=landmarks.source_id)


# ============ DIRECTORY PREP ============

def list_images(directory: PathLike) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def prepare_directory(photo_dir: PathLike, landmark_dir: PathLike, out_dir: PathLike,
                      keep_aligned: bool = False) -> pd.DataFrame:
    """
    Align every photo in a directory and write the crops plus manifest.csv.

    Args:
        photo_dir: Input images
        landmark_dir: One '<image stem>.txt' landmark file per image
        out_dir: Destination; gray crops are written as PGM, color as PPM
        keep_aligned: Copy images that are already 250 x 200 through unchanged
            when they have no landmark file

    Returns:
        Manifest DataFrame (name, status, output, reason)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in list_images(photo_dir):
        try:
            image = read_image(path)
        except (OSError, ValueError) as e:
            raise FormatError(f"cannot read image {path}: {e}") from None

        landmark_path = Path(landmark_dir) / f"{path.stem}.txt"
        if not landmark_path.exists():
            if keep_aligned and image.shape[-2:] == CROP_SHAPE:
                target = out_dir / f"{path.stem}{image_extension(image)}"
                write_image(target, image)
                rows.append({"name": path.name, "status": "passthrough", "output": target.name, "reason": ""})
                continue
            logger.warning("No landmarks for %s; skipping", path.name)
            rows.append({"name": path.name, "status": "skipped", "output": "", "reason": "missing landmarks"})
            continue

        aligned = align_face(image, load_landmarks(landmark_path))
        target = out_dir / f"{path.stem}{image_extension(aligned.image)}"
        write_image(target, aligned.image)
        rows.append({"name": path.name, "status": "aligned", "output": target.name, "reason": ""})

    manifest = pd.DataFrame(rows, columns=["name", "status", "output", "reason"])
    write_csv(out_dir / "manifest.csv", manifest)
    logger.info("Prepared %d images (%d skipped) into %s",
                int((manifest["status"] != "skipped").sum()), int((manifest["status"] == "skipped").sum()), out_dir)
    return manifest
