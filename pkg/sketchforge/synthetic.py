"""
Desk-scale fixtures: face-like photos with matching sketches, landmark sets
with known eye centers, small extractors, and the noisy-texture pair used by
the smoothing study. `selfcheck` and the test-suite build on these.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from sketchforge.features import Extractor, ExtractorSpec
from sketchforge.patchmatch import ReferencePair
from sketchforge.preprocess import LEFT_EYE, RIGHT_EYE, LandmarkSet

DESK_WIDTHS = (8, 16, 32, 32, 32)
_LUMA = np.array([0.299, 0.587, 0.114])


def small_extractor(widths: Sequence[int] = DESK_WIDTHS, seed: int = 0) -> Extractor:
    """Randomly initialized VGG-19 prefix with reduced channel widths."""
    return Extractor.random(ExtractorSpec.vgg19(widths=tuple(widths)), seed=seed)


def face_photo(size: Tuple[int, int] = (64, 64), seed: int = 0, channels: int = 3,
               texture: float = 0.08) -> np.ndarray:
    """A C x H x W photo in [0, 1]: bright face ellipse, dark eyes and mouth, smooth skin texture."""
    rng = np.random.default_rng(seed)
    height, width = size
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy = height * rng.uniform(0.45, 0.55)
    cx = width * rng.uniform(0.45, 0.55)

    face = ((yy - cy) / (0.42 * height)) ** 2 + ((xx - cx) / (0.32 * width)) ** 2 <= 1.0
    luma = np.where(face, rng.uniform(0.6, 0.8), rng.uniform(0.15, 0.35))
    luma = ndimage.gaussian_filter(luma, sigma=1.5)

    def blob(y, x, sy, sx, depth):
        return depth * np.exp(-((yy - y) ** 2) / (2 * sy ** 2) - ((xx - x) ** 2) / (2 * sx ** 2))

    eye_dx = width * rng.uniform(0.12, 0.16)
    eye_y = cy - height * rng.uniform(0.08, 0.12)
    luma -= blob(eye_y, cx - eye_dx, height * 0.03, width * 0.05, 0.45)
    luma -= blob(eye_y, cx + eye_dx, height * 0.03, width * 0.05, 0.45)
    luma -= blob(cy + height * 0.2, cx, height * 0.025, width * 0.1, 0.3)
    luma += texture * ndimage.gaussian_filter(rng.standard_normal(size), sigma=1.0) * 2.0

    luma = np.clip(luma, 0.0, 1.0)
    if channels == 1:
        return luma[None].astype(np.float32)
    tint = rng.uniform(0.85, 1.15, size=(3, 1, 1))
    return np.clip(luma[None] * tint, 0.0, 1.0).astype(np.float32)


def noise_photo(size: Tuple[int, int] = (64, 64), seed: int = 0, channels: int = 3) -> np.ndarray:
    """Uniform noise; every feature patch is distinct with high probability."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(channels, *size)).astype(np.float32)


def sketch_from_photo(photo: np.ndarray) -> np.ndarray:
    """A 1 x H x W pencil-like rendering: lightened luma with dark strokes along strong edges."""
    photo = np.asarray(photo, dtype=np.float64)
    luma = np.tensordot(_LUMA, photo, axes=1) if photo.shape[0] == 3 else photo[0]
    edges = ndimage.gaussian_gradient_magnitude(luma, sigma=1.0)
    sketch = 0.45 + 0.55 * luma - 2.0 * edges
    sketch = ndimage.gaussian_filter(sketch, sigma=0.7)
    return np.clip(sketch, 0.0, 1.0)[None].astype(np.float32)


def reference_pairs(count: int = 5, size: Tuple[int, int] = (64, 64), seed: int = 0,
                    distinct: bool = False) -> List[ReferencePair]:
    """
    Photo/sketch pairs named pair00, pair01, ...

    Args:
        count: Number of pairs
        size: Image extent (rows, cols)
        seed: Base seed; pair i uses seed + i
        distinct: Use noise photos so every feature patch is unique
    """
    pairs = []
    for i in range(count):
        photo = noise_photo(size, seed + i) if distinct else face_photo(size, seed + i)
        pairs.append(ReferencePair(photo=photo, sketch=sketch_from_photo(photo), pair_id=f"pair{i:02d}"))
    return pairs


def random_feature_map(channels: int, height: int, width: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((channels, height, width))


# ============ LANDMARKS ============

def landmarks_with_eyes(left: Tuple[float, float], right: Tuple[float, float],
                        rng: Optional[np.random.Generator] = None, radius: float = 4.0,
                        source_id: str = "") -> LandmarkSet:
    """
    68 points whose eye contours are regular hexagons centred on `left` and `right` (x, y).
    The remaining points are scattered around the face and carry no meaning.
    """
    rng = rng or np.random.default_rng(0)
    left, right = np.asarray(left, dtype=np.float64), np.asarray(right, dtype=np.float64)
    middle = (left + right) / 2.0
    spread = max(np.linalg.norm(right - left), 1.0)
    points = middle + rng.normal(0.0, spread, size=(68, 2))

    angles = np.arange(6) * (math.pi / 3.0) + rng.uniform(0.0, math.pi)
    ring = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points[LEFT_EYE] = left + ring
    points[RIGHT_EYE] = right + ring
    return LandmarkSet(points, source_id=source_id)


def random_face_landmarks(rng: np.random.Generator, image_shape: Tuple[int, int],
                          source_id: str = "") -> LandmarkSet:
    """Eyes at a random scale, roll and position inside an image of `image_shape` (rows, cols)."""
    height, width = image_shape
    distance = rng.uniform(0.15, 0.35) * width
    roll = rng.uniform(-0.4, 0.4)
    center = np.array([rng.uniform(0.35, 0.65) * width, rng.uniform(0.35, 0.55) * height])
    offset = 0.5 * distance * np.array([math.cos(roll), math.sin(roll)])
    return landmarks_with_eyes(center - offset, center + offset, rng=rng, source_id=source_id)


# ============ METRIC FIXTURES ============

def textured_image(size: int = 64, seed: int = 0) -> np.ndarray:
    """Smooth blobs plus fine texture, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (size, size)), sigma=4.0)
    base = (base - base.min()) / max(np.ptp(base), 1e-12)
    detail = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    return np.clip(0.2 + 0.6 * base + 0.15 * detail / detail.std(), 0.0, 1.0)


def noisy_texture_pair(size: int = 64, seed: int = 0, noise_std: float = 0.15) -> Tuple[np.ndarray, np.ndarray]:
    """
    (candidate, ground truth) sharing a smooth base, each with its own
    independent fine-grained texture of standard deviation `noise_std`.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    base = 0.35 + 0.3 * xx + 0.15 * np.sin(2 * math.pi * yy)

    def texture():
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
        return noise_std * field / field.std()

    truth = np.clip(base + texture(), 0.0, 1.0)
    candidate = np.clip(base + texture(), 0.0, 1.0)
    return candidate, truth
