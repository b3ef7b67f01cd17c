"""
Evaluation
SSIM and FSIM image quality, the bilateral-smoothing study, and null-space
LDA sketch recognition.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from skimage.metrics import structural_similarity

from sketchforge.config import FsimParams
from sketchforge.errors import SketchForgeError, ShapeError
from sketchforge.tensor import eig_sym

logger = logging.getLogger(__name__)

_SCHARR = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]) / 16.0


def _gray(image: np.ndarray, name: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ShapeError(f"{name} must be a grayscale H x W (or 1 x H x W) image, got shape {image.shape}")
    return image


def _pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _gray(a, "first image"), _gray(b, "second image")
    if a.shape != b.shape:
        raise ShapeError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


# ============ SSIM ============

def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11 x 11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2."""
    a, b = _pair(a, b)
    return float(structural_similarity(
        a, b,
        data_range=data_range,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


# ============ FSIM ============

def _frequency_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / max(n - 1, 1)
        return np.arange(-n / 2, n / 2) / n

    return np.meshgrid(axis(width), axis(height))  # x along columns, y along rows


def _log_gabor_bank(height: int, width: int, params: FsimParams) -> np.ndarray:
    """Filters indexed [orientation, scale], zero frequency at the corner."""
    x, y = _frequency_grid(height, width)
    radius = np.fft.ifftshift(np.sqrt(x ** 2 + y ** 2))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0

    lowpass = np.fft.ifftshift(1.0 / (1.0 + (np.sqrt(x ** 2 + y ** 2) / 0.45) ** 30))

    radial = []
    for s in range(params.scales):
        wavelength = params.min_length * params.mult ** s
        gabor = np.exp(-np.log(radius * wavelength) ** 2 / (2 * math.log(params.sigma_f) ** 2)) * lowpass
        gabor[0, 0] = 0.0
        radial.append(gabor)

    theta_sigma = math.pi / (params.orientations * params.delta_theta)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    bank = np.empty((params.orientations, params.scales, height, width))
    for o in range(params.orientations):
        angle = o * math.pi / params.orientations
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        spread = np.exp(-np.arctan2(ds, dc) ** 2 / (2 * theta_sigma ** 2))
        for s in range(params.scales):
            bank[o, s] = spread * radial[s]
    return bank


def phase_congruency(image: np.ndarray, params: FsimParams = FsimParams()) -> np.ndarray:
    """Phase congruency map of a grayscale image (values on the 0-255 scale)."""
    image = _gray(image, "image")
    height, width = image.shape
    eps = np.finfo(np.float64).eps
    filters = _log_gabor_bank(height, width, params)

    eo = np.fft.ifft2(np.fft.fft2(image)[None, None] * filters)
    even, odd = eo.real, eo.imag
    amplitude = np.abs(eo)

    sum_e = even.sum(axis=1, keepdims=True)
    sum_o = odd.sum(axis=1, keepdims=True)
    x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + eps
    mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
    energy = (even * mean_e + odd * mean_o - np.abs(even * mean_o - odd * mean_e)).sum(axis=1, keepdims=True)

    # noise threshold from the smallest scale, per orientation
    em_n = (filters[:, :1] ** 2).sum(axis=(-2, -1), keepdims=True)
    median_e2n = np.median((amplitude[:, :1] ** 2).reshape(params.orientations, 1, -1), axis=-1)[..., None, None]
    noise_power = (-median_e2n / math.log(0.5)) / em_n

    spatial = np.fft.ifft2(filters).real * math.sqrt(height * width)
    sum_an2 = (spatial ** 2).sum(axis=(1, 2, 3), keepdims=True)
    sum_ai_aj = np.zeros_like(sum_an2)
    for s in range(params.scales - 1):
        sum_ai_aj += (spatial[:, s:s + 1] * spatial[:, s + 1:]).sum(axis=(1, 2, 3), keepdims=True)

    tau = np.sqrt((2 * noise_power * sum_an2 + 4 * noise_power * sum_ai_aj) / 2)
    threshold = (tau * math.sqrt(math.pi / 2) + params.k * np.sqrt((2 - math.pi / 2) * tau ** 2)) / 1.7
    energy = np.maximum(energy - threshold, 0.0)

    return (energy.sum(axis=(0, 1)) + eps) / (amplitude.sum(axis=(0, 1)) + eps)


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    image = _gray(image, "image")
    gx = ndimage.correlate(image, _SCHARR, mode="constant")
    gy = ndimage.correlate(image, _SCHARR.T, mode="constant")
    return np.sqrt(gx ** 2 + gy ** 2)


def _similarity(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    return (2.0 * x * y + c) / (x ** 2 + y ** 2 + c)


def _average_pool(image: np.ndarray, factor: int) -> np.ndarray:
    if factor <= 1:
        return image
    h, w = (image.shape[0] // factor) * factor, (image.shape[1] // factor) * factor
    return image[:h, :w].reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def fsim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, params: FsimParams = FsimParams()) -> float:
    """
    Feature similarity of two grayscale images.

    Phase congruency (log-Gabor bank) and Scharr gradient magnitude are
    compared pixelwise; the product of both similarity maps is pooled with
    the larger phase congruency as weight.
    """
    a, b = _pair(a, b)
    a = a * (255.0 / data_range)
    b = b * (255.0 / data_range)
    factor = max(1, round(min(a.shape) / 256))
    a, b = _average_pool(a, factor), _average_pool(b, factor)

    pc_a, pc_b = phase_congruency(a, params), phase_congruency(b, params)
    pc_sim = _similarity(pc_a, pc_b, params.t1)
    gm_sim = _similarity(gradient_magnitude(a), gradient_magnitude(b), params.t2)
    pc_max = np.maximum(pc_a, pc_b)
    weight = pc_max.sum()
    if weight <= 1e-12:
        return float(np.mean(pc_sim * gm_sim))
    return float((pc_sim * gm_sim * pc_max).sum() / weight)


# ============ SMOOTHING ============

def bilateral_filter(image: np.ndarray, sigma_spatial: float = 3.0, sigma_range: float = 0.1,
                     radius: int = 7) -> np.ndarray:
    """
    Edge-preserving smoothing; each pixel becomes the normalized average of its
    in-bounds neighbours within `radius`, weighted by spatial and intensity distance.
    """
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ShapeError(f"bilateral sigmas must be positive, got {sigma_spatial}, {sigma_range}")
    original = np.asarray(image)
    img = _gray(image, "image")
    height, width = img.shape
    padded = np.pad(img, radius, mode="constant", constant_values=np.nan)

    acc = np.zeros_like(img)
    norm = np.zeros_like(img)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            neighbour = padded[radius + dy:radius + dy + height, radius + dx:radius + dx + width]
            valid = ~np.isnan(neighbour)
            values = np.where(valid, neighbour, 0.0)
            spatial = math.exp(-(dy * dy + dx * dx) / (2.0 * sigma_spatial ** 2))
            weight = np.where(valid, spatial * np.exp(-(values - img) ** 2 / (2.0 * sigma_range ** 2)), 0.0)
            acc += weight * values
            norm += weight
    out = acc / norm
    return out.reshape(original.shape) if original.ndim == 3 else out


# ============ QUALITY REPORT ============

@dataclass
class MetricReport:
    per_pair: pd.DataFrame
    means: Dict[str, float]


def evaluate_pairs(pairs: Sequence[Tuple[str, np.ndarray, np.ndarray]], smooth: bool = False,
                   data_range: float = 1.0, sigma_spatial: float = 3.0, sigma_range: float = 0.1,
                   radius: int = 7, params: FsimParams = FsimParams()) -> MetricReport:
    """
    SSIM/FSIM of every (name, synthesized, ground truth) pair.

    With `smooth`, the synthesized sketch is also bilateral-filtered and
    scored again; `*_gain` columns give the relative change.
    """
    rows = []
    for name, synth, truth in pairs:
        row = {"name": name, "ssim": ssim(synth, truth, data_range), "fsim": fsim(synth, truth, data_range, params)}
        if smooth:
            smoothed = bilateral_filter(synth, sigma_spatial, sigma_range, radius)
            row["ssim_smoothed"] = ssim(smoothed, truth, data_range)
            row["fsim_smoothed"] = fsim(smoothed, truth, data_range, params)
            row["ssim_gain"] = (row["ssim_smoothed"] - row["ssim"]) / abs(row["ssim"]) if row["ssim"] else 0.0
            row["fsim_gain"] = (row["fsim_smoothed"] - row["fsim"]) / abs(row["fsim"]) if row["fsim"] else 0.0
        rows.append(row)

    columns = ["name", "ssim", "fsim"]
    if smooth:
        columns += ["ssim_smoothed", "fsim_smoothed", "ssim_gain", "fsim_gain"]
    per_pair = pd.DataFrame(rows, columns=columns)
    means = {col: float(per_pair[col].mean()) for col in columns[1:]} if len(per_pair) else {}
    return MetricReport(per_pair=per_pair, means=means)


def export_report_excel(report: MetricReport, curve: Optional["RecognitionCurve"] = None) -> bytes:
    """
    Export the metric tables to a single Excel workbook.

    Returns:
        Bytes of the Excel file
    """
    output = io.BytesIO()
    with pd.ExcelWriter(output, engine='openpyxl') as writer:
        report.per_pair.to_excel(writer, sheet_name='Per Pair', index=False)
        pd.DataFrame([report.means]).to_excel(writer, sheet_name='Means', index=False)
        if curve is not None:
            curve.to_frame().to_excel(writer, sheet_name='Recognition', index=False)
    output.seek(0)
    return output.getvalue()


# ============ NULL-SPACE LDA ============

@dataclass
class NldaModel:
    mean: np.ndarray
    projection: np.ndarray  # D x d, orthonormal columns, most discriminant first
    eigenvalues: np.ndarray

    @property
    def dims(self) -> int:
        return self.projection.shape[1]

    def transform(self, samples: np.ndarray, dims: Optional[int] = None) -> np.ndarray:
        basis = self.projection if dims is None else self.projection[:, :dims]
        return (np.asarray(samples, dtype=np.float64) - self.mean) @ basis


def _within_scatter(samples: np.ndarray, labels: np.ndarray) -> np.ndarray:
    scatter = np.zeros((samples.shape[1], samples.shape[1]))
    for label in np.unique(labels):
        group = samples[labels == label]
        centered = group - group.mean(axis=0)
        scatter += centered.T @ centered
    return scatter


def nlda_fit(samples: np.ndarray, labels: Sequence, tol: float = 1e-10) -> NldaModel:
    """
    Null-space LDA.

    Samples are first projected onto the range of the total scatter. Inside
    that subspace the null space of the within-class scatter is kept, and the
    between-class scatter is diagonalized there.

    Args:
        samples: n x D feature vectors
        labels: n class labels
        tol: Relative eigenvalue threshold treated as zero

    Returns:
        NldaModel whose projection has orthonormal columns
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    labels = np.asarray(labels)
    if len(labels) != len(samples):
        raise ShapeError(f"{len(labels)} labels for {len(samples)} samples")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise SketchForgeError(f"NLDA needs at least two classes, got {len(classes)}")

    mean = samples.mean(axis=0)
    centered = samples - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if singular.size == 0 or singular[0] == 0:
        raise SketchForgeError("total scatter is zero; all samples are identical")
    rank = int(np.sum(singular > tol * singular[0] * max(centered.shape)))
    basis = vt[:rank].T
    reduced = centered @ basis

    within = eig_sym(_within_scatter(reduced, labels))
    cutoff = tol * singular[0] ** 2 * rank
    null = within.eigenvalues <= cutoff
    if not np.any(null):
        raise SketchForgeError(
            f"within-class scatter has full rank {rank} in the {rank}-dimensional sample space; null space is empty"
        )
    null_basis = within.eigenvectors[:, null]

    between = np.zeros((rank, rank))
    for label in classes:
        group = reduced[labels == label]
        centroid = group.mean(axis=0)
        between += len(group) * np.outer(centroid, centroid)
    projected = null_basis.T @ between @ null_basis
    decomposition = eig_sym(0.5 * (projected + projected.T))
    keep = decomposition.eigenvalues > tol * max(decomposition.eigenvalues[0], 1e-300)

    projection = basis @ null_basis @ decomposition.eigenvectors[:, keep]
    logger.debug("NLDA: rank %d, null space %d, discriminants %d", rank, int(null.sum()), int(keep.sum()))
    return NldaModel(mean=mean, projection=projection, eigenvalues=decomposition.eigenvalues[keep])


@dataclass
class RecognitionCurve:
    dims: List[int]
    accuracy: List[float]
    used_dims: List[int] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"dims": self.dims, "used_dims": self.used_dims, "accuracy": self.accuracy})


def recognition_curve(probes: np.ndarray, gallery: np.ndarray, labels: Sequence, dims: Sequence[int],
                      gallery_labels: Optional[Sequence] = None, train: Optional[np.ndarray] = None,
                      train_labels: Optional[Sequence] = None) -> RecognitionCurve:
    """
    Nearest-neighbour recognition accuracy of probe sketches against a
    gallery, in the leading NLDA dimensions.

    Args:
        probes: Probe images or vectors (e.g. synthesized sketches), n x ...
        gallery: Gallery images or vectors, one per identity
        labels: Probe identities
        dims: Discriminant counts to evaluate; clipped to what NLDA yields
        gallery_labels: Gallery identities (default: same order as `labels`)
        train: Optional separate NLDA training set; the gallery is used otherwise
        train_labels: Identities of `train`

    Returns:
        RecognitionCurve
    """
    probes = np.asarray(probes, dtype=np.float64).reshape(len(probes), -1)
    gallery = np.asarray(gallery, dtype=np.float64).reshape(len(gallery), -1)
    labels = np.asarray(labels)
    gallery_labels = labels if gallery_labels is None else np.asarray(gallery_labels)
    if len(labels) != len(probes) or len(gallery_labels) != len(gallery):
        raise ShapeError(
            f"label mismatch: {len(probes)} probes / {len(labels)} labels, "
            f"{len(gallery)} gallery items / {len(gallery_labels)} labels"
        )
    unknown = set(labels.tolist()) - set(gallery_labels.tolist())
    if unknown:
        raise ShapeError(f"probe labels missing from the gallery: {sorted(unknown)[:5]}")

    if train is None:
        model = nlda_fit(gallery, gallery_labels)
    else:
        if train_labels is None:
            raise ShapeError("a training set needs its labels")
        model = nlda_fit(np.asarray(train).reshape(len(train), -1), train_labels)

    used, accuracy = [], []
    for d in dims:
        d_used = max(1, min(int(d), model.dims))
        p = model.transform(probes, d_used)
        g = model.transform(gallery, d_used)
        distances = ((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1)
        predicted = gallery_labels[distances.argmin(axis=1)]
        used.append(d_used)
        accuracy.append(float(np.mean(predicted == labels)))
    return RecognitionCurve(dims=[int(d) for d in dims], accuracy=accuracy, used_dims=used)
