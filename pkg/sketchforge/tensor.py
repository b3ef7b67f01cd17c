"""
Tensor kernels
Dense numeric substrate for the rest of the package: validation of the
array contract plus the convolution, pooling, activation and symmetric
eigensolver kernels everything else is built from.

Arrays are plain row-major numpy arrays. Convolutions use the correlation
convention (no kernel flip).
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sketchforge.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = _DTYPES.get(os.environ.get("SKETCHFORGE_PRECISION", "float32"), np.float32)


def set_default_dtype(name: str) -> None:
    """Select the build-wide precision for training-path arrays ('float32' or 'float64')."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]
    logger.debug("Default precision set to %s", name)


def get_default_dtype():
    return _default_dtype


def as_tensor(data, dtype=None) -> np.ndarray:
    """Convert to a contiguous array of the default (or given) dtype and validate it."""
    arr = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
    check_tensor(arr)
    return arr


def check_tensor(arr: np.ndarray, name: str = "tensor") -> None:
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"{name} must have rank 1-4, got shape {arr.shape}")
    if any(extent < 1 for extent in arr.shape):
        raise ShapeError(f"{name} has an empty extent: shape {arr.shape}")


@dataclass(frozen=True)
class SymEigResult:
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending."""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns


def pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the two trailing (spatial) axes by `pad` on every side."""
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths)


def conv2d_valid(x: np.ndarray, kernels: np.ndarray, stride: int = 1) -> np.ndarray:
    """
    Valid-mode 2-D correlation.

    Args:
        x: Input of shape C x H x W, or a batch N x C x H x W
        kernels: Kernel bank K x C x kh x kw
        stride: Step between output cells, in input pixels

    Returns:
        K x H' x W' (or N x K x H' x W') with H' = (H - kh) // stride + 1
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d_valid input must be C x H x W or N x C x H x W, got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d_valid kernels must be K x C x kh x kw, got {kernels.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d_valid stride must be positive, got {stride}")

    batched = x.ndim == 4
    xb = x if batched else x[None]
    _, channels, height, width = xb.shape
    _, kernel_channels, kh, kw = kernels.shape

    if kernel_channels != channels:
        raise ShapeError(
            f"conv2d_valid channel mismatch: input has {channels} channels, kernels expect {kernel_channels}"
        )
    if kh > height or kw > width:
        raise ShapeError(f"conv2d_valid kernel {kh}x{kw} is larger than input {height}x{width}")

    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out if batched else out[0]


def max_pool2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2; odd trailing rows/columns form truncated windows."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"max_pool2 needs at least two spatial axes, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(_default_dtype)

    height, width = x.shape[-2:]
    pad_h, pad_w = height % 2, width % 2
    if pad_h or pad_w:
        widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
        x = np.pad(x, widths, constant_values=-np.inf)

    lead = x.shape[:-2]
    blocks = x.reshape(*lead, (height + pad_h) // 2, 2, (width + pad_w) // 2, 2)
    return blocks.max(axis=(-3, -1))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def eig_sym(matrix: np.ndarray) -> SymEigResult:
    """
    Eigen-decomposition of a real symmetric matrix in double precision.

    Returns:
        SymEigResult with eigenvalues sorted descending and orthonormal eigenvector columns
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"eig_sym needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("eig_sym input contains non-finite entries")

    scale = max(1.0, float(np.abs(a).max()))
    asymmetry = float(np.abs(a - a.T).max())
    if asymmetry > 1e-8 * scale:
        raise ShapeError(f"eig_sym input is not symmetric (max |A - A^T| = {asymmetry:.3e})")

    values, vectors = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(values, kind="stable")[::-1]
    return SymEigResult(eigenvalues=values[order], eigenvectors=vectors[:, order])
