"""
Feature extraction
VGG-19 prefix (conv1_1 .. relu5_1) with named taps, random or file-loaded
weights, and the relu5_1 preselection signature.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from sketchforge import autodiff as ad
from sketchforge import tensor
from sketchforge.autodiff import Var
from sketchforge.errors import (
    FormatError,
    LayerShapeMismatchError,
    RangeError,
    ShapeError,
    UnknownComponentError,
)
from sketchforge.fileio import BinaryReader, BinaryWriter, PathLike, atomic_write, read_bytes

logger = logging.getLogger(__name__)

TAP_NAMES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
SIGNATURE_TAP = "relu5_1"

WEIGHT_MAGIC = b"SKFW"
WEIGHT_VERSION = 1
NORM_MAGIC = b"NORM"

# convs per block up to conv5_1
_VGG19_BLOCK_CONVS = (2, 2, 4, 4, 1)


def tap_level(name: str) -> int:
    """1-based block index of a tap name ('relu3_1' -> 3)."""
    if name not in TAP_NAMES:
        raise UnknownComponentError(f"Unknown tap '{name}', expected one of {', '.join(TAP_NAMES)}")
    return TAP_NAMES.index(name) + 1


def tap_name(level: int) -> str:
    if not 1 <= level <= len(TAP_NAMES):
        raise UnknownComponentError(f"Unknown layer {level}, expected 1-{len(TAP_NAMES)}")
    return TAP_NAMES[level - 1]


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv3x3 | relu | maxpool2
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ExtractorSpec:
    layers: Tuple[LayerSpec, ...]
    taps: Dict[str, int]

    @classmethod
    def vgg19(cls, widths: Sequence[int] = (64, 128, 256, 512, 512), in_channels: int = 3) -> "ExtractorSpec":
        """VGG-19 topology up to relu5_1, with the per-block channel widths given."""
        if len(widths) != len(_VGG19_BLOCK_CONVS) or any(w < 1 for w in widths):
            raise ShapeError(f"vgg19 needs five positive block widths, got {tuple(widths)}")
        layers: List[LayerSpec] = []
        taps: Dict[str, int] = {}
        channels = in_channels
        for block, (width, convs) in enumerate(zip(widths, _VGG19_BLOCK_CONVS)):
            if block > 0:
                layers.append(LayerSpec("maxpool2", channels, channels))
            for conv in range(convs):
                layers.append(LayerSpec("conv3x3", channels, width))
                layers.append(LayerSpec("relu", width, width))
                channels = width
                if conv == 0:
                    taps[TAP_NAMES[block]] = len(layers) - 1
        return cls(layers=tuple(layers), taps=taps)

    @property
    def conv_shapes(self) -> List[Tuple[int, int, int, int]]:
        return [(l.out_channels, l.in_channels, 3, 3) for l in self.layers if l.kind == "conv3x3"]

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.layers[self.taps[name]].out_channels for name in TAP_NAMES if name in self.taps)

    def validate(self) -> None:
        channels = self.layers[0].in_channels
        for index, layer in enumerate(self.layers):
            if layer.in_channels != channels:
                raise ShapeError(
                    f"layer {index} ({layer.kind}) expects {layer.in_channels} channels, chain provides {channels}"
                )
            channels = layer.out_channels


@dataclass
class FeatureSet:
    """Feature maps (C x H x W) of one image, keyed by tap name."""
    maps: Dict[str, np.ndarray]
    source_id: str = ""

    def __getitem__(self, tap: str) -> np.ndarray:
        if tap not in self.maps:
            raise UnknownComponentError(f"Tap '{tap}' was not extracted for '{self.source_id}'")
        return self.maps[tap]


@dataclass
class Extractor:
    spec: ExtractorSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None
    _cast: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def random(cls, spec: Optional[ExtractorSpec] = None, seed: int = 0) -> "Extractor":
        """He-initialized weights with zero biases."""
        spec = spec or ExtractorSpec.vgg19()
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for out_c, in_c, kh, kw in spec.conv_shapes:
            std = np.sqrt(2.0 / (in_c * kh * kw))
            weights.append((rng.standard_normal((out_c, in_c, kh, kw)) * std).astype(np.float32))
            biases.append(np.zeros(out_c, dtype=np.float32))
        return cls(spec=spec, weights=weights, biases=biases)

    def _param(self, kind: str, index: int, dtype) -> np.ndarray:
        key = (index, f"{kind}:{np.dtype(dtype).str}")
        if key not in self._cast:
            source = self.weights[index] if kind == "w" else self.biases[index]
            self._cast[key] = source.astype(dtype, copy=False)
        return self._cast[key]

    def forward(self, x: Var, taps: Iterable[str]) -> Dict[str, Var]:
        """
        Run the network on an N x 3 x H x W batch, stopping after the deepest requested tap.

        Works on constants (plain inference) and on taped values alike, so
        gradients flow back to the input when it requires them.
        """
        wanted = {name: self.spec.taps[name] for name in _check_taps(taps, self.spec)}
        if not wanted:
            return {}
        last = max(wanted.values())
        dtype = x.value.dtype

        if self.channel_mean is not None:
            x = ad.normalize_channels(x, self.channel_mean, self.channel_std)

        outputs: Dict[str, Var] = {}
        conv_index = 0
        for index, layer in enumerate(self.spec.layers[:last + 1]):
            if layer.kind == "conv3x3":
                x = ad.conv2d(x, Var(self._param("w", conv_index, dtype)),
                              Var(self._param("b", conv_index, dtype)), pad=1)
                conv_index += 1
            elif layer.kind == "relu":
                x = ad.relu(x)
            else:
                x = ad.max_pool2(x)
            for name, tap_index in wanted.items():
                if tap_index == index:
                    outputs[name] = x
        return outputs


def _check_taps(taps: Iterable[str], spec: ExtractorSpec) -> List[str]:
    names = list(dict.fromkeys(taps))
    for name in names:
        tap_level(name)
        if name not in spec.taps:
            raise UnknownComponentError(f"Tap '{name}' is not part of this extractor")
    return names


def minimum_extent(taps: Iterable[str]) -> int:
    """Smallest image side that keeps every requested tap non-degenerate."""
    levels = [tap_level(name) for name in taps]
    return 2 ** max(levels) if levels else 1


def to_rgb_batch(images: np.ndarray) -> np.ndarray:
    """Stack C x H x W images (or an N x C x H x W batch) and replicate gray to 3 channels."""
    batch = images if images.ndim == 4 else images[None]
    if batch.shape[1] == 1:
        batch = np.repeat(batch, 3, axis=1)
    elif batch.shape[1] != 3:
        raise ShapeError(f"images must have 1 or 3 channels, got {batch.shape[1]}")
    return batch


def _validate_images(batch: np.ndarray, taps: Sequence[str]) -> None:
    if not np.all(np.isfinite(batch)) or batch.min() < 0.0 or batch.max() > 1.0:
        raise RangeError(f"image values must lie in [0, 1], got [{batch.min():.4g}, {batch.max():.4g}]")
    need = minimum_extent(taps)
    height, width = batch.shape[-2:]
    if height < need or width < need:
        raise ShapeError(
            f"image {height}x{width} is too small for taps {', '.join(taps)}: needs at least {need}x{need}"
        )


def extract_batch(extractor: Extractor, images: np.ndarray, taps: Iterable[str], dtype=None) -> Dict[str, np.ndarray]:
    """Feature maps for an N x C x H x W batch, keyed by tap (each N x C' x H' x W')."""
    taps = _check_taps(taps, extractor.spec)
    batch = to_rgb_batch(np.asarray(images))
    _validate_images(batch, taps)
    batch = np.ascontiguousarray(batch, dtype=dtype or tensor.get_default_dtype())
    outputs = extractor.forward(Var(batch), taps)
    return {name: var.value for name, var in outputs.items()}


def extract(extractor: Extractor, image: np.ndarray, taps: Iterable[str], source_id: str = "") -> FeatureSet:
    """
    Extract feature maps of one image.

    Args:
        extractor: Loaded or random extractor
        image: 3 x H x W or 1 x H x W array in [0, 1]; gray is replicated to three channels
        taps: Tap names to return
        source_id: Identifier recorded in the FeatureSet

    Returns:
        FeatureSet with one C x H' x W' map per requested tap
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"extract expects a C x H x W image, got shape {image.shape}")
    maps = extract_batch(extractor, image, taps)
    return FeatureSet(maps={name: fm[0] for name, fm in maps.items()}, source_id=source_id)


def preselect_signature(features: FeatureSet) -> np.ndarray:
    """Flattened relu5_1 map scaled to unit L2 norm (float64). An all-zero map yields a zero vector."""
    flat = np.asarray(features[SIGNATURE_TAP], dtype=np.float64).ravel()
    norm = np.linalg.norm(flat)
    if norm == 0.0:
        logger.warning("relu5_1 map of '%s' is all zero; its preselection signature is zero", features.source_id)
        return flat
    return flat / norm


# ============ WEIGHT FILE ============

def save_weights(path: PathLike, extractor: Extractor) -> None:
    writer = BinaryWriter()
    writer.magic(WEIGHT_MAGIC)
    writer.u32(WEIGHT_VERSION)
    writer.u32(len(extractor.weights))
    for kernel, bias in zip(extractor.weights, extractor.biases):
        for extent in kernel.shape:
            writer.u32(extent)
        writer.f32_array(kernel)
        writer.f32_array(bias)
    if extractor.channel_mean is not None:
        writer.magic(NORM_MAGIC)
        writer.u32(len(extractor.channel_mean))
        writer.f32_array(extractor.channel_mean)
        writer.f32_array(extractor.channel_std)
    atomic_write(path, writer.getvalue())
    logger.info("Wrote %d conv layers to %s", len(extractor.weights), path)


def _infer_spec(shapes: List[Tuple[int, ...]]) -> ExtractorSpec:
    expected = sum(_VGG19_BLOCK_CONVS)
    if len(shapes) != expected:
        raise FormatError(f"weight file holds {len(shapes)} conv layers, the VGG-19 prefix has {expected}")
    firsts = np.cumsum((0,) + _VGG19_BLOCK_CONVS[:-1])
    return ExtractorSpec.vgg19(widths=[shapes[i][0] for i in firsts], in_channels=shapes[0][1])


def load_weights(path: PathLike, spec: Optional[ExtractorSpec] = None) -> Extractor:
    """
    Load an extractor from a weight file.

    Without `spec` the block widths are read from the file; every stored
    layer shape is still checked against the resulting topology.
    """
    reader = BinaryReader(read_bytes(path, "weight"), "weight")
    reader.expect_magic(WEIGHT_MAGIC)
    reader.expect_version(WEIGHT_VERSION)
    count = reader.u32()

    shapes, weights, biases = [], [], []
    for _ in range(count):
        shape = tuple(reader.u32() for _ in range(4))
        shapes.append(shape)
        weights.append(reader.f32_array(shape))
        biases.append(reader.f32_array((shape[0],)))

    spec = spec or _infer_spec(shapes)
    expected_shapes = spec.conv_shapes
    if len(shapes) != len(expected_shapes):
        raise FormatError(f"weight file holds {len(shapes)} conv layers, extractor expects {len(expected_shapes)}")
    for index, (found, expected) in enumerate(zip(shapes, expected_shapes)):
        if tuple(found) != tuple(expected):
            raise LayerShapeMismatchError(index, tuple(found), tuple(expected))

    channel_mean = channel_std = None
    if not reader.at_end:
        reader.expect_magic(NORM_MAGIC)
        channels = reader.u32()
        channel_mean = reader.f32_array((channels,))
        channel_std = reader.f32_array((channels,))
        if np.any(channel_std <= 0):
            raise FormatError("normalization block has a non-positive standard deviation")

    return Extractor(spec=spec, weights=weights, biases=biases, channel_mean=channel_mean, channel_std=channel_std)
