"""
Pseudo sketch feature generation
Dense k x k patches over feature maps, cosine patch matching against a
reference store (as normalized cross-correlation), top-k reference
preselection, composition of the matched sketch patches, and a pixel-space
projection of a match for inspection.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from sketchforge import features as feat
from sketchforge import tensor
from sketchforge.config import worker_count
from sketchforge.errors import DanglingMatchError, SketchForgeError, ShapeError, UnknownComponentError
from sketchforge.features import Extractor, FeatureSet
from sketchforge.fileio import (
    BinaryReader,
    BinaryWriter,
    PathLike,
    atomic_write,
    decode_image,
    encode_image,
    read_bytes,
)

logger = logging.getLogger(__name__)

STORE_MAGIC = b"SKRS"
STORE_VERSION = 1


# ============ PATCH GRID ============

@dataclass(frozen=True)
class PatchGrid:
    """Row-major grid of k x k patch centers over one feature map (stride 1)."""
    k: int
    rows: int
    cols: int
    tap: str = ""
    stride: int = 1

    @property
    def m(self) -> int:
        return self.rows * self.cols

    @property
    def half(self) -> int:
        return self.k // 2

    def center(self, j: int) -> Tuple[int, int]:
        """Feature-map (row, col) of patch j's center."""
        row, col = divmod(int(j), self.cols)
        return row + self.half, col + self.half

    def index(self, row: int, col: int) -> int:
        """Patch index of the patch centered at feature-map (row, col)."""
        return (row - self.half) * self.cols + (col - self.half)


def _grid_for(height: int, width: int, k: int, tap: str = "") -> PatchGrid:
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"patch size must be a positive odd integer, got {k}")
    if k > min(height, width):
        raise ShapeError(f"patch size {k} exceeds feature map {height}x{width}")
    half = k // 2
    return PatchGrid(k=k, rows=height - 2 * half, cols=width - 2 * half, tap=tap)


def extract_patches(fm: np.ndarray, k: int, tap: str = "") -> Tuple[PatchGrid, np.ndarray]:
    """
    Every k x k patch of a C x H x W feature map.

    Returns:
        (grid, patches) with patches shaped m x C x k x k, row-major over centers
    """
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ShapeError(f"extract_patches expects a C x H x W map, got shape {fm.shape}")
    grid = _grid_for(fm.shape[1], fm.shape[2], k, tap)
    windows = sliding_window_view(fm, (k, k), axis=(1, 2))  # C, rows, cols, k, k
    patches = windows.transpose(1, 2, 0, 3, 4).reshape(grid.m, fm.shape[0], k, k)
    return grid, np.ascontiguousarray(patches)


# ============ REFERENCE STORE ============

@dataclass
class ReferencePair:
    photo: np.ndarray   # 3 x H x W (or 1 x H x W)
    sketch: np.ndarray  # 1 x H x W
    pair_id: str


@dataclass
class ReferenceStore:
    """Precomputed photo/sketch features of the reference pairs."""
    ids: List[str]
    taps: Tuple[str, ...]
    k: int
    photo_maps: Dict[str, np.ndarray]   # tap -> N x C x H x W
    sketch_maps: Dict[str, np.ndarray]  # tap -> N x C x H x W
    sketches: np.ndarray                # N x 1 x H x W
    signatures: np.ndarray = field(default=None)  # N x D float64

    def __post_init__(self):
        if not self.ids:
            raise SketchForgeError("reference store needs at least one pair")
        if self.signatures is None:
            self.signatures = np.stack([
                feat.preselect_signature(FeatureSet({feat.SIGNATURE_TAP: fm}, pair_id))
                for fm, pair_id in zip(self.photo_maps[feat.SIGNATURE_TAP], self.ids)
            ])

    def __len__(self) -> int:
        return len(self.ids)

    def require_tap(self, tap: str) -> None:
        if tap not in self.taps:
            raise UnknownComponentError(
                f"reference store has no '{tap}' features (stored taps: {', '.join(self.taps)})"
            )

    def save(self, path: PathLike) -> None:
        writer = BinaryWriter()
        writer.magic(STORE_MAGIC)
        writer.u32(STORE_VERSION)
        writer.u32(len(self))
        writer.u32(len(self.taps))
        for tap in self.taps:
            writer.string(tap)
        writer.u32(self.k)
        for i, pair_id in enumerate(self.ids):
            writer.string(pair_id)
            for tap in self.taps:
                writer.named_array(f"photo/{tap}", self.photo_maps[tap][i])
                writer.named_array(f"sketch/{tap}", self.sketch_maps[tap][i])
            writer.raw(encode_image(self.sketches[i]))
        atomic_write(path, writer.getvalue())
        logger.info("Wrote reference store with %d pairs to %s", len(self), path)

    @classmethod
    def load(cls, path: PathLike) -> "ReferenceStore":
        reader = BinaryReader(read_bytes(path, "store"), "store")
        reader.expect_magic(STORE_MAGIC)
        reader.expect_version(STORE_VERSION)
        count = reader.u32()
        taps = tuple(reader.string() for _ in range(reader.u32()))
        k = reader.u32()

        ids: List[str] = []
        photo: Dict[str, List[np.ndarray]] = {tap: [] for tap in taps}
        sketch: Dict[str, List[np.ndarray]] = {tap: [] for tap in taps}
        sketches = []
        for _ in range(count):
            ids.append(reader.string())
            for tap in taps:
                photo[tap].append(reader.named_array()[1])
                sketch[tap].append(reader.named_array()[1])
            sketches.append(decode_image(reader.raw()))
        return cls(
            ids=ids,
            taps=taps,
            k=k,
            photo_maps={tap: np.stack(maps) for tap, maps in photo.items()},
            sketch_maps={tap: np.stack(maps) for tap, maps in sketch.items()},
            sketches=np.stack(sketches).astype(np.float32),
        )


def build_reference_store(pairs: Sequence[ReferencePair], extractor: Extractor,
                          taps: Iterable[str], k: int = 3) -> ReferenceStore:
    """
    Extract and keep the photo and sketch features of every reference pair.

    The relu5_1 tap is always included since it backs preselection.
    """
    if not pairs:
        raise SketchForgeError("reference store needs at least one pair")
    requested = set(taps)
    taps = tuple(sorted(requested | {feat.SIGNATURE_TAP}, key=feat.tap_level))

    extent = pairs[0].photo.shape[-2:]
    for pair in pairs:
        if pair.photo.shape[-2:] != extent or pair.sketch.shape[-2:] != extent:
            raise ShapeError(
                f"pair '{pair.pair_id}' has photo {pair.photo.shape[-2:]} / sketch {pair.sketch.shape[-2:]}, "
                f"expected {tuple(extent)}"
            )

    photos = feat.extract_batch(extractor, np.stack([feat.to_rgb_batch(p.photo)[0] for p in pairs]), taps,
                                dtype=np.float32)
    sketch_batch = np.stack([np.asarray(p.sketch, dtype=np.float32) for p in pairs])
    sketch_feats = feat.extract_batch(extractor, sketch_batch, taps, dtype=np.float32)
    for tap in sorted(requested, key=feat.tap_level):
        _grid_for(*photos[tap].shape[-2:], k, tap)

    logger.info("Built reference store: %d pairs, taps %s, k=%d", len(pairs), ", ".join(taps), k)
    return ReferenceStore(
        ids=[p.pair_id for p in pairs],
        taps=taps,
        k=k,
        photo_maps=photos,
        sketch_maps=sketch_feats,
        sketches=sketch_batch,
    )


# ============ MATCHING ============

def preselect_references(query_signature: np.ndarray, store: ReferenceStore, k_ref: int = 5) -> List[int]:
    """Pair indices of the min(k_ref, N) most similar references, best first, ties to the lower index."""
    if k_ref < 1:
        raise ShapeError(f"k_ref must be at least 1, got {k_ref}")
    scores = store.signatures @ np.asarray(query_signature, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [int(i) for i in order[:min(k_ref, len(scores))]]


@dataclass
class MatchResult:
    tap: str
    grid: PatchGrid      # query geometry
    ref_grid: PatchGrid  # reference geometry
    pair_index: np.ndarray
    patch_index: np.ndarray
    score: np.ndarray

    def __len__(self) -> int:
        return len(self.pair_index)


def _normalize_patches(patches: np.ndarray) -> np.ndarray:
    flat = patches.reshape(len(patches), -1)
    norms = np.linalg.norm(flat, axis=1)
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return patches * scale[:, None, None, None]


def _best_in_reference(kernels: np.ndarray, ref_map: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per query patch, the best reference position and its cosine score."""
    k = kernels.shape[-1]
    corr = tensor.conv2d_valid(ref_map, kernels)  # m x rows x cols
    ones = np.ones((1,) + kernels.shape[1:], dtype=np.float64)
    energy = tensor.conv2d_valid(np.square(ref_map), ones)[0]
    norms = np.sqrt(np.maximum(energy, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(norms > 0, corr / norms, 0.0).reshape(len(kernels), -1)
    best = scores.argmax(axis=1)
    return best, scores[np.arange(len(kernels)), best]


def match_patches(grid: PatchGrid, patches: np.ndarray, store: ReferenceStore,
                  candidates: Sequence[int], tap: str) -> MatchResult:
    """
    Cosine best match of every query patch among the candidate references.

    The normalized query patches act as convolution kernels over each
    reference photo map; dividing by the reference window norms turns the
    correlation into cosine similarity. Ties go to the lower pair index, then
    the lower patch index. Zero-norm patches score 0.

    Args:
        grid: Query patch grid
        patches: Query patches, m x C x k x k
        store: Reference store
        candidates: Pair indices to search
        tap: Feature tap the patches come from

    Returns:
        MatchResult with one (pair, patch, score) triple per query patch
    """
    if len(candidates) == 0:
        raise SketchForgeError("match_patches needs at least one candidate reference")
    store.require_tap(tap)
    ref_maps = store.photo_maps[tap]
    for i in candidates:
        if not 0 <= i < len(store):
            raise DanglingMatchError(f"candidate pair {i} is outside the store (N={len(store)})")
    if patches.shape[1] != ref_maps.shape[1] or patches.shape[-1] != store.k:
        raise ShapeError(
            f"query patches {patches.shape[1:]} do not fit store tap '{tap}' "
            f"({ref_maps.shape[1]} channels, k={store.k})"
        )
    ref_grid = _grid_for(ref_maps.shape[2], ref_maps.shape[3], store.k, tap)

    kernels = _normalize_patches(np.asarray(patches, dtype=np.float64))
    ordered = sorted(int(i) for i in set(candidates))

    def run(i):
        return _best_in_reference(kernels, np.asarray(ref_maps[i], dtype=np.float64))

    workers = min(worker_count(), len(ordered))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, ordered))
    else:
        results = [run(i) for i in ordered]

    best_pair = np.full(grid.m, ordered[0], dtype=np.int64)
    best_patch = np.zeros(grid.m, dtype=np.int64)
    best_score = np.full(grid.m, -np.inf)
    for i, (positions, scores) in zip(ordered, results):
        better = scores > best_score
        best_pair[better] = i
        best_patch[better] = positions[better]
        best_score[better] = scores[better]

    return MatchResult(tap=tap, grid=grid, ref_grid=ref_grid, pair_index=best_pair,
                       patch_index=best_patch, score=np.clip(best_score, -1.0, 1.0))


def exhaustive_match(patches: np.ndarray, ref_maps: Sequence[np.ndarray], candidates: Sequence[int],
                     k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Double-loop cosine search with the same tie rule as match_patches; returns (pairs, patches, scores)."""
    m = len(patches)
    pairs = np.zeros(m, dtype=np.int64)
    positions = np.zeros(m, dtype=np.int64)
    scores = np.zeros(m)
    ordered = sorted(set(int(i) for i in candidates))
    ref_patches = {i: extract_patches(np.asarray(ref_maps[i], dtype=np.float64), k)[1] for i in ordered}
    for j in range(m):
        q = np.asarray(patches[j], dtype=np.float64).ravel()
        q_norm = np.linalg.norm(q)
        best = -np.inf
        for i in ordered:
            for jj, r in enumerate(ref_patches[i]):
                r = r.ravel()
                r_norm = np.linalg.norm(r)
                cos = float(q @ r) / (q_norm * r_norm) if q_norm > 0 and r_norm > 0 else 0.0
                if cos > best:
                    best, pairs[j], positions[j] = cos, i, jj
        scores[j] = best
    return pairs, positions, scores


# ============ PSEUDO FEATURES ============

@dataclass
class PseudoSketchFeature:
    """Matched sketch feature patches for every query patch at one tap."""
    tap: str
    grid: PatchGrid
    patches: np.ndarray  # m x C x k x k
    match: Optional[MatchResult] = None

    def fold(self) -> np.ndarray:
        """Reassemble the patches into a C x H x W map, averaging overlaps."""
        k, channels = self.grid.k, self.patches.shape[1]
        height, width = self.grid.rows + k - 1, self.grid.cols + k - 1
        acc = np.zeros((channels, height, width), dtype=np.float64)
        hits = np.zeros((height, width), dtype=np.float64)
        tiles = self.patches.reshape(self.grid.rows, self.grid.cols, channels, k, k)
        for a in range(k):
            for b in range(k):
                acc[:, a:a + self.grid.rows, b:b + self.grid.cols] += tiles[:, :, :, a, b].transpose(2, 0, 1)
                hits[a:a + self.grid.rows, b:b + self.grid.cols] += 1.0
        return acc / hits


def compose_pseudo_feature(match: MatchResult, store: ReferenceStore, tap: Optional[str] = None) -> PseudoSketchFeature:
    """Look up the sketch feature patch at every matched (pair, patch) position."""
    tap = tap or match.tap
    store.require_tap(tap)
    sketch_maps = store.sketch_maps[tap]
    ref_grid = _grid_for(sketch_maps.shape[2], sketch_maps.shape[3], store.k, tap)
    if np.any(match.pair_index >= len(store)) or np.any(match.pair_index < 0):
        raise DanglingMatchError(f"match points at pair {int(match.pair_index.max())}, store holds {len(store)}")
    if np.any(match.patch_index >= ref_grid.m) or np.any(match.patch_index < 0):
        raise DanglingMatchError(
            f"match points at patch {int(match.patch_index.max())}, reference grid holds {ref_grid.m}"
        )

    k = store.k
    windows = sliding_window_view(sketch_maps, (k, k), axis=(2, 3))  # N, C, rows, cols, k, k
    rows, cols = np.divmod(match.patch_index, ref_grid.cols)
    patches = windows[match.pair_index, :, rows, cols]  # m, C, k, k
    return PseudoSketchFeature(tap=tap, grid=match.grid, patches=np.ascontiguousarray(patches), match=match)


def generate_pseudo_features(photo_features: FeatureSet, store: ReferenceStore, taps: Iterable[str],
                             k_ref: int = 5) -> Dict[str, PseudoSketchFeature]:
    """Preselect references by relu5_1 signature, then match and compose at every requested tap."""
    candidates = preselect_references(feat.preselect_signature(photo_features), store, k_ref)
    pseudo = {}
    for tap in taps:
        grid, patches = extract_patches(photo_features[tap], store.k, tap)
        match = match_patches(grid, patches, store, candidates, tap)
        pseudo[tap] = compose_pseudo_feature(match, store, tap)
    return pseudo


# ============ PIXEL PROJECTION ============

def naive_reconstruction(match: MatchResult, store: ReferenceStore, out_shape: Tuple[int, int]) -> np.ndarray:
    """
    Paste, for every query patch, the sketch pixels under its matched reference patch.

    Feature position (r, c) at tap level l covers pixels [r * 2^(l-1), (r+1) * 2^(l-1)).
    Overlaps are averaged; pixels no patch reaches copy the nearest covered pixel.

    Returns:
        1 x H x W image
    """
    height, width = out_shape
    scale = 2 ** (feat.tap_level(match.tap) - 1)
    k, half = match.grid.k, match.grid.half
    ref_h, ref_w = store.sketches.shape[-2:]

    acc = np.zeros((height, width), dtype=np.float64)
    hits = np.zeros((height, width), dtype=np.float64)
    for j in range(match.grid.m):
        qr, qc = match.grid.center(j)
        rr, rc = match.ref_grid.center(int(match.patch_index[j]))
        sketch = store.sketches[int(match.pair_index[j]), 0]

        q_top, q_left = (qr - half) * scale, (qc - half) * scale
        r_top, r_left = (rr - half) * scale, (rc - half) * scale
        span_h = min(k * scale, height - q_top, ref_h - r_top)
        span_w = min(k * scale, width - q_left, ref_w - r_left)
        if span_h <= 0 or span_w <= 0:
            continue
        acc[q_top:q_top + span_h, q_left:q_left + span_w] += sketch[r_top:r_top + span_h, r_left:r_left + span_w]
        hits[q_top:q_top + span_h, q_left:q_left + span_w] += 1.0

    covered = hits > 0
    out = np.divide(acc, hits, out=np.zeros_like(acc), where=covered)
    if covered.any() and not covered.all():
        _, (near_r, near_c) = ndimage.distance_transform_edt(~covered, return_indices=True)
        out = out[near_r, near_c]
    return out[None].astype(np.float32)
