"""
Self-verification suite behind `sketchforge selfcheck`: finite-difference
gradient checks, the exhaustive matcher oracle, and self-match identity on a
synthetic reference store.
"""

import logging
from typing import List

import numpy as np
import pandas as pd

from sketchforge import patchmatch as pm
from sketchforge import synthetic
from sketchforge.features import FeatureSet
from sketchforge.losses import LossWeights, pseudo_feature_loss
from sketchforge.train import GRADIENT_COMPONENTS, KINKED_COMPONENTS, gradient_check

logger = logging.getLogger(__name__)

FLOAT32_COMPONENTS = tuple(name for name in GRADIENT_COMPONENTS if name not in KINKED_COMPONENTS)


def random_store(rng: np.random.Generator, channels: int, height: int, width: int, count: int,
                 k: int = 3, tap: str = "relu3_1") -> pm.ReferenceStore:
    """A store of random photo maps at one tap; sketch maps and images are unused placeholders."""
    maps = rng.standard_normal((count, channels, height, width))
    return pm.ReferenceStore(
        ids=[f"r{i}" for i in range(count)],
        taps=(tap,),
        k=k,
        photo_maps={tap: maps},
        sketch_maps={tap: maps.copy()},
        sketches=np.zeros((count, 1, height, width), dtype=np.float32),
        signatures=np.zeros((count, 1)),
    )


def matcher_oracle(instances: int = 100, seed: int = 0) -> int:
    """
    Compare match_patches with the double-loop cosine search on random
    instances (C <= 4, H, W <= 10, N <= 3, k = 3).

    Returns:
        Number of instances that disagree
    """
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(instances):
        channels = int(rng.integers(1, 5))
        height, width = int(rng.integers(3, 11)), int(rng.integers(3, 11))
        count = int(rng.integers(1, 4))
        store = random_store(rng, channels, height, width, count)
        query = rng.standard_normal((channels, int(rng.integers(3, 11)), int(rng.integers(3, 11))))
        grid, patches = pm.extract_patches(query, 3, "relu3_1")
        candidates = list(range(count))

        result = pm.match_patches(grid, patches, store, candidates, "relu3_1")
        pairs, positions, scores = pm.exhaustive_match(patches, store.photo_maps["relu3_1"], candidates, 3)
        same = (np.array_equal(result.pair_index, pairs) and np.array_equal(result.patch_index, positions)
                and np.allclose(result.score, scores, atol=1e-5))
        failures += not same
    return failures


def self_match_identity(count: int = 5, size: int = 64, seed: int = 0) -> float:
    """
    Match every reference photo of a distinct-patch store against the store.

    Returns:
        Fraction of patches whose match is the patch itself; 1.0 when the property holds
    """
    pairs = synthetic.reference_pairs(count, (size, size), seed=seed, distinct=True)
    extractor = synthetic.small_extractor(seed=seed)
    weights = LossWeights(layers=(3,))
    store = pm.build_reference_store(pairs, extractor, weights.taps, k=3)

    hits, total = 0, 0
    for i, pair in enumerate(pairs):
        photo_maps = {tap: fm[i] for tap, fm in store.photo_maps.items()}
        pseudo = pm.generate_pseudo_features(FeatureSet(photo_maps, pair.pair_id), store, weights.taps, k_ref=count)
        match = pseudo["relu3_1"].match
        hits += int(np.sum((match.pair_index == i) & (match.patch_index == np.arange(match.grid.m))))
        total += match.grid.m

        sketch_maps = {tap: fm[i:i + 1] for tap, fm in store.sketch_maps.items()}
        loss = pseudo_feature_loss(sketch_maps, pseudo, weights)
        if loss > 1e-8:
            logger.warning("Pair %s: pseudo feature loss %.3g on its own sketch", pair.pair_id, loss)
            return 0.0
    return hits / total


def run_selfcheck(quick: bool = False, seed: int = 0) -> pd.DataFrame:
    """
    Run every check and collect one row per check.

    Args:
        quick: Fewer random trials
        seed: Seed for all random instances

    Returns:
        DataFrame with columns check, passed, detail
    """
    rows: List[dict] = []
    trials = 1 if quick else 3
    for component in GRADIENT_COMPONENTS:
        precisions = ["float64"] + (["float32"] if component in FLOAT32_COMPONENTS else [])
        for precision in precisions:
            report = gradient_check(component, trials=trials, precision=precision, seed=seed)
            rows.append({
                "check": f"gradient/{component}/{precision}",
                "passed": report.passed,
                "detail": (f"max rel error {report.max_rel_error:.2e} (tolerance {report.tolerance:.0e}), "
                           f"{report.skipped} of {report.checked} elements skipped at kinks"),
            })

    instances = 20 if quick else 100
    failures = matcher_oracle(instances, seed)
    rows.append({"check": "matcher/oracle", "passed": failures == 0,
                 "detail": f"{failures} of {instances} instances disagree"})

    fraction = self_match_identity(seed=seed)
    rows.append({"check": "matcher/self-match", "passed": fraction == 1.0,
                 "detail": f"{fraction:.1%} of patches matched themselves"})

    results = pd.DataFrame(rows, columns=["check", "passed", "detail"])
    logger.info("Selfcheck: %d of %d checks passed", int(results["passed"].sum()), len(results))
    return results
