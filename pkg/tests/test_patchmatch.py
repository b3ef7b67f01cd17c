"""Tests for patch extraction, the reference store, and cosine patch matching."""

import numpy as np
import pytest

from sketchforge import patchmatch as pm
from sketchforge.errors import DanglingMatchError, ShapeError, SketchForgeError, VersionMismatchError
from sketchforge.features import FeatureSet, preselect_signature
from sketchforge.losses import LossWeights, pseudo_feature_loss
from sketchforge.selfcheck import matcher_oracle, random_store, self_match_identity


class TestPatches:

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_patch_count(self, k):
        half = k // 2
        for height in range(5, 13):
            for width in range(5, 13):
                grid, patches = pm.extract_patches(np.zeros((2, height, width)), k)
                assert grid.m == (height - 2 * half) * (width - 2 * half)
                assert patches.shape == (grid.m, 2, k, k)

    def test_patch_content_and_centers(self, rng):
        fm = rng.standard_normal((3, 6, 7))
        grid, patches = pm.extract_patches(fm, 3)
        j = grid.index(2, 4)
        np.testing.assert_array_equal(patches[j], fm[:, 2:5, 4:7])
        assert grid.center(j) == (3, 5)

    def test_even_k(self):
        with pytest.raises(ShapeError):
            pm.extract_patches(np.zeros((1, 6, 6)), 2)

    def test_k_larger_than_map(self):
        with pytest.raises(ShapeError):
            pm.extract_patches(np.zeros((1, 2, 6)), 3)

    def test_fold_inverts_extraction(self, rng):
        fm = rng.standard_normal((2, 6, 5))
        grid, patches = pm.extract_patches(fm, 3, "relu3_1")
        folded = pm.PseudoSketchFeature("relu3_1", grid, patches).fold()
        np.testing.assert_allclose(folded, fm, atol=1e-12)


class TestMatcher:

    def test_oracle_equivalence(self):
        assert matcher_oracle(instances=120, seed=3) == 0

    def test_tie_goes_to_lower_pair(self, rng):
        store = random_store(rng, 2, 5, 5, 3)
        store.photo_maps["relu3_1"][2] = store.photo_maps["relu3_1"][0]
        grid, patches = pm.extract_patches(store.photo_maps["relu3_1"][0], 3)
        result = pm.match_patches(grid, patches, store, [2, 0], "relu3_1")
        np.testing.assert_array_equal(result.pair_index, 0)
        np.testing.assert_array_equal(result.patch_index, np.arange(grid.m))
        np.testing.assert_allclose(result.score, 1.0, atol=1e-9)

    def test_zero_patch_scores_zero(self, rng):
        store = random_store(rng, 2, 5, 5, 2)
        grid, patches = pm.extract_patches(np.zeros((2, 3, 3)), 3)
        result = pm.match_patches(grid, patches, store, [1, 0], "relu3_1")
        assert (result.pair_index[0], result.patch_index[0], result.score[0]) == (0, 0, 0.0)

    def test_scaling_maps_keeps_the_match(self, rng):
        store = random_store(rng, 3, 7, 7, 3)
        query = rng.standard_normal((3, 6, 6))
        grid, patches = pm.extract_patches(query, 3)
        base = pm.match_patches(grid, patches, store, [0, 1, 2], "relu3_1")

        scaled_query = pm.match_patches(grid, 7.0 * patches, store, [0, 1, 2], "relu3_1")
        store.photo_maps["relu3_1"] = 7.0 * store.photo_maps["relu3_1"]
        scaled_store = pm.match_patches(grid, patches, store, [0, 1, 2], "relu3_1")
        for result in (scaled_query, scaled_store):
            np.testing.assert_array_equal(result.pair_index, base.pair_index)
            np.testing.assert_array_equal(result.patch_index, base.patch_index)
            np.testing.assert_allclose(result.score, base.score, atol=1e-12)

    def test_empty_candidates(self, rng):
        store = random_store(rng, 2, 5, 5, 2)
        grid, patches = pm.extract_patches(rng.standard_normal((2, 4, 4)), 3)
        with pytest.raises(SketchForgeError):
            pm.match_patches(grid, patches, store, [], "relu3_1")

    def test_candidate_outside_store(self, rng):
        store = random_store(rng, 2, 5, 5, 2)
        grid, patches = pm.extract_patches(rng.standard_normal((2, 4, 4)), 3)
        with pytest.raises(DanglingMatchError):
            pm.match_patches(grid, patches, store, [0, 5], "relu3_1")

    def test_channel_mismatch(self, rng):
        store = random_store(rng, 2, 5, 5, 2)
        grid, patches = pm.extract_patches(rng.standard_normal((3, 4, 4)), 3)
        with pytest.raises(ShapeError):
            pm.match_patches(grid, patches, store, [0], "relu3_1")

    def test_dangling_composition(self, rng):
        store = random_store(rng, 2, 5, 5, 2)
        grid, patches = pm.extract_patches(rng.standard_normal((2, 4, 4)), 3)
        result = pm.match_patches(grid, patches, store, [0, 1], "relu3_1")
        result.pair_index[0] = 7
        with pytest.raises(DanglingMatchError):
            pm.compose_pseudo_feature(result, store)


class TestPreselection:

    def test_order_and_ties(self, rng):
        store = random_store(rng, 1, 3, 3, 4)
        store.signatures = np.array([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8], [1.0, 0.0]])
        assert pm.preselect_references(np.array([1.0, 0.0]), store, k_ref=3) == [1, 3, 2]

    def test_k_ref_beyond_store(self, rng):
        store = random_store(rng, 1, 3, 3, 2)
        store.signatures = np.eye(2)
        assert pm.preselect_references(np.array([0.0, 1.0]), store, k_ref=5) == [1, 0]

    def test_k_ref_zero(self, rng):
        store = random_store(rng, 1, 3, 3, 2)
        with pytest.raises(ShapeError):
            pm.preselect_references(np.zeros(1), store, k_ref=0)

    def test_scaling_the_map_keeps_the_order(self, rng):
        store = random_store(rng, 1, 3, 3, 6)
        signatures = []
        for i in range(6):
            fm = np.abs(rng.standard_normal((4, 2, 2)))
            signatures.append(preselect_signature(FeatureSet({"relu5_1": fm}, source_id=f"r{i}")))
        store.signatures = np.stack(signatures)
        query = np.abs(rng.standard_normal((4, 2, 2)))
        plain = preselect_signature(FeatureSet({"relu5_1": query}, source_id="q"))
        scaled = preselect_signature(FeatureSet({"relu5_1": 7.0 * query}, source_id="q"))
        np.testing.assert_allclose(scaled, plain, atol=1e-15)
        assert pm.preselect_references(scaled, store, k_ref=6) == pm.preselect_references(plain, store, k_ref=6)

    def test_restricted_equals_unrestricted_when_best_is_kept(self, rng):
        for _ in range(10):
            store = random_store(rng, 3, 7, 7, 8)
            store.signatures = rng.standard_normal((8, 4))
            grid, patches = pm.extract_patches(rng.standard_normal((3, 7, 7)), 3)
            kept = pm.preselect_references(rng.standard_normal(4), store, k_ref=5)
            full = pm.match_patches(grid, patches, store, range(8), "relu3_1")
            restricted = pm.match_patches(grid, patches, store, kept, "relu3_1")
            inside = np.isin(full.pair_index, kept)
            np.testing.assert_array_equal(restricted.pair_index[inside], full.pair_index[inside])
            np.testing.assert_array_equal(restricted.patch_index[inside], full.patch_index[inside])
            np.testing.assert_array_equal(restricted.score[inside], full.score[inside])


class TestReferenceStore:

    def test_self_match_identity(self):
        assert self_match_identity(count=5, size=64, seed=0) == 1.0

    def test_self_match_gives_zero_loss(self, extractor, distinct_pairs):
        weights = LossWeights(layers=(3, 4))
        store = pm.build_reference_store(distinct_pairs, extractor, weights.taps)
        photo = FeatureSet({tap: fm[2] for tap, fm in store.photo_maps.items()}, "pair02")
        pseudo = pm.generate_pseudo_features(photo, store, weights.taps, k_ref=5)
        sketch = {tap: fm[2:3] for tap, fm in store.sketch_maps.items()}
        assert pseudo_feature_loss(sketch, pseudo, weights) == pytest.approx(0.0, abs=1e-10)

    def test_taps_include_signature(self, extractor, face_pairs):
        store = pm.build_reference_store(face_pairs[:2], extractor, ["relu3_1"])
        assert store.taps == ("relu3_1", "relu5_1")
        assert store.signatures.shape[0] == 2

    def test_extent_mismatch_names_pair(self, extractor, face_pairs):
        odd = pm.ReferencePair(face_pairs[0].photo[:, :32, :], face_pairs[0].sketch[:, :32, :], "short")
        with pytest.raises(ShapeError, match="short"):
            pm.build_reference_store([face_pairs[1], odd], extractor, ["relu3_1"])

    def test_save_and_load(self, tmp_path, extractor, face_pairs):
        store = pm.build_reference_store(face_pairs[:3], extractor, ["relu3_1", "relu4_1"])
        store.save(tmp_path / "refs.skrs")
        loaded = pm.ReferenceStore.load(tmp_path / "refs.skrs")
        assert loaded.ids == store.ids and loaded.taps == store.taps and loaded.k == 3
        np.testing.assert_array_equal(loaded.photo_maps["relu4_1"], store.photo_maps["relu4_1"])
        np.testing.assert_allclose(loaded.sketches, store.sketches, atol=0.5 / 255 + 1e-7)
        np.testing.assert_allclose(loaded.signatures, store.signatures, atol=1e-12)

    def test_version_mismatch(self, tmp_path, extractor, face_pairs):
        path = tmp_path / "refs.skrs"
        pm.build_reference_store(face_pairs[:1], extractor, ["relu3_1"]).save(path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            pm.ReferenceStore.load(path)


class TestNaiveReconstruction:

    def test_self_match_recovers_sketch(self, extractor, distinct_pairs):
        store = pm.build_reference_store(distinct_pairs, extractor, ["relu1_1"])
        photo = FeatureSet({tap: fm[1] for tap, fm in store.photo_maps.items()}, "pair01")
        match = pm.generate_pseudo_features(photo, store, ["relu1_1"])["relu1_1"].match
        image = pm.naive_reconstruction(match, store, (64, 64))
        assert image.shape == (1, 64, 64)
        np.testing.assert_allclose(image, store.sketches[1], atol=1e-6)

    def test_deep_tap_fills_every_pixel(self, extractor, face_pairs):
        store = pm.build_reference_store(face_pairs, extractor, ["relu3_1"])
        photo = FeatureSet({tap: fm[0] for tap, fm in store.photo_maps.items()}, "pair00")
        match = pm.generate_pseudo_features(photo, store, ["relu3_1"])["relu3_1"].match
        image = pm.naive_reconstruction(match, store, (64, 64))
        assert image.shape == (1, 64, 64)
        assert np.all((image >= 0.0) & (image <= 1.0))
