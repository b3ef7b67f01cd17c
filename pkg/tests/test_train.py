"""Tests for the networks, Adam, augmentation, checkpoints and the training loop."""

import numpy as np
import pytest

from sketchforge import patchmatch as pm
from sketchforge import synthetic
from sketchforge import train as tr
from sketchforge.autodiff import Var
from sketchforge.config import AugmentConfig, LossWeights, TrainConfig
from sketchforge.errors import (
    MagicMismatchError,
    NonFiniteError,
    RangeError,
    ShapeError,
    TrainingDiverged,
    UnknownComponentError,
)


def tiny_config(**overrides) -> TrainConfig:
    settings = dict(
        batch_size=2,
        iterations=2,
        gen_features=4,
        gen_blocks=1,
        disc_features=2,
        k_ref=2,
        log_every=1,
        augment=AugmentConfig.off(),
        weights=LossWeights(layers=(3,)),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture(scope="module")
def tiny_setup():
    extractor = synthetic.small_extractor(widths=(4, 4, 8, 8, 8), seed=1)
    pairs = synthetic.reference_pairs(3, (32, 32), seed=5)
    store = pm.build_reference_store(pairs, extractor, ["relu3_1"])
    return extractor, store, [pair.photo for pair in pairs]


class TestNetworks:

    def test_generator_extent_and_range(self):
        net = tr.GeneratorNet.init(features=4, blocks=2, seed=0)
        out = tr.generator_forward(net, synthetic.face_photo((20, 24)))
        assert out.shape == (1, 20, 24)
        assert np.all((out > 0) & (out < 1))

    def test_generator_batch(self):
        net = tr.GeneratorNet.init(features=4, blocks=1)
        photos = np.stack([synthetic.face_photo((16, 16), seed=s) for s in range(3)])
        assert tr.generator_forward(net, photos).shape == (3, 1, 16, 16)

    def test_generator_gray_input(self):
        net = tr.GeneratorNet.init(features=4, blocks=1)
        assert tr.generator_forward(net, synthetic.face_photo((16, 16), channels=1)).shape == (1, 16, 16)

    def test_generator_rejects_out_of_range(self):
        net = tr.GeneratorNet.init(features=4, blocks=1)
        with pytest.raises(RangeError):
            tr.generator_forward(net, np.full((3, 8, 8), 2.0))

    def test_parameter_names(self):
        net = tr.GeneratorNet.init(features=4, blocks=2)
        assert {"stem.w", "block1.conv2.b", "head.w"} <= set(net.params)

    def test_discriminator_score_map(self):
        disc = tr.DiscriminatorNet.init(features=2)
        scores = disc.forward(Var(np.zeros((2, 1, 64, 64), dtype=np.float32)),
                              {k: Var(v) for k, v in disc.params.items()})
        assert scores.shape == (2, 1, 8, 8)

    def test_zero_head_gives_constant_half(self, rng):
        net = tr.GeneratorNet.init(features=4, blocks=2, seed=0)
        net.params["head.w"] = np.zeros_like(net.params["head.w"])
        net.params["head.b"] = np.zeros_like(net.params["head.b"])
        out = tr.generator_forward(net, rng.uniform(0, 1, (3, 12, 10)))
        np.testing.assert_array_equal(out, np.full((1, 12, 10), 0.5, dtype=out.dtype))

    def test_seeds_differ_between_networks(self):
        assert not np.array_equal(tr.GeneratorNet.init(4, 1, seed=0).params["stem.w"],
                                  tr.GeneratorNet.init(4, 1, seed=1).params["stem.w"])


class TestAdam:

    def test_first_step(self):
        params = {"w": np.array([1.0])}
        new, state = tr.adam_step(params, {"w": np.array([1.0])}, tr.AdamState(), lr=0.1)
        np.testing.assert_allclose(new["w"], [1.0 - 0.1 / (1.0 + 1e-8)], rtol=0, atol=1e-15)
        assert state.t == 1
        np.testing.assert_array_equal(params["w"], [1.0])

    def test_missing_gradient_is_zero(self):
        params = {"w": np.ones(2), "b": np.ones(1)}
        new, _ = tr.adam_step(params, {"w": np.ones(2)}, tr.AdamState(), lr=0.1)
        np.testing.assert_array_equal(new["b"], [1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tr.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, tr.AdamState(), lr=0.1)

    def test_keeps_dtype(self):
        new, _ = tr.adam_step({"w": np.ones(2, dtype=np.float32)}, {"w": np.ones(2)}, tr.AdamState(), lr=0.1)
        assert new["w"].dtype == np.float32

    def test_repeated_runs_match_bitwise(self):
        def run():
            params = {"w": np.linspace(-1.0, 1.0, 6, dtype=np.float32)}
            state = tr.AdamState()
            for step in range(10):
                grads = {"w": np.sin(params["w"].astype(np.float64) * (step + 1))}
                params, state = tr.adam_step(params, grads, state, lr=1e-2)
            return params["w"], state

        (first, first_state), (second, second_state) = run(), run()
        assert first.tobytes() == second.tobytes()
        assert first_state.m["w"].tobytes() == second_state.m["w"].tobytes()
        assert first_state.v["w"].tobytes() == second_state.v["w"].tobytes()


class TestSchedule:

    def test_drops(self):
        config = TrainConfig(iterations=100, lr_max=1e-3, lr_min=1e-6)
        assert tr.learning_rate(0, config) == pytest.approx(1e-3)
        assert tr.learning_rate(39, config) == pytest.approx(1e-3)
        assert tr.learning_rate(40, config) == pytest.approx(1e-4)
        assert tr.learning_rate(80, config) == pytest.approx(1e-5)

    def test_floor(self):
        config = TrainConfig(iterations=100, lr_max=1e-3, lr_min=5e-4)
        assert tr.learning_rate(90, config) == pytest.approx(5e-4)


class TestAugmentation:

    def test_identity(self, rng):
        photo = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(tr.apply_color_jitter(photo), photo)

    def test_clamped_and_typed(self, rng):
        photo = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
        out = tr.apply_color_jitter(photo, brightness=0.5, contrast=1.2, saturation=0.8, sharpness=1.2)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_saturation_skips_gray(self, rng):
        photo = rng.uniform(0, 1, (1, 8, 8))
        np.testing.assert_array_equal(tr.apply_color_jitter(photo, saturation=0.5), photo)

    def test_deterministic_per_seed(self, rng):
        photo = rng.uniform(0, 1, (3, 8, 8))
        a = tr.augment(photo, np.random.default_rng(3))
        b = tr.augment(photo, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_brightness_clips_at_one(self):
        photo = np.full((3, 4, 4), 0.9, dtype=np.float32)
        np.testing.assert_array_equal(tr.apply_color_jitter(photo, brightness=0.2), np.ones((3, 4, 4)))


class TestCheckpoint:

    def test_round_trip(self, tmp_path):
        gen = tr.GeneratorNet.init(4, 1)
        disc = tr.DiscriminatorNet.init(2)
        state = tr.AdamState(t=3, m={"stem.b": np.full(4, 0.5)}, v={"stem.b": np.full(4, 0.25)})
        checkpoint = tr.Checkpoint(7, tiny_config(), gen.params, disc.params, state, tr.AdamState())
        checkpoint.save(tmp_path / "c.skck")
        loaded = tr.Checkpoint.load(tmp_path / "c.skck")
        assert loaded.iteration == 7 and loaded.config == checkpoint.config
        np.testing.assert_array_equal(loaded.generator["head.w"], gen.params["head.w"])
        assert loaded.generator_adam.t == 3
        np.testing.assert_allclose(loaded.generator_adam.v["stem.b"], 0.25)

    def test_synthesize(self, tmp_path):
        gen = tr.GeneratorNet.init(4, 1)
        checkpoint = tr.Checkpoint(0, tiny_config(gen_features=4, gen_blocks=1), gen.params, {})
        photo = synthetic.face_photo((25, 20))
        np.testing.assert_allclose(tr.synthesize(checkpoint, photo), tr.generator_forward(gen, photo), atol=1e-6)

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.skck").write_bytes(b"SKRS\x01\x00\x00\x00")
        with pytest.raises(MagicMismatchError):
            tr.Checkpoint.load(tmp_path / "x.skck")


class TestTraining:

    def test_zero_iterations(self, tmp_path, tiny_setup):
        extractor, store, photos = tiny_setup
        history = tr.train(tiny_config(iterations=0), photos, store, extractor, checkpoint_dir=tmp_path)
        assert history.empty and list(history.columns) == tr.HISTORY_COLUMNS
        assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_000000.skck", "latest.skck"]

    def test_history_and_checkpoints(self, tmp_path, tiny_setup):
        extractor, store, photos = tiny_setup
        history = tr.train(tiny_config(iterations=3, checkpoint_every=2), photos, store, extractor,
                           checkpoint_dir=tmp_path)
        assert list(history["iter"]) == [1, 2, 3]
        assert np.all(np.isfinite(history[["L_p", "L_GAN_G", "L_GAN_D", "L_tv"]].to_numpy()))
        names = {p.name for p in tmp_path.iterdir()}
        assert {"checkpoint_000000.skck", "checkpoint_000002.skck", "checkpoint_000003.skck"} <= names
        assert tr.Checkpoint.load(tmp_path / "latest.skck").iteration == 3

    def test_deterministic(self, tiny_setup):
        extractor, store, photos = tiny_setup
        config = tiny_config(augment=AugmentConfig())
        first = tr.train(config, photos, store, extractor)
        second = tr.train(config, photos, store, extractor)
        assert first.equals(second)

    def test_alternates_discriminator_then_generator(self, monkeypatch, tiny_setup):
        extractor, store, photos = tiny_setup
        calls = []
        original = tr.ParamTape.step

        def recording_step(self, grads, lr):
            calls.append("G" if "stem.w" in self.params else "D")
            original(self, grads, lr)

        monkeypatch.setattr(tr.ParamTape, "step", recording_step)
        tr.train(tiny_config(iterations=3), photos, store, extractor)
        assert calls == ["D", "G"] * 3

    def test_each_step_leaves_the_other_network_unchanged(self, monkeypatch, tiny_setup):
        extractor, store, photos = tiny_setup
        tapes = {}
        changes = []
        original_bind, original_step = tr.ParamTape.bind, tr.ParamTape.step

        def recording_bind(self):
            tapes["G" if "stem.w" in self.params else "D"] = self
            return original_bind(self)

        def recording_step(self, grads, lr):
            before = {name: tape.checksum() for name, tape in tapes.items()}
            original_step(self, grads, lr)
            after = {name: tape.checksum() for name, tape in tapes.items()}
            changes.append(sorted(name for name in before if before[name] != after[name]))

        monkeypatch.setattr(tr.ParamTape, "bind", recording_bind)
        monkeypatch.setattr(tr.ParamTape, "step", recording_step)
        tr.train(tiny_config(iterations=2), photos, store, extractor)
        assert changes == [["D"], ["G"]] * 2

    def test_ten_iterations_match_bitwise(self, tmp_path, tiny_setup):
        extractor, store, photos = tiny_setup
        config = tiny_config(iterations=10, checkpoint_every=0, augment=AugmentConfig())
        tr.train(config, photos, store, extractor, checkpoint_dir=tmp_path / "a")
        tr.train(config, photos, store, extractor, checkpoint_dir=tmp_path / "b")
        assert (tmp_path / "a" / "latest.skck").read_bytes() == (tmp_path / "b" / "latest.skck").read_bytes()

    def test_thread_count_does_not_change_results(self, tmp_path, monkeypatch, tiny_setup):
        extractor, store, photos = tiny_setup
        config = tiny_config(iterations=3, checkpoint_every=0)
        histories = []
        for threads in ("1", "4"):
            monkeypatch.setenv("SKETCHFORGE_THREADS", threads)
            histories.append(tr.train(config, photos, store, extractor, checkpoint_dir=tmp_path / threads))
        assert histories[0].equals(histories[1])
        assert (tmp_path / "1" / "latest.skck").read_bytes() == (tmp_path / "4" / "latest.skck").read_bytes()

    def test_missing_store_tap(self, tiny_setup):
        extractor, store, photos = tiny_setup
        with pytest.raises(UnknownComponentError):
            tr.train(tiny_config(weights=LossWeights(layers=(2,))), photos, store, extractor)

    def test_patch_size_mismatch(self, tiny_setup):
        extractor, store, photos = tiny_setup
        with pytest.raises(ShapeError, match="k=3"):
            tr.train(tiny_config(patch_k=5), photos, store, extractor)

    def test_mixed_extents(self, tiny_setup):
        extractor, store, photos = tiny_setup
        with pytest.raises(ShapeError):
            tr.train(tiny_config(), [photos[0], photos[1][:, :16, :]], store, extractor)

    def test_divergence_keeps_last_checkpoint(self, tmp_path, monkeypatch, tiny_setup):
        extractor, store, photos = tiny_setup

        def exploding(*args, **kwargs):
            raise NonFiniteError("loss component L_p is not finite (nan)")

        monkeypatch.setattr(tr, "generator_total", exploding)
        with pytest.raises(TrainingDiverged, match="iteration 1"):
            tr.train(tiny_config(), photos, store, extractor, checkpoint_dir=tmp_path)
        assert tr.Checkpoint.load(tmp_path / "latest.skck").iteration == 0

    @pytest.mark.slow
    def test_pseudo_feature_loss_converges_at_fixed_lr_with_batch_4(self):
        extractor = synthetic.small_extractor(seed=0)
        pairs = synthetic.reference_pairs(5, (64, 64), seed=0)
        weights = LossWeights(lambda_adv=0.0, lambda_tv=0.0)
        store = pm.build_reference_store(pairs, extractor, weights.taps)
        config = TrainConfig(
            batch_size=4, iterations=200, lr_max=2e-3, lr_min=2e-3, gen_features=16, gen_blocks=2,
            disc_features=4, augment=AugmentConfig.off(), weights=weights, seed=0,
        )
        history = tr.train(config, [pair.photo for pair in pairs], store, extractor)
        start = history["L_p"].iloc[:10].mean()
        end = history["L_p"].iloc[-10:].mean()
        assert end <= 0.5 * start


class TestGradientCheckReport:

    def test_report_fields(self):
        report = tr.gradient_check("tv_loss", trials=1)
        assert report.component == "tv_loss" and report.precision == "float64"
        assert report.tolerance == 1e-6 and report.passed
