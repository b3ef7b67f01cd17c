"""Point values and contracts of the training objectives."""

import numpy as np
import pytest
from pydantic import ValidationError

from sketchforge.autodiff import Tape, Var
from sketchforge.errors import NonFiniteError, ShapeError, UnknownComponentError
from sketchforge.losses import (
    LossWeights,
    discriminator_total,
    generator_total,
    lsgan_d_loss,
    lsgan_g_loss,
    pseudo_feature_loss,
    tv_loss,
)
from sketchforge.patchmatch import extract_patches


class TestTotalVariation:

    def test_constant_image(self):
        assert tv_loss(np.full((1, 5, 4), 0.3)) == 0.0

    def test_checkerboard(self):
        assert tv_loss(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(4.0)

    def test_batch_mean(self):
        batch = np.stack([np.zeros((1, 2, 2)), np.array([[[0.0, 1.0], [1.0, 0.0]]])])
        assert tv_loss(batch) == pytest.approx(2.0)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            tv_loss(np.zeros((1, 1, 5)))


class TestAdversarial:

    @pytest.mark.parametrize("real, fake, expected", [(1.0, 0.0, 0.0), (0.5, 0.5, 0.25), (0.0, 1.0, 1.0)])
    def test_discriminator(self, real, fake, expected):
        assert lsgan_d_loss(np.array(real), np.array(fake)) == pytest.approx(expected)

    def test_generator(self):
        assert lsgan_g_loss(np.array([1.0, 1.0])) == 0.0
        assert lsgan_g_loss(np.array([0.0, 0.5])) == pytest.approx((1.0 + 0.25) / 2)

    def test_score_maps_averaged(self):
        real = np.ones((2, 1, 4, 4))
        fake = np.full((2, 1, 4, 4), 0.5)
        assert lsgan_d_loss(real, fake) == pytest.approx(0.125)


class TestComposition:

    def test_hand_arithmetic(self):
        total = generator_total(1.0, 2.0, 3.0, LossWeights(lambda_tv=1e-5))
        assert total == pytest.approx(1.0 + 2000.0 + 3e-5, rel=1e-15)

    def test_non_finite_names_component(self):
        with pytest.raises(NonFiniteError, match="L_GAN_G"):
            generator_total(1.0, float("nan"), 0.0)

    def test_discriminator_total(self):
        assert discriminator_total(0.25) == 0.25
        with pytest.raises(NonFiniteError, match="L_GAN_D"):
            discriminator_total(float("inf"))

    def test_taped_inputs_give_var(self):
        tape = Tape()
        d_fake = tape.leaf("d", np.full((1, 1, 2, 2), 0.5))
        out = generator_total(0.0, lsgan_g_loss(d_fake), 0.0)
        assert isinstance(out, Var) and out.item() == pytest.approx(250.0)


class TestPseudoFeatureLoss:

    def test_hand_value(self):
        weights = LossWeights(layers=(3,))
        gen = {"relu3_1": np.zeros((1, 1, 3, 3))}
        pseudo = {"relu3_1": np.ones((1, 1, 1, 3, 3))}
        assert pseudo_feature_loss(gen, pseudo, weights) == pytest.approx(9.0)

    def test_layers_are_summed(self):
        weights = LossWeights(layers=(3, 4))
        gen = {"relu3_1": np.zeros((1, 2, 4, 4)), "relu4_1": np.zeros((1, 2, 3, 3))}
        pseudo = {"relu3_1": np.ones((1, 4, 2, 3, 3)), "relu4_1": np.full((1, 1, 2, 3, 3), 2.0)}
        assert pseudo_feature_loss(gen, pseudo, weights) == pytest.approx(4 * 18 + 18 * 4)

    def test_identical_features(self, rng):
        fm = rng.standard_normal((2, 5, 5))
        _, patches = extract_patches(fm, 3)
        weights = LossWeights(layers=(4,))
        assert pseudo_feature_loss({"relu4_1": fm}, {"relu4_1": patches}, weights) == pytest.approx(0.0)

    def test_layer_sets_differ(self):
        weights = LossWeights(layers=(3, 4))
        with pytest.raises(ShapeError, match="layer sets differ"):
            pseudo_feature_loss({"relu3_1": np.zeros((1, 1, 3, 3))}, {"relu3_1": np.zeros((1, 1, 1, 3, 3))}, weights)

    def test_grid_mismatch(self):
        weights = LossWeights(layers=(3,))
        with pytest.raises(ShapeError):
            pseudo_feature_loss({"relu3_1": np.zeros((1, 1, 4, 4))}, {"relu3_1": np.zeros((1, 1, 1, 3, 3))}, weights)


class TestWeights:

    def test_defaults(self):
        weights = LossWeights()
        assert (weights.lambda_p, weights.lambda_adv, weights.lambda_tv) == (1.0, 1e3, 1e-5)
        assert weights.taps == ("relu3_1", "relu4_1", "relu5_1")

    def test_presets(self):
        assert LossWeights.preset("cufsf").lambda_tv == 1e-2
        assert LossWeights.preset("CUFS", lambda_adv=0.0).lambda_adv == 0.0

    def test_unknown_preset(self):
        with pytest.raises(UnknownComponentError):
            LossWeights.preset("celeba")

    def test_layer_range(self):
        with pytest.raises(ValidationError):
            LossWeights(layers=(0, 3))

    def test_negative_weight(self):
        with pytest.raises(ValidationError):
            LossWeights(lambda_p=-1.0)
