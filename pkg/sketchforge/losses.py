"""
Training objectives: pseudo sketch feature loss, LSGAN losses, total
variation, and the weighted generator/discriminator totals.

Every loss accepts autodiff `Var`s (returns a `Var` recorded on their tape)
or plain arrays (returns a float).
"""

import logging
import math
from typing import Mapping, Sequence, Union

import numpy as np

from sketchforge import autodiff as ad
from sketchforge.autodiff import Var
from sketchforge.config import LossWeights
from sketchforge.errors import NonFiniteError, ShapeError
from sketchforge.patchmatch import PseudoSketchFeature

logger = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "pseudo_feature_loss",
    "tv_loss",
    "lsgan_d_loss",
    "lsgan_g_loss",
    "generator_total",
    "discriminator_total",
]

Pseudo = Union[PseudoSketchFeature, np.ndarray, Sequence[PseudoSketchFeature]]


def _finish(result: Var, taped: bool):
    return result if taped else float(result.value)


def _as_batch(fm) -> Var:
    var = ad.constant(fm)
    if var.requires_grad or var.value.ndim >= 4:
        return var
    if var.value.ndim == 2:
        return ad.Var(var.value[None, None])
    return ad.Var(var.value[None])


def _targets(pseudo: Pseudo, batch: int) -> np.ndarray:
    """Stack pseudo patches into N x m x C x k x k."""
    if isinstance(pseudo, PseudoSketchFeature):
        stacked = pseudo.patches[None]
    elif isinstance(pseudo, np.ndarray):
        stacked = pseudo if pseudo.ndim == 5 else pseudo[None]
    else:
        stacked = np.stack([p.patches if isinstance(p, PseudoSketchFeature) else np.asarray(p) for p in pseudo])
    if stacked.shape[0] != batch:
        raise ShapeError(f"{stacked.shape[0]} pseudo targets for a batch of {batch}")
    return stacked


def pseudo_feature_loss(gen_features: Mapping[str, Union[Var, np.ndarray]], pseudo: Mapping[str, Pseudo],
                        weights: LossWeights = LossWeights()):
    """
    Sum over the selected layers of the squared L2 distance between every
    generated feature patch and its pseudo sketch patch.

    Args:
        gen_features: Feature maps of the generated sketch per tap, C x H x W or N x C x H x W
        pseudo: Pseudo sketch features per tap (one per sample for batches)
        weights: Supplies the layer set

    Returns:
        Per-sample sum averaged over the batch
    """
    taped = any(isinstance(v, Var) and v.requires_grad for v in gen_features.values())
    missing = [tap for tap in weights.taps if tap not in gen_features or tap not in pseudo]
    if missing:
        raise ShapeError(f"layer sets differ: no generated or pseudo features for {', '.join(missing)}")

    loss = None
    for tap in weights.taps:
        fm = gen_features[tap]
        if isinstance(fm, Var) and fm.value.ndim == 3:
            raise ShapeError(f"taped feature maps must be batched, got shape {fm.shape} at {tap}")
        fm = _as_batch(fm)
        per_sample = ad.patch_sq_error(fm, _targets(pseudo[tap], fm.shape[0]))
        term = ad.mean(per_sample)
        loss = term if loss is None else ad.add(loss, term)
    return _finish(loss, taped)


def tv_loss(image: Union[Var, np.ndarray]):
    """Squared neighbour differences of a 1 x H x W image (or a batch), summed per sample and averaged."""
    taped = isinstance(image, Var) and image.requires_grad
    image = _as_batch(image)
    if image.shape[-2] < 2 or image.shape[-1] < 2:
        raise ShapeError(f"tv_loss needs at least 2x2 pixels, got {image.shape[-2:]}")
    return _finish(ad.mean(ad.total_variation(image)), taped)


def lsgan_d_loss(d_real: Union[Var, np.ndarray], d_fake: Union[Var, np.ndarray]):
    """1/2 E[(D(y) - 1)^2] + 1/2 E[D(G(x))^2], expectations as means over every score cell."""
    taped = any(isinstance(v, Var) and v.requires_grad for v in (d_real, d_fake))
    d_real, d_fake = ad.constant(d_real), ad.constant(d_fake)
    real_term = ad.mean(ad.square(ad.sub(d_real, 1.0)))
    fake_term = ad.mean(ad.square(d_fake))
    return _finish(ad.add(ad.mul(real_term, 0.5), ad.mul(fake_term, 0.5)), taped)


def lsgan_g_loss(d_fake: Union[Var, np.ndarray]):
    taped = isinstance(d_fake, Var) and d_fake.requires_grad
    d_fake = ad.constant(d_fake)
    return _finish(ad.mean(ad.square(ad.sub(d_fake, 1.0))), taped)


def _check_finite(name: str, value) -> None:
    number = float(value.value) if isinstance(value, Var) else float(value)
    if not math.isfinite(number):
        raise NonFiniteError(f"loss component {name} is not finite ({number})")


def generator_total(l_p, l_gan_g, l_tv, weights: LossWeights = LossWeights()):
    """lambda_p * L_p + lambda_adv * L_GAN_G + lambda_tv * L_tv"""
    for name, value in (("L_p", l_p), ("L_GAN_G", l_gan_g), ("L_tv", l_tv)):
        _check_finite(name, value)
    if not any(isinstance(v, Var) for v in (l_p, l_gan_g, l_tv)):
        return weights.lambda_p * float(l_p) + weights.lambda_adv * float(l_gan_g) + weights.lambda_tv * float(l_tv)
    total = ad.mul(l_p, weights.lambda_p)
    total = ad.add(total, ad.mul(l_gan_g, weights.lambda_adv))
    return ad.add(total, ad.mul(l_tv, weights.lambda_tv))


def discriminator_total(l_gan_d):
    _check_finite("L_GAN_D", l_gan_d)
    return l_gan_d
