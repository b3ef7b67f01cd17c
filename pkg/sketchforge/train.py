"""
Training
Residual generator, patch discriminator, Adam, color-space augmentation,
the alternating D/G loop driven by pseudo sketch features, checkpoints, and
finite-difference gradient checks.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from sketchforge import autodiff as ad
from sketchforge import tensor
from sketchforge.autodiff import Tape, Var
from sketchforge.config import AugmentConfig, LossWeights, TrainConfig
from sketchforge.errors import (
    NonFiniteError,
    RangeError,
    ShapeError,
    TrainingDiverged,
    UnknownComponentError,
)
from sketchforge.features import SIGNATURE_TAP, Extractor, ExtractorSpec, FeatureSet, extract_batch, to_rgb_batch
from sketchforge.fileio import BinaryReader, BinaryWriter, PathLike, atomic_write, read_bytes, write_csv
from sketchforge.losses import (
    discriminator_total,
    generator_total,
    lsgan_d_loss,
    lsgan_g_loss,
    pseudo_feature_loss,
    tv_loss,
)
from sketchforge.patchmatch import ReferenceStore, extract_patches, generate_pseudo_features

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["iter", "L_p", "L_GAN_G", "L_GAN_D", "L_tv", "lr"]

CHECKPOINT_MAGIC = b"SKCK"
CHECKPOINT_VERSION = 1


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, scale: float = 1.0) -> np.ndarray:
    std = scale * math.sqrt(2.0 / (in_c * 9))
    return (rng.standard_normal((out_c, in_c, 3, 3)) * std).astype(tensor.get_default_dtype())


def _zeros(count: int) -> np.ndarray:
    return np.zeros(count, dtype=tensor.get_default_dtype())


def _check_activation(name: str, var: Var) -> Var:
    if not np.all(np.isfinite(var.value)):
        raise NonFiniteError(f"non-finite activation after layer '{name}'")
    return var


# ============ NETWORKS ============

@dataclass
class GeneratorNet:
    """
    stem conv (3 -> F) + relu, B residual blocks (conv, relu, conv, + skip),
    long skip from the stem, relu, head conv (F -> 1), sigmoid.
    """
    features: int
    blocks: int
    params: Dict[str, np.ndarray]

    @classmethod
    def init(cls, features: int = 32, blocks: int = 4, seed: int = 0) -> "GeneratorNet":
        rng = np.random.default_rng([seed, 1])
        params = {"stem.w": _he_conv(rng, features, 3), "stem.b": _zeros(features)}
        for b in range(blocks):
            params[f"block{b}.conv1.w"] = _he_conv(rng, features, features)
            params[f"block{b}.conv1.b"] = _zeros(features)
            params[f"block{b}.conv2.w"] = _he_conv(rng, features, features, scale=0.1)
            params[f"block{b}.conv2.b"] = _zeros(features)
        params["head.w"] = _he_conv(rng, 1, features, scale=0.1)
        params["head.b"] = _zeros(1)
        return cls(features=features, blocks=blocks, params=params)

    def forward(self, x: Var, p: Dict[str, Var]) -> Var:
        stem = _check_activation("stem", ad.relu(ad.conv2d(x, p["stem.w"], p["stem.b"], pad=1)))
        h = stem
        for b in range(self.blocks):
            r = ad.relu(ad.conv2d(h, p[f"block{b}.conv1.w"], p[f"block{b}.conv1.b"], pad=1))
            r = ad.conv2d(r, p[f"block{b}.conv2.w"], p[f"block{b}.conv2.b"], pad=1)
            h = _check_activation(f"block{b}", ad.add(h, r))
        h = ad.relu(ad.add(h, stem))
        out = ad.conv2d(h, p["head.w"], p["head.b"], pad=1)
        return _check_activation("head", ad.sigmoid(out))


@dataclass
class DiscriminatorNet:
    """Three stride-2 3x3 convs with leaky relu (0.2), then a 1-channel score map."""
    features: int
    params: Dict[str, np.ndarray]

    @classmethod
    def init(cls, features: int = 16, seed: int = 0) -> "DiscriminatorNet":
        rng = np.random.default_rng([seed, 2])
        widths = [1, features, 2 * features, 4 * features]
        params = {}
        for i in range(3):
            params[f"conv{i}.w"] = _he_conv(rng, widths[i + 1], widths[i])
            params[f"conv{i}.b"] = _zeros(widths[i + 1])
        params["score.w"] = _he_conv(rng, 1, widths[-1])
        params["score.b"] = _zeros(1)
        return cls(features=features, params=params)

    def forward(self, x: Var, p: Dict[str, Var]) -> Var:
        for i in range(3):
            x = ad.leaky_relu(ad.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, pad=1), 0.2)
            _check_activation(f"conv{i}", x)
        return _check_activation("score", ad.conv2d(x, p["score.w"], p["score.b"], pad=1))


def _photo_batch(photo: np.ndarray) -> np.ndarray:
    photo = np.asarray(photo)
    if not np.all(np.isfinite(photo)) or photo.min() < 0.0 or photo.max() > 1.0:
        raise RangeError("photo values must lie in [0, 1]")
    return np.ascontiguousarray(to_rgb_batch(photo), dtype=tensor.get_default_dtype())


def generator_forward(net: GeneratorNet, photo: np.ndarray) -> np.ndarray:
    """Synthesize a sketch: 1 x H x W for a C x H x W photo, N x 1 x H x W for a batch."""
    batch = _photo_batch(photo)
    constants = {name: Var(value) for name, value in net.params.items()}
    out = net.forward(Var(batch), constants).value
    return out if np.asarray(photo).ndim == 4 else out[0]


# ============ PARAMETERS / ADAM ============

@dataclass
class AdamState:
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Returns:
        (new parameters, new state); the inputs are left untouched
    """
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads.get(name)
        grad = np.zeros(value.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != value.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter has {value.shape}")
        m = beta1 * state.m.get(name, np.zeros(value.shape)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros(value.shape)) + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = (value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t=t, m=new_m, v=new_v)


@dataclass
class ParamTape:
    """Parameters of one network, the tape of its current forward pass, and its Adam state."""
    params: Dict[str, np.ndarray]
    state: AdamState = field(default_factory=AdamState)
    tape: Tape = field(default_factory=Tape)

    def bind(self) -> Dict[str, Var]:
        """Start a fresh forward pass with every parameter as a differentiable leaf."""
        self.tape.reset()
        return {name: self.tape.leaf(name, value) for name, value in self.params.items()}

    def constants(self) -> Dict[str, Var]:
        return {name: Var(value) for name, value in self.params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.params, self.state = adam_step(self.params, grads, self.state, lr)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()


def backward(tape: Tape, loss: Var) -> Dict[str, np.ndarray]:
    """Gradients of a recorded scalar loss for every bound parameter; clears the tape."""
    return tape.backward(loss)


# ============ AUGMENTATION ============

_LUMA = np.array([0.299, 0.587, 0.114])


def apply_color_jitter(photo: np.ndarray, brightness: float = 0.0, contrast: float = 1.0,
                       saturation: float = 1.0, sharpness: float = 1.0) -> np.ndarray:
    """Brightness offset, contrast about the mean, saturation toward luma, unsharp blend; clamped to [0, 1]."""
    out = np.asarray(photo)
    if brightness != 0.0:
        out = out + brightness
    if contrast != 1.0:
        out = out.mean() + contrast * (out - out.mean())
    if saturation != 1.0 and out.shape[0] == 3:
        luma = np.tensordot(_LUMA, out, axes=1)[None]
        out = luma + saturation * (out - luma)
    if sharpness != 1.0:
        blurred = ndimage.gaussian_filter(out, sigma=(0, 1.0, 1.0), mode="nearest")
        out = blurred + sharpness * (out - blurred)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(photo).dtype)


def augment(photo: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random color-space jitter of one C x H x W photo."""
    low, high = config.factor_range
    brightness = rng.uniform(-config.brightness_delta, config.brightness_delta) if config.brightness else 0.0
    contrast = rng.uniform(low, high) if config.contrast else 1.0
    saturation = rng.uniform(low, high) if config.saturation else 1.0
    sharpness = rng.uniform(low, high) if config.sharpness else 1.0
    return apply_color_jitter(photo, brightness, contrast, saturation, sharpness)


def learning_rate(iteration: int, config: TrainConfig) -> float:
    """lr_max, divided by ten at each configured fraction of the run, floored at lr_min."""
    drops = sum(iteration >= int(round(frac * config.iterations)) for frac in config.lr_drops)
    return max(config.lr_max * 0.1 ** drops, config.lr_min)


# ============ CHECKPOINTS ============

def _write_params(writer: BinaryWriter, params: Dict[str, np.ndarray]) -> None:
    writer.u32(len(params))
    for name in params:
        writer.named_array(name, params[name])


def _read_params(reader: BinaryReader) -> Dict[str, np.ndarray]:
    return dict(reader.named_array() for _ in range(reader.u32()))


@dataclass
class Checkpoint:
    iteration: int
    config: TrainConfig
    generator: Dict[str, np.ndarray]
    discriminator: Dict[str, np.ndarray]
    generator_adam: AdamState = field(default_factory=AdamState)
    discriminator_adam: AdamState = field(default_factory=AdamState)

    def save(self, path: PathLike) -> None:
        writer = BinaryWriter()
        writer.magic(CHECKPOINT_MAGIC)
        writer.u32(CHECKPOINT_VERSION)
        writer.u32(self.iteration)
        writer.string(self.config.model_dump_json())
        writer.magic(b"GNET")
        _write_params(writer, self.generator)
        writer.magic(b"DNET")
        _write_params(writer, self.discriminator)
        writer.magic(b"ADAM")
        for state in (self.generator_adam, self.discriminator_adam):
            writer.u32(state.t)
            _write_params(writer, state.m)
            _write_params(writer, state.v)
        atomic_write(path, writer.getvalue())

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        reader = BinaryReader(read_bytes(path, "checkpoint"), "checkpoint")
        reader.expect_magic(CHECKPOINT_MAGIC)
        reader.expect_version(CHECKPOINT_VERSION)
        iteration = reader.u32()
        config = TrainConfig(**json.loads(reader.string()))
        reader.expect_magic(b"GNET")
        generator = _read_params(reader)
        reader.expect_magic(b"DNET")
        discriminator = _read_params(reader)
        reader.expect_magic(b"ADAM")
        states = []
        for _ in range(2):
            t = reader.u32()
            m = {k: v.astype(np.float64) for k, v in _read_params(reader).items()}
            v = {k: val.astype(np.float64) for k, val in _read_params(reader).items()}
            states.append(AdamState(t=t, m=m, v=v))
        return cls(iteration, config, generator, discriminator, states[0], states[1])

    def generator_net(self) -> GeneratorNet:
        dtype = tensor.get_default_dtype()
        params = {name: value.astype(dtype) for name, value in self.generator.items()}
        return GeneratorNet(features=self.config.gen_features, blocks=self.config.gen_blocks, params=params)


def synthesize(checkpoint: Checkpoint, photo: np.ndarray) -> np.ndarray:
    """One forward pass of the checkpointed generator."""
    return generator_forward(checkpoint.generator_net(), photo)


# ============ TRAINING LOOP ============

def _save_checkpoint(directory: Optional[Path], iteration: int, config: TrainConfig,
                     g: ParamTape, d: ParamTape) -> None:
    if directory is None:
        return
    checkpoint = Checkpoint(iteration, config, g.params, d.params, g.state, d.state)
    path = Path(directory) / f"checkpoint_{iteration:06d}.skck"
    checkpoint.save(path)
    checkpoint.save(Path(directory) / "latest.skck")
    logger.info("Saved checkpoint %s", path)


def _check_trainset(trainset: Sequence[np.ndarray], store: ReferenceStore, config: TrainConfig) -> None:
    if len(trainset) == 0:
        raise ShapeError("training set is empty")
    extent = trainset[0].shape[-2:]
    for index, photo in enumerate(trainset):
        if photo.shape[-2:] != extent:
            raise ShapeError(f"training photo {index} is {photo.shape[-2:]}, expected {tuple(extent)}")
    for tap in config.weights.taps:
        store.require_tap(tap)
    if store.k != config.patch_k:
        raise ShapeError(f"reference store was built with k={store.k}, training expects k={config.patch_k}")


def train(config: TrainConfig, trainset: Sequence[np.ndarray], store: ReferenceStore, extractor: Extractor,
          checkpoint_dir: Optional[PathLike] = None) -> pd.DataFrame:
    """
    Alternate one discriminator step and one generator step per iteration.

    Each iteration samples a batch of photos, augments it, matches the photo
    features against the reference store to obtain pseudo sketch features
    (fixed targets for that iteration), then updates D on L_D and G on L_G.

    Args:
        config: Training settings
        trainset: Photos (C x H x W, values in [0, 1]); no sketches needed
        store: Reference store built with the same extractor
        extractor: Feature extractor
        checkpoint_dir: Where checkpoints go; None disables them

    Returns:
        History with one row per iteration (iter, L_p, L_GAN_G, L_GAN_D, L_tv, lr)
    """
    _check_trainset(trainset, store, config)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    weights = config.weights
    taps = weights.taps
    dtype = tensor.get_default_dtype()

    rng = np.random.default_rng(config.seed)
    gen = GeneratorNet.init(config.gen_features, config.gen_blocks, config.seed)
    disc = DiscriminatorNet.init(config.disc_features, config.seed)
    g, d = ParamTape(gen.params), ParamTape(disc.params)
    _save_checkpoint(checkpoint_dir, 0, config, g, d)

    rows: List[dict] = []
    iterator = tqdm(range(config.iterations), desc="train", disable=not config.progress)
    for it in iterator:
        lr = learning_rate(it, config)
        try:
            losses = _train_step(config, trainset, store, extractor, gen, disc, g, d, rng, lr, taps, dtype)
        except NonFiniteError as e:
            raise TrainingDiverged(f"iteration {it + 1}: {e}") from e

        rows.append({"iter": it + 1, **losses, "lr": lr})
        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            logger.info("iter %d/%d  L_p=%.5g  L_GAN_G=%.5g  L_GAN_D=%.5g  L_tv=%.5g  lr=%.1e",
                        it + 1, config.iterations, losses["L_p"], losses["L_GAN_G"], losses["L_GAN_D"],
                        losses["L_tv"], lr)
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            _save_checkpoint(checkpoint_dir, it + 1, config, g, d)

    if config.iterations and (not config.checkpoint_every or config.iterations % config.checkpoint_every):
        _save_checkpoint(checkpoint_dir, config.iterations, config, g, d)
    return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def _train_step(config, trainset, store, extractor, gen, disc, g, d, rng, lr, taps, dtype) -> Dict[str, float]:
    picks = rng.integers(0, len(trainset), size=config.batch_size)
    photos = np.stack([to_rgb_batch(np.asarray(trainset[i]))[0] for i in picks])
    if config.augment.enabled:
        photos = np.stack([augment(photo, rng, config.augment) for photo in photos])
    photos = photos.astype(dtype)

    photo_feats = extract_batch(extractor, photos, set(taps) | {SIGNATURE_TAP}, dtype=dtype)
    pseudo: Dict[str, list] = {tap: [] for tap in taps}
    for n in range(len(photos)):
        sample = FeatureSet({tap: fm[n] for tap, fm in photo_feats.items()}, source_id=f"batch[{n}]")
        for tap, feature in generate_pseudo_features(sample, store, taps, config.k_ref).items():
            pseudo[tap].append(feature)

    y_hat = gen.forward(Var(photos), g.bind())

    # discriminator step on detached fakes
    reals = Var(store.sketches[rng.integers(0, len(store), size=config.batch_size)].astype(dtype))
    d_vars = d.bind()
    l_gan_d = discriminator_total(
        lsgan_d_loss(disc.forward(reals, d_vars), disc.forward(ad.detach(y_hat), d_vars))
    )
    d.step(backward(d.tape, l_gan_d), lr)

    # generator step with the discriminator frozen
    l_gan_g = lsgan_g_loss(disc.forward(y_hat, d.constants()))
    gen_feats = extractor.forward(ad.repeat_channels(y_hat, 3), taps)
    l_p = pseudo_feature_loss(gen_feats, pseudo, weights=config.weights)
    l_tv = tv_loss(y_hat)
    l_g = generator_total(l_p, l_gan_g, l_tv, config.weights)
    g.step(backward(g.tape, l_g), lr)

    return {"L_p": l_p.item(), "L_GAN_G": l_gan_g.item(), "L_GAN_D": l_gan_d.item(), "L_tv": l_tv.item()}


def save_history(path: PathLike, history: pd.DataFrame) -> None:
    write_csv(path, history)


# ============ GRADIENT CHECK ============

GradBuilder = Callable[[np.random.Generator, int, type], Tuple[Dict[str, np.ndarray], Callable[[Dict[str, Var]], Var]]]


def _away_from_zero(rng, shape, dtype, margin=0.1):
    magnitude = rng.uniform(margin, 1.0, size=shape)
    return (magnitude * rng.choice([-1.0, 1.0], size=shape)).astype(dtype)


def _gc_conv_input(rng, extent, dtype):
    w = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    return {"x": rng.standard_normal((1, 2, extent, extent)).astype(dtype)}, \
        lambda v: ad.conv2d(v["x"], w, b, pad=1)


def _gc_conv_weight(rng, extent, dtype):
    x = rng.standard_normal((1, 2, extent, extent)).astype(dtype)
    inputs = {"w": rng.standard_normal((3, 2, 3, 3)).astype(dtype), "b": rng.standard_normal(3).astype(dtype)}
    return inputs, lambda v: ad.conv2d(x, v["w"], v["b"], pad=1)


def _gc_conv_strided(rng, extent, dtype):
    inputs = {"x": rng.standard_normal((1, 2, extent, extent)).astype(dtype),
              "w": rng.standard_normal((2, 2, 3, 3)).astype(dtype)}
    return inputs, lambda v: ad.conv2d(v["x"], v["w"], stride=2, pad=1)


def _gc_relu(rng, extent, dtype):
    return {"x": _away_from_zero(rng, (1, 2, extent, extent), dtype)}, lambda v: ad.relu(v["x"])


def _gc_leaky_relu(rng, extent, dtype):
    return {"x": _away_from_zero(rng, (1, 2, extent, extent), dtype)}, lambda v: ad.leaky_relu(v["x"], 0.2)


def _gc_max_pool(rng, extent, dtype):
    width = max(extent - 1, 1)
    count = 2 * extent * width
    x = (rng.permutation(count).reshape(1, 2, extent, width) * 0.1).astype(dtype)
    return {"x": x}, lambda v: ad.max_pool2(v["x"])


def _gc_residual_add(rng, extent, dtype):
    w = (0.3 * rng.standard_normal((2, 2, 3, 3))).astype(dtype)
    return {"x": rng.standard_normal((1, 2, extent, extent)).astype(dtype)}, \
        lambda v: ad.add(v["x"], ad.conv2d(v["x"], w, pad=1))


def _gc_squash(rng, extent, dtype):
    return {"x": (2.0 * rng.standard_normal((1, 1, extent, extent))).astype(dtype)}, lambda v: ad.sigmoid(v["x"])


def _gc_pseudo_loss(rng, extent, dtype):
    # targets sit within 0.05 of the map's own patches so the float32 sum keeps its digits
    size = min(extent, 4)
    fm = rng.standard_normal((2, size, size))
    _, patches = extract_patches(fm, 3)
    targets = (patches + 0.05 * rng.standard_normal(patches.shape))[None].astype(dtype)
    weights = LossWeights(layers=(3,))
    return {"fm": fm[None].astype(dtype)}, \
        lambda v: pseudo_feature_loss({"relu3_1": v["fm"]}, {"relu3_1": targets}, weights)


def _gc_lsgan_g(rng, extent, dtype):
    return {"d_fake": (1.0 + 0.1 * rng.standard_normal((2, 1, extent, extent))).astype(dtype)}, \
        lambda v: lsgan_g_loss(v["d_fake"])


def _gc_lsgan_d(rng, extent, dtype):
    inputs = {"d_real": (1.0 + 0.1 * rng.standard_normal((2, 1, extent, extent))).astype(dtype),
              "d_fake": (0.1 * rng.standard_normal((2, 1, extent, extent))).astype(dtype)}
    return inputs, lambda v: lsgan_d_loss(v["d_real"], v["d_fake"])


def _gc_tv(rng, extent, dtype):
    return {"image": rng.uniform(0.4, 0.6, (2, 1, extent, extent)).astype(dtype)}, lambda v: tv_loss(v["image"])


def _gc_generator(rng, extent, dtype):
    """Full L_G on a 16 x 16 photo with a small generator, discriminator and extractor."""
    size = 16
    seed = int(rng.integers(0, 2 ** 31))
    gen = GeneratorNet.init(features=4, blocks=1, seed=seed)
    disc = DiscriminatorNet.init(features=2, seed=seed)
    extractor = Extractor.random(ExtractorSpec.vgg19(widths=(4, 4, 4, 4, 4)), seed=seed)
    weights = LossWeights(lambda_p=1.0, lambda_adv=1.0, lambda_tv=0.1, layers=(2, 3))
    photo = rng.uniform(0, 1, (1, 3, size, size)).astype(dtype)
    targets = {
        "relu2_1": rng.standard_normal((1, 36, 4, 3, 3)).astype(dtype),
        "relu3_1": rng.standard_normal((1, 4, 4, 3, 3)).astype(dtype),
    }
    d_params = {name: Var(value.astype(dtype)) for name, value in disc.params.items()}
    inputs = {name: value.astype(dtype) for name, value in gen.params.items()}

    def loss(v):
        y_hat = gen.forward(Var(photo), v)
        feats = extractor.forward(ad.repeat_channels(y_hat, 3), weights.taps)
        l_p = pseudo_feature_loss(feats, targets, weights)
        l_gan = lsgan_g_loss(disc.forward(y_hat, d_params))
        return generator_total(l_p, l_gan, tv_loss(y_hat), weights)

    return inputs, loss


GRADIENT_COMPONENTS: Dict[str, GradBuilder] = {
    "conv2d_input": _gc_conv_input,
    "conv2d_weight": _gc_conv_weight,
    "conv2d_strided": _gc_conv_strided,
    "relu": _gc_relu,
    "leaky_relu": _gc_leaky_relu,
    "max_pool2": _gc_max_pool,
    "residual_add": _gc_residual_add,
    "squash": _gc_squash,
    "pseudo_feature_loss": _gc_pseudo_loss,
    "lsgan_g_loss": _gc_lsgan_g,
    "lsgan_d_loss": _gc_lsgan_d,
    "tv_loss": _gc_tv,
    "generator": _gc_generator,
}


# relu/max-pool kinks inside the whole pipeline cannot be steered away from
KINKED_COMPONENTS = {"generator"}


@dataclass
class GradCheckReport:
    component: str
    precision: str
    trials: int
    max_rel_error: float
    tolerance: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and 2 * self.skipped < self.checked


def _value(out) -> np.ndarray:
    return out.value if isinstance(out, Var) else np.asarray(out)


def _scalar(out, projection: np.ndarray) -> float:
    return float(np.sum(np.asarray(_value(out), dtype=np.float64) * projection))


def gradient_check(component: str, trials: int = 3, extent: int = 6, precision: str = "float64",
                   seed: int = 0, max_elements: int = 48) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central differences.

    The component output is projected onto a fixed random tensor so that
    non-scalar ops reduce to one number. Error is max|analytic - numeric|
    relative to the larger of the two gradient maxima.

    The whole-generator check cannot keep every relu and pooling input away
    from its kink, so it also evaluates the unshifted loss: elements whose
    forward and backward one-sided differences disagree by more than
    tolerance * scale straddle a kink and are skipped (and counted).

    Args:
        component: Name in GRADIENT_COMPONENTS
        trials: Random instances to check
        extent: Spatial size of the random inputs (the generator check always uses 16)
        precision: 'float32' (step 1e-3, tolerance 1e-3) or 'float64' (step 1e-5, tolerance 1e-6);
            the generator check uses step 1e-6 and tolerance 1e-3
        seed: Seed for the random instances
        max_elements: Elements checked per input tensor (sampled when larger)

    Returns:
        GradCheckReport
    """
    if component not in GRADIENT_COMPONENTS:
        raise UnknownComponentError(
            f"Unknown gradient-check component '{component}', expected one of {', '.join(GRADIENT_COMPONENTS)}"
        )
    if precision not in ("float32", "float64"):
        raise UnknownComponentError(f"Unknown precision '{precision}'")
    dtype = np.float32 if precision == "float32" else np.float64
    eps, tolerance = (1e-3, 1e-3) if precision == "float32" else (1e-5, 1e-6)
    kinked = component in KINKED_COMPONENTS
    if kinked:
        eps, tolerance = (eps if precision == "float32" else 1e-6), 1e-3
    rng = np.random.default_rng(seed)

    worst, checked, skipped = 0.0, 0, 0
    for _ in range(trials):
        inputs, fn = GRADIENT_COMPONENTS[component](rng, extent, dtype)
        reference_out = fn({name: Var(value) for name, value in inputs.items()})
        projection = np.asarray(rng.standard_normal(_value(reference_out).shape))
        center = _scalar(reference_out, projection)

        tape = Tape()
        leaves = {name: tape.leaf(name, value) for name, value in inputs.items()}
        out = fn(leaves)
        analytic = tape.backward(ad.total(ad.mul(out, projection.astype(dtype))))
        analytic_scale = max(float(np.abs(g).max()) for g in analytic.values())

        diffs, scale = [], 1e-12
        for name, value in inputs.items():
            flat_count = value.size
            picks = np.arange(flat_count) if flat_count <= max_elements else \
                rng.choice(flat_count, size=max_elements, replace=False)
            for flat in picks:
                idx = np.unravel_index(flat, value.shape)
                values, points = [], []
                for sign in (1.0, -1.0):
                    shifted = {k: v.copy() for k, v in inputs.items()}
                    shifted[name][idx] = value[idx] + sign * eps
                    points.append(float(shifted[name][idx]))
                    values.append(_scalar(fn({k: Var(v) for k, v in shifted.items()}), projection))
                checked += 1
                if kinked:
                    origin = float(value[idx])
                    forward = (values[0] - center) / (points[0] - origin)
                    backward_diff = (center - values[1]) / (origin - points[1])
                    if abs(forward - backward_diff) > tolerance * max(analytic_scale, 1e-12):
                        skipped += 1
                        continue
                numeric = (values[0] - values[1]) / (points[0] - points[1])
                a = float(analytic[name][idx])
                diffs.append(abs(a - numeric))
                scale = max(scale, abs(a), abs(numeric))
        if diffs:
            worst = max(worst, max(diffs) / scale)

    report = GradCheckReport(component, precision, trials, worst, tolerance, checked, skipped)
    logger.debug("gradient check %s (%s): max rel error %.3e, %d of %d elements skipped at kinks",
                 component, precision, worst, skipped, checked)
    return report
