"""Analogy generator and class-conditional discriminator.

The generator encodes spectrograms a, b, c with a shared convolutional
encoder, applies the analogy transform in latent space (additive
zb - za + zc, or a small perceptron on [zb - za, zc]) and decodes back to
spectrogram shape with transposed convolutions. The discriminator is a
conv stack with |W|*|S| + 1 output logits: one class per (word, speaker)
pair plus a single fake class.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    bins: int = 48
    frames: int = 64           # network input width; spectrograms are padded to this
    channels: tuple = (16, 32)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    latent: int = 64
    n_words: int = 4
    n_speakers: int = 2
    transform: str = "additive"   # or "deep"
    leaky_alpha: float = 0.2
    lambda_adv: float = 0.05

    def __post_init__(self):
        down = self.stride * self.stride
        if self.bins % down or self.frames % down:
            raise ValueError("bins and frames must be divisible by stride^2")
        if self.transform not in ("additive", "deep"):
            raise ValueError(f"unknown transform variant {self.transform!r}")

    @property
    def feature_hw(self):
        return (self.bins // (self.stride * self.stride),
                self.frames // (self.stride * self.stride))

    @property
    def feature_size(self):
        h, w = self.feature_hw
        return self.channels[1] * h * w

    @property
    def n_classes(self):
        return self.n_words * self.n_speakers + 1

    @property
    def fake_class(self):
        return self.n_words * self.n_speakers

    def class_index(self, word_id, speaker_id):
        return word_id * self.n_speakers + speaker_id


def _he_init(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class ParamSet:
    """Ordered name -> Tensor mapping with hashing and frozen views."""

    def __init__(self, params):
        self.params = dict(params)

    def __getitem__(self, name):
        return self.params[name]

    def items(self):
        return self.params.items()

    def named(self):
        return self.params

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def content_hash(self):
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def frozen(self):
        """Same arrays, gradients off; for adversarial generator updates."""
        out = type(self).__new__(type(self))
        out.params = {name: Tensor(p.data) for name, p in self.params.items()}
        for attr in ("config",):
            if hasattr(self, attr):
                setattr(out, attr, getattr(self, attr))
        return out


class GeneratorParams(ParamSet):
    def __init__(self, config, rng):
        c1, c2 = config.channels
        k = config.kernel
        params = {
            "enc_conv1_w": _he_init(rng, (c1, 1, k, k), k * k),
            "enc_conv1_b": Tensor(np.zeros((c1, 1, 1)), requires_grad=True),
            "enc_conv2_w": _he_init(rng, (c2, c1, k, k), c1 * k * k),
            "enc_conv2_b": Tensor(np.zeros((c2, 1, 1)), requires_grad=True),
            "enc_fc_w": _he_init(rng, (config.feature_size, config.latent),
                                 config.feature_size),
            "enc_fc_b": Tensor(np.zeros(config.latent), requires_grad=True),
            "dec_fc_w": _he_init(rng, (config.latent, config.feature_size), config.latent),
            "dec_fc_b": Tensor(np.zeros(config.feature_size), requires_grad=True),
            "dec_tconv1_w": _he_init(rng, (c2, c1, k, k), c2 * k * k),
            "dec_tconv1_b": Tensor(np.zeros((c1, 1, 1)), requires_grad=True),
            "dec_tconv2_w": _he_init(rng, (c1, 1, k, k), c1 * k * k),
            "dec_tconv2_b": Tensor(np.zeros((1, 1, 1)), requires_grad=True),
        }
        if config.transform == "deep":
            width = 2 * config.latent
            params["tr_fc1_w"] = _he_init(rng, (width, width), width)
            params["tr_fc1_b"] = Tensor(np.zeros(width), requires_grad=True)
            params["tr_fc2_w"] = _he_init(rng, (width, config.latent), width)
            params["tr_fc2_b"] = Tensor(np.zeros(config.latent), requires_grad=True)
        super().__init__(params)
        self.config = config


class DiscriminatorParams(ParamSet):
    def __init__(self, config, rng):
        c1, c2 = config.channels
        k = config.kernel
        # Zero-initialized head: untrained logits are exactly uniform.
        params = {
            "conv1_w": _he_init(rng, (c1, 1, k, k), k * k),
            "conv1_b": Tensor(np.zeros((c1, 1, 1)), requires_grad=True),
            "conv2_w": _he_init(rng, (c2, c1, k, k), c1 * k * k),
            "conv2_b": Tensor(np.zeros((c2, 1, 1)), requires_grad=True),
            "head_w": Tensor(np.zeros((config.feature_size, config.n_classes)),
                             requires_grad=True),
            "head_b": Tensor(np.zeros(config.n_classes), requires_grad=True),
        }
        super().__init__(params)
        self.config = config


def spec_batch(specs, config):
    """Stack spectrograms into an (N, 1, bins, frames) input array,
    zero-padding or cropping the frame axis to the configured width."""
    n = len(specs)
    out = np.zeros((n, 1, config.bins, config.frames))
    for i, spec in enumerate(specs):
        values = spec.values if hasattr(spec, "values") else np.asarray(spec)
        if values.shape[0] != config.bins:
            raise T.ShapeMismatchError(
                f"spectrogram has {values.shape[0]} bins, model expects {config.bins}")
        t = min(values.shape[1], config.frames)
        out[i, 0, :, :t] = values[:, :t]
    return out


def encode(params, x):
    """x: Tensor (N, 1, bins, frames) -> latent (N, latent)."""
    cfg = params.config
    a = cfg.leaky_alpha
    h = T.conv2d(x, params["enc_conv1_w"], cfg.stride, cfg.padding) + params["enc_conv1_b"]
    h = h.leaky_relu(a)
    h = T.conv2d(h, params["enc_conv2_w"], cfg.stride, cfg.padding) + params["enc_conv2_b"]
    h = h.leaky_relu(a)
    h = h.reshape(h.shape[0], cfg.feature_size)
    return h @ params["enc_fc_w"] + params["enc_fc_b"]


def transform(params, za, zb, zc):
    cfg = params.config
    delta = zb - za
    if cfg.transform == "additive":
        return delta + zc
    h = T.concat([delta, zc], axis=1)
    h = (h @ params["tr_fc1_w"] + params["tr_fc1_b"]).leaky_relu(cfg.leaky_alpha)
    return h @ params["tr_fc2_w"] + params["tr_fc2_b"]


def decode(params, z):
    """z: Tensor (N, latent) -> (N, 1, bins, frames), final layer linear."""
    cfg = params.config
    a = cfg.leaky_alpha
    c1, c2 = cfg.channels
    fh, fw = cfg.feature_hw
    h = (z @ params["dec_fc_w"] + params["dec_fc_b"]).leaky_relu(a)
    h = h.reshape(h.shape[0], c2, fh, fw)
    mid_hw = (cfg.bins // cfg.stride, cfg.frames // cfg.stride)
    h = T.conv2d_transpose(h, params["dec_tconv1_w"], cfg.stride, cfg.padding,
                           out_hw=mid_hw) + params["dec_tconv1_b"]
    h = h.leaky_relu(a)
    h = T.conv2d_transpose(h, params["dec_tconv2_w"], cfg.stride, cfg.padding,
                           out_hw=(cfg.bins, cfg.frames)) + params["dec_tconv2_b"]
    return h


def generator_forward(params, a, b, c):
    """Predict d from spectrogram batches a, b, c (shared encoder)."""
    za = encode(params, a)
    zb = encode(params, b)
    zc = encode(params, c)
    return decode(params, transform(params, za, zb, zc))


def analogy_loss(pred, d):
    return T.mse_loss(pred, d)


def discriminator_forward(params, x):
    cfg = params.config
    a = cfg.leaky_alpha
    h = T.conv2d(x, params["conv1_w"], cfg.stride, cfg.padding) + params["conv1_b"]
    h = h.leaky_relu(a)
    h = T.conv2d(h, params["conv2_w"], cfg.stride, cfg.padding) + params["conv2_b"]
    h = h.leaky_relu(a)
    h = h.reshape(h.shape[0], cfg.feature_size)
    return h @ params["head_w"] + params["head_b"]


def discriminator_loss(params, real_x, real_classes, generated_x):
    """Real samples target their (word, speaker) class; generated samples
    target the fake class and enter detached from the generator graph."""
    cfg = params.config
    if real_x.shape[0] == 0 or generated_x.shape[0] == 0:
        raise ValueError("discriminator batch halves must be nonempty")
    gen = generated_x.detach() if isinstance(generated_x, Tensor) else Tensor(generated_x)
    real = real_x if isinstance(real_x, Tensor) else Tensor(real_x)
    batch = T.concat([real, gen], axis=0)
    targets = list(real_classes) + [cfg.fake_class] * gen.shape[0]
    logits = discriminator_forward(params, batch)
    return T.softmax_cross_entropy(logits, targets), logits


def generator_adversarial_loss(disc_params, generated_x, target_classes):
    """Non-saturating loss: push the discriminator's probability mass of
    each generated sample toward its intended real (word, speaker) class.
    Call with frozen discriminator params so only the generator learns."""
    logits = discriminator_forward(disc_params, generated_x)
    return T.softmax_cross_entropy(logits, target_classes)


def generator_total_loss(pred, d, disc_params, target_classes, lambda_adv):
    a_loss = analogy_loss(pred, d)
    adv = generator_adversarial_loss(disc_params, pred, target_classes)
    total = a_loss + Tensor(np.array([lambda_adv])) * adv
    return total, a_loss, adv
