"""Alternating minimax training loop with checkpointing and metrics.

Each alternation takes `disc_steps_per_gen_step` discriminator steps and
one generator step, on independently drawn half-real/half-generated
batches. All randomness flows through one seeded generator so metrics
logs are a pure function of (config, corpus).
"""

import io
import json
import struct
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .corpus import sample_quadruple
from .cqt import estimate_f0, frequency_to_bin
from .model import (DiscriminatorParams, GeneratorParams, ModelConfig,
                    discriminator_forward, discriminator_loss, generator_forward,
                    generator_total_loss, spec_batch)
from .tensor import Adam, Tensor

CHECKPOINT_MAGIC = b"AVCKPT\x00"
CHECKPOINT_VERSION = 1

METRICS_FIELDS = ("step", "analogy_loss", "disc_loss", "gen_adv_loss",
                  "disc_real_accuracy", "disc_fake_detection_rate")


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    disc_steps_per_gen_step: int = 1
    lambda_adv: float = 0.05
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 500
    log_interval: int = 10
    transform: str = "additive"

    def __post_init__(self):
        if self.batch_size % 2:
            raise ValueError("batch_size must be even (half-generated batch rule)")
        if self.steps <= 0:
            raise ValueError("steps must be positive")


@dataclass
class MetricsRecord:
    step: int
    analogy_loss: float
    disc_loss: float
    gen_adv_loss: float
    disc_real_accuracy: float
    disc_fake_detection_rate: float
    wall_time: float

    def log_line(self):
        # wall_time stays out of the log file so logs are reproducible
        vals = [self.step, self.analogy_loss, self.disc_loss, self.gen_adv_loss,
                self.disc_real_accuracy, self.disc_fake_detection_rate]
        return " ".join(f"{v:.12g}" for v in vals)


@dataclass
class Batch:
    real_x: np.ndarray          # (n/2, 1, K, T)
    real_classes: list
    quadruples: list
    gen_a: np.ndarray
    gen_b: np.ndarray
    gen_c: np.ndarray
    gen_d: np.ndarray
    target_classes: list        # intended (word, speaker) class of each generated sample


def make_batch(corpus, model_config, rng, batch_size, holdout=False):
    half = batch_size // 2
    if holdout:
        lo, hi = corpus.holdout_start, corpus.variants_per_cell
    else:
        lo, hi = 0, corpus.holdout_start
    real = []
    real_classes = []
    for _ in range(half):
        s = int(rng.integers(corpus.n_speakers))
        w = int(rng.integers(corpus.n_words))
        v = int(rng.integers(lo, hi))
        real.append(corpus.spectrogram(s, w, v))
        real_classes.append(model_config.class_index(w, s))
    quads = [sample_quadruple(corpus, rng, holdout=holdout) for _ in range(half)]
    return Batch(
        real_x=spec_batch(real, model_config),
        real_classes=real_classes,
        quadruples=quads,
        gen_a=spec_batch([q.a for q in quads], model_config),
        gen_b=spec_batch([q.b for q in quads], model_config),
        gen_c=spec_batch([q.c for q in quads], model_config),
        gen_d=spec_batch([q.d for q in quads], model_config),
        target_classes=[model_config.class_index(q.target_word, q.target_speaker)
                        for q in quads],
    )


def _check_finite(value, step, term):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{term} is {value} at step {step}")
    return float(value)


class Trainer:
    def __init__(self, corpus, train_config, model_config=None):
        self.corpus = corpus
        self.config = train_config
        if model_config is None:
            model_config = ModelConfig(
                bins=corpus.cqt_config.n_bins,
                n_words=corpus.n_words,
                n_speakers=corpus.n_speakers,
                transform=train_config.transform,
                lambda_adv=train_config.lambda_adv,
            )
        self.model_config = model_config
        self.rng = np.random.default_rng(train_config.seed)
        init_rng = np.random.default_rng(train_config.seed + 1)
        self.gen_params = GeneratorParams(model_config, init_rng)
        self.disc_params = DiscriminatorParams(model_config, init_rng)
        self.gen_opt = Adam(train_config.learning_rate, train_config.beta1,
                            train_config.beta2, train_config.epsilon)
        self.disc_opt = Adam(train_config.learning_rate, train_config.beta1,
                             train_config.beta2, train_config.epsilon)
        self.step = 0

    def disc_step(self, batch):
        gen_x = generator_forward(self.gen_params, Tensor(batch.gen_a),
                                  Tensor(batch.gen_b), Tensor(batch.gen_c))
        loss, logits = discriminator_loss(self.disc_params, batch.real_x,
                                          batch.real_classes, gen_x)
        loss_v = _check_finite(loss.data[0], self.step, "disc_loss")
        self.gen_params.zero_grads()
        self.disc_params.zero_grads()
        loss.backward()
        self.disc_opt.step(self.disc_params.named())
        pred = logits.data.argmax(axis=1)
        n_real = len(batch.real_classes)
        real_acc = float((pred[:n_real] == np.array(batch.real_classes)).mean())
        fake_rate = float((pred[n_real:] == self.model_config.fake_class).mean())
        return loss_v, real_acc, fake_rate

    def gen_step(self, batch):
        pred = generator_forward(self.gen_params, Tensor(batch.gen_a),
                                 Tensor(batch.gen_b), Tensor(batch.gen_c))
        total, a_loss, adv = generator_total_loss(
            pred, batch.gen_d, self.disc_params.frozen(), batch.target_classes,
            self.config.lambda_adv)
        a_v = _check_finite(a_loss.data[0], self.step, "analogy_loss")
        adv_v = _check_finite(adv.data[0], self.step, "gen_adv_loss")
        self.gen_params.zero_grads()
        total.backward()
        self.gen_opt.step(self.gen_params.named())
        return a_v, adv_v

    def train_step(self):
        """One alternation: disc steps then a gen step; returns a record."""
        t0 = time.monotonic()
        disc_loss = real_acc = fake_rate = 0.0
        for _ in range(self.config.disc_steps_per_gen_step):
            batch = make_batch(self.corpus, self.model_config, self.rng,
                               self.config.batch_size)
            disc_loss, real_acc, fake_rate = self.disc_step(batch)
        batch = make_batch(self.corpus, self.model_config, self.rng,
                           self.config.batch_size)
        a_loss, adv_loss = self.gen_step(batch)
        self.step += 1
        return MetricsRecord(self.step, a_loss, disc_loss, adv_loss,
                             real_acc, fake_rate, time.monotonic() - t0)

    def named_tensors(self):
        out = {}
        for name, p in self.gen_params.items():
            out[f"gen/{name}"] = p.data
        for name, p in self.disc_params.items():
            out[f"disc/{name}"] = p.data
        for name, arr in self.gen_opt.state_tensors().items():
            out[f"gen_opt/{name}"] = arr
        for name, arr in self.disc_opt.state_tensors().items():
            out[f"disc_opt/{name}"] = arr
        return out


def train(corpus, config, metrics_path=None, checkpoint_dir=None, model_config=None,
          progress=None):
    """Run the full schedule; returns (trainer, records)."""
    trainer = Trainer(corpus, config, model_config)
    return _run(trainer, config.steps, metrics_path, checkpoint_dir, progress)


def resume(corpus, checkpoint_path, metrics_path=None, checkpoint_dir=None,
           progress=None):
    trainer = load_checkpoint(checkpoint_path, corpus)
    remaining = trainer.config.steps - trainer.step
    return _run(trainer, remaining, metrics_path, checkpoint_dir, progress)


def _run(trainer, steps, metrics_path, checkpoint_dir, progress):
    records = []
    log = open(metrics_path, "a") if metrics_path else None
    try:
        if log and trainer.step == 0:
            log.write("# " + " ".join(METRICS_FIELDS) + "\n")
        for _ in range(steps):
            rec = trainer.train_step()
            if trainer.step % trainer.config.log_interval == 0 or trainer.step == 1:
                records.append(rec)
                if log:
                    log.write(rec.log_line() + "\n")
            if checkpoint_dir and trainer.step % trainer.config.checkpoint_interval == 0:
                save_checkpoint(trainer, f"{checkpoint_dir}/ckpt_{trainer.step:06d}.bin")
            if progress and trainer.step % (trainer.config.log_interval * 10) == 0:
                progress(rec)
    finally:
        if log:
            log.close()
    return trainer, records


# ---- checkpoint serialization ----

def _config_blob(trainer):
    payload = {
        "train": asdict(trainer.config),
        "model": asdict(trainer.model_config),
        "step": trainer.step,
        "rng": trainer.rng.bit_generator.state,
    }
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def save_checkpoint(trainer, path):
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<B", CHECKPOINT_VERSION))
    blob = _config_blob(trainer)
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    tensors = trainer.named_tensors()
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    data = out.getvalue()
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_checkpoint(path, corpus):
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack("<B", buf.read(1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    (blen,) = struct.unpack("<I", buf.read(4))
    payload = json.loads(buf.read(blen).decode("utf-8"))
    train_cfg = TrainConfig(**payload["train"])
    model_cfg_fields = dict(payload["model"])
    model_cfg_fields["channels"] = tuple(model_cfg_fields["channels"])
    model_cfg = ModelConfig(**model_cfg_fields)
    trainer = Trainer(corpus, train_cfg, model_cfg)
    trainer.step = payload["step"]
    trainer.rng.bit_generator.state = payload["rng"]
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        size = int(np.prod(shape))
        arr = np.frombuffer(buf.read(8 * size), dtype="<f8").reshape(shape).copy()
        tensors[name] = arr
    for name, p in trainer.gen_params.items():
        p.data = tensors[f"gen/{name}"]
    for name, p in trainer.disc_params.items():
        p.data = tensors[f"disc/{name}"]
    trainer.gen_opt.load_state_tensors(
        {k[len("gen_opt/"):]: v for k, v in tensors.items() if k.startswith("gen_opt/")})
    trainer.disc_opt.load_state_tensors(
        {k[len("disc_opt/"):]: v for k, v in tensors.items() if k.startswith("disc_opt/")})
    return trainer


# ---- evaluation ----

@dataclass
class EvalReport:
    reconstruction_error: float
    f0_transfer_score: float
    disc_real_accuracy: float
    n_quadruples: int

    def lines(self):
        return [
            f"held-out quadruples: {self.n_quadruples}",
            f"analogy reconstruction error: {self.reconstruction_error:.6f}",
            f"f0 transfer score: {self.f0_transfer_score:.3f}",
            f"discriminator real-class accuracy: {self.disc_real_accuracy:.3f}",
        ]


def evaluate(trainer, corpus, n_quadruples=64, seed=12345):
    """Held-out reconstruction error, f0-transfer score, disc accuracy."""
    rng = np.random.default_rng(seed)
    mcfg = trainer.model_config
    cqt_cfg = corpus.cqt_config
    quads = [sample_quadruple(corpus, rng, holdout=True) for _ in range(n_quadruples)]
    a = Tensor(spec_batch([q.a for q in quads], mcfg))
    b = Tensor(spec_batch([q.b for q in quads], mcfg))
    c = Tensor(spec_batch([q.c for q in quads], mcfg))
    d = spec_batch([q.d for q in quads], mcfg)
    pred = generator_forward(trainer.gen_params, a, b, c)
    recon = float(T.mse_loss(pred, d).data[0])

    hits = 0
    from .cqt import Spectrogram
    for i, q in enumerate(quads):
        values = np.maximum(pred.data[i, 0], 0.0)
        spec = Spectrogram(values, cqt_cfg)
        f0 = estimate_f0(spec)
        target_f0 = corpus.speakers[q.target_speaker].f0
        if f0 is not None:
            if abs(frequency_to_bin(f0, cqt_cfg) - frequency_to_bin(target_f0, cqt_cfg)) <= 1:
                hits += 1
    f0_score = hits / n_quadruples

    # discriminator accuracy on held-out real samples
    real = []
    classes = []
    for _ in range(n_quadruples):
        s = int(rng.integers(corpus.n_speakers))
        w = int(rng.integers(corpus.n_words))
        v = int(rng.integers(corpus.holdout_start, corpus.variants_per_cell))
        real.append(corpus.spectrogram(s, w, v))
        classes.append(mcfg.class_index(w, s))
    logits = discriminator_forward(trainer.disc_params, Tensor(spec_batch(real, mcfg)))
    acc = float((logits.data.argmax(axis=1) == np.array(classes)).mean())
    return EvalReport(recon, f0_score, acc, n_quadruples)
