"""Command-line entry point: gen-data, train, convert, eval, render.

Configuration is a flat key=value text file with '#' comments and a
mandatory `version` key; unknown keys are rejected and the effective
config is echoed to the output directory. Exit codes: 0 success,
1 internal error, 2 usage/config error.
"""

import argparse
import os
import sys

import numpy as np

from . import corpus as C
from . import cqt as Q
from . import training as TR
from .model import generator_forward, spec_batch
from .tensor import Tensor

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

CONFIG_VERSION = 1

CONFIG_DEFAULTS = {
    "version": CONFIG_VERSION,
    # cqt
    "sample_rate": 8000,
    "f_min": 110.0,
    "bins_per_octave": 12,
    "n_bins": 48,
    "hop": 64,
    "q_scale": 1.0,
    # corpus
    "n_speakers": 2,
    "n_words": 4,
    "variants_per_cell": 20,
    "corpus_seed": 0,
    # training
    "batch_size": 16,
    "steps": 2000,
    "disc_steps_per_gen_step": 1,
    "lambda_adv": 0.05,
    "learning_rate": 2e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "train_seed": 0,
    "checkpoint_interval": 500,
    "log_interval": 10,
    "transform": "additive",
    # rendering / inversion
    "griffin_lim_iters": 50,
    "phase_seed": 0,
}


class ConfigError(ValueError):
    pass


def parse_config(path=None, overrides=None):
    cfg = dict(CONFIG_DEFAULTS)
    seen_version = path is None
    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in CONFIG_DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = _coerce(key, value)
                if key == "version":
                    seen_version = True
    if not seen_version:
        raise ConfigError(f"{path}: missing mandatory 'version' key")
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']}")
    if overrides:
        cfg.update(overrides)
    return cfg


def _coerce(key, value):
    default = CONFIG_DEFAULTS[key]
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as f:
        for key in sorted(cfg):
            f.write(f"{key}={cfg[key]}\n")


def cqt_config_from(cfg):
    return Q.CqtConfig(cfg["sample_rate"], cfg["f_min"], cfg["bins_per_octave"],
                       cfg["n_bins"], cfg["hop"], cfg["q_scale"])


def train_config_from(cfg):
    return TR.TrainConfig(
        batch_size=cfg["batch_size"], steps=cfg["steps"],
        disc_steps_per_gen_step=cfg["disc_steps_per_gen_step"],
        lambda_adv=cfg["lambda_adv"], learning_rate=cfg["learning_rate"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], epsilon=cfg["epsilon"],
        seed=cfg["train_seed"], checkpoint_interval=cfg["checkpoint_interval"],
        log_interval=cfg["log_interval"], transform=cfg["transform"])


def write_pgm(values, path, flip_vertical=True):
    """Min-max normalized binary PGM; constant input maps to mid-gray.

    Rows are frequency bins (low bins at the bottom of the image)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty spectrogram")
    lo, hi = values.min(), values.max()
    if hi > lo:
        norm = (values - lo) / (hi - lo)
    else:
        norm = np.full_like(values, 0.5)
    img = np.round(norm * 255.0).astype(np.uint8)
    if flip_vertical:
        img = img[::-1]
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


# ---- commands ----

def cmd_gen_data(cfg, out_dir):
    echo_config(cfg, out_dir)
    corpus = C.build_corpus(cfg["n_speakers"], cfg["n_words"], cfg["variants_per_cell"],
                            cfg["corpus_seed"], cqt_config_from(cfg))
    corpus_path = os.path.join(out_dir, "corpus.bin")
    C.save_corpus(corpus, corpus_path)
    wav_dir = os.path.join(out_dir, "samples")
    os.makedirs(wav_dir, exist_ok=True)
    for s in corpus.speakers:
        for w in corpus.words:
            utt = corpus.utterances[corpus.index(s.id, w.id, 0)]
            C.wav_write(utt, os.path.join(wav_dir, f"speaker{s.id}_{w.name}.wav"))
    n = len(corpus.utterances)
    print(f"wrote {corpus_path}: {n} utterances "
          f"({corpus.n_speakers} speakers x {corpus.n_words} words x "
          f"{corpus.variants_per_cell} variants)")
    return EXIT_OK


def cmd_train(cfg, out_dir, corpus_path):
    if not os.path.exists(corpus_path):
        print(f"error: corpus not found: {corpus_path}", file=sys.stderr)
        return EXIT_USAGE
    echo_config(cfg, out_dir)
    corpus = C.load_corpus(corpus_path)
    metrics_path = os.path.join(out_dir, "metrics.log")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    def progress(rec):
        print(f"step {rec.step}: analogy {rec.analogy_loss:.4f} "
              f"disc {rec.disc_loss:.4f} adv {rec.gen_adv_loss:.4f} "
              f"real_acc {rec.disc_real_accuracy:.2f}")

    trainer, _ = TR.train(corpus, train_config_from(cfg), metrics_path=metrics_path,
                          checkpoint_dir=out_dir, progress=progress)
    final = os.path.join(out_dir, "final_checkpoint.bin")
    TR.save_checkpoint(trainer, final)
    print(f"wrote {final} and {metrics_path}")
    return EXIT_OK


def _load_clip(path, cqt_cfg):
    utt = C.wav_read(path)
    expected = int(round(C.UTTERANCE_SECONDS * cqt_cfg.sample_rate))
    if utt.sample_rate != cqt_cfg.sample_rate:
        raise ConfigError(f"{path}: sample rate {utt.sample_rate}, "
                          f"expected {cqt_cfg.sample_rate}")
    if utt.samples.size != expected:
        raise ConfigError(f"{path}: {utt.samples.size} samples, expected {expected}")
    return utt


def cmd_convert(cfg, out_dir, checkpoint_path, corpus_path, a_path, b_path, c_path,
                d_path):
    for p in (checkpoint_path, corpus_path, a_path, b_path, c_path):
        if not os.path.exists(p):
            print(f"error: missing input: {p}", file=sys.stderr)
            return EXIT_USAGE
    echo_config(cfg, out_dir)
    corpus = C.load_corpus(corpus_path)
    trainer = TR.load_checkpoint(checkpoint_path, corpus)
    cqt_cfg = corpus.cqt_config
    fb = Q.design_filterbank(cqt_cfg)
    specs = []
    clips = []
    for p in (a_path, b_path, c_path):
        utt = _load_clip(p, cqt_cfg)
        clips.append(utt)
        specs.append(Q.compress(Q.forward_cqt(utt.samples, fb), cqt_cfg))
    mcfg = trainer.model_config
    x = [Tensor(spec_batch([s], mcfg)) for s in specs]
    pred = generator_forward(trainer.gen_params, *x)
    t_frames = specs[0].frames
    values = np.maximum(pred.data[0, 0, :, :t_frames], 0.0)
    out_spec = Q.Spectrogram(values, cqt_cfg)
    audio = Q.inverse_cqt(out_spec, fb, iterations=cfg["griffin_lim_iters"],
                          signal_length=clips[0].samples.size, seed=cfg["phase_seed"])
    peak = np.abs(audio).max()
    if peak > 1.0:
        audio = audio / peak
    C.wav_write(C.Utterance(-1, -1, audio, cqt_cfg.sample_rate, 0), d_path)
    for name, spec in zip(("a", "b", "c"), specs):
        write_pgm(spec.values, os.path.join(out_dir, f"convert_{name}.pgm"))
    write_pgm(values, os.path.join(out_dir, "convert_d.pgm"))
    print(f"wrote {d_path}")
    return EXIT_OK


def cmd_eval(cfg, out_dir, checkpoint_path, corpus_path):
    for p in (checkpoint_path, corpus_path):
        if not os.path.exists(p):
            print(f"error: missing input: {p}", file=sys.stderr)
            return EXIT_USAGE
    echo_config(cfg, out_dir)
    corpus = C.load_corpus(corpus_path)
    trainer = TR.load_checkpoint(checkpoint_path, corpus)
    report = TR.evaluate(trainer, corpus)
    lines = report.lines()
    for line in lines:
        print(line)
    with open(os.path.join(out_dir, "eval_report.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_render(cfg, out_dir, source_path, image_path):
    if not os.path.exists(source_path):
        print(f"error: missing input: {source_path}", file=sys.stderr)
        return EXIT_USAGE
    cqt_cfg = cqt_config_from(cfg)
    fb = Q.design_filterbank(cqt_cfg)
    utt = _load_clip(source_path, cqt_cfg)
    spec = Q.compress(Q.forward_cqt(utt.samples, fb), cqt_cfg)
    if spec.values.size == 0:
        print("error: empty spectrogram", file=sys.stderr)
        return EXIT_USAGE
    write_pgm(spec.values, image_path)
    print(f"wrote {image_path} ({spec.frames}x{spec.bins})")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="voiceanalogy",
                                     description="CQT analogy-GAN voice conversion")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override corpus and train seeds")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="synthesize the corpus and sample WAVs")
    p = sub.add_parser("train", help="run the adversarial training loop")
    p.add_argument("corpus", help="corpus container file")
    p = sub.add_parser("convert", help="analogy conversion a:b::c:? to audio")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("a_wav")
    p.add_argument("b_wav")
    p.add_argument("c_wav")
    p.add_argument("d_wav")
    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p = sub.add_parser("render", help="render a WAV to a PGM spectrogram")
    p.add_argument("source_wav")
    p.add_argument("image")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["corpus_seed"] = args.seed
            overrides["train_seed"] = args.seed
        cfg = parse_config(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.corpus)
        if args.command == "convert":
            return cmd_convert(cfg, args.out, args.checkpoint, args.corpus,
                               args.a_wav, args.b_wav, args.c_wav, args.d_wav)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.checkpoint, args.corpus)
        if args.command == "render":
            return cmd_render(cfg, args.out, args.source_wav, args.image)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, C.CorpusConfigError, C.WavFormatError, Q.CqtConfigError,
            FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # internal failure
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
