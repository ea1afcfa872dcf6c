import numpy as np
import pytest

from voiceanalogy import cli
from voiceanalogy.cli import (ConfigError, main, parse_config, write_pgm)
from voiceanalogy.corpus import Utterance, wav_write


@pytest.fixture
def tiny_cfg(tmp_path):
    """Config small enough that gen-data/train finish in seconds."""
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "version = 1\n"
        "bins_per_octave = 4\n"
        "n_bins = 16\n"
        "hop = 256\n"
        "variants_per_cell = 3\n"
        "n_words = 2\n"
        "steps = 2\n"
        "batch_size = 4\n"
        "checkpoint_interval = 1\n"
        "log_interval = 1\n"
        "# a comment line\n")
    return path


class TestConfig:
    def test_defaults_without_file(self):
        cfg = parse_config(None)
        assert cfg["n_speakers"] == 2
        assert cfg["lambda_adv"] == 0.05

    def test_parse_file(self, tiny_cfg):
        cfg = parse_config(tiny_cfg)
        assert cfg["n_bins"] == 16
        assert cfg["steps"] == 2

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("version=1\nbogus_key=3\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            parse_config(p)

    def test_missing_version_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("n_bins=16\n")
        with pytest.raises(ConfigError, match="version"):
            parse_config(p)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("version=1\nnot a pair\n")
        with pytest.raises(ConfigError):
            parse_config(p)


class TestPgm:
    def test_dimensions_and_header(self, tmp_path):
        values = np.random.default_rng(0).random((16, 20))
        path = tmp_path / "img.pgm"
        write_pgm(values, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n20 16\n255\n")
        assert len(raw) == len(b"P5\n20 16\n255\n") + 16 * 20

    def test_constant_maps_to_mid_gray(self, tmp_path):
        path = tmp_path / "flat.pgm"
        write_pgm(np.full((4, 4), 7.0), path)
        body = path.read_bytes().split(b"255\n", 1)[1]
        assert set(body) == {128}

    def test_low_bins_at_bottom(self, tmp_path):
        values = np.zeros((4, 3))
        values[0, :] = 1.0  # lowest bin bright
        path = tmp_path / "img.pgm"
        write_pgm(values, path)
        body = path.read_bytes().split(b"255\n", 1)[1]
        rows = [body[i * 3:(i + 1) * 3] for i in range(4)]
        assert rows[-1] == b"\xff\xff\xff"  # bottom row
        assert rows[0] == b"\x00\x00\x00"

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(np.zeros((0, 0)), tmp_path / "x.pgm")


class TestCommands:
    def test_gen_data_and_reproducibility(self, tiny_cfg, tmp_path):
        out1 = tmp_path / "o1"
        out2 = tmp_path / "o2"
        for out in (out1, out2):
            code = main(["--config", str(tiny_cfg), "--out", str(out), "gen-data"])
            assert code == 0
        assert (out1 / "corpus.bin").read_bytes() == (out2 / "corpus.bin").read_bytes()
        assert (out1 / "samples" / "speaker0_red.wav").exists()
        assert (out1 / "effective_config.txt").exists()

    def test_gen_data_bad_config_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("version=1\nwrong=1\n")
        code = main(["--config", str(bad), "--out", str(tmp_path / "o"), "gen-data"])
        assert code == 2
        assert "wrong" in capsys.readouterr().err

    def test_train_missing_corpus_exits_2(self, tiny_cfg, tmp_path):
        code = main(["--config", str(tiny_cfg), "--out", str(tmp_path / "o"),
                     "train", str(tmp_path / "nope.bin")])
        assert code == 2

    def test_full_pipeline(self, tiny_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "gen-data"]) == 0
        corpus_path = out / "corpus.bin"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "train",
                     str(corpus_path)]) == 0
        ckpt = out / "final_checkpoint.bin"
        assert ckpt.exists()
        assert (out / "metrics.log").exists()

        assert main(["--config", str(tiny_cfg), "--out", str(out), "eval",
                     str(ckpt), str(corpus_path)]) == 0
        assert (out / "eval_report.txt").exists()

        a = out / "samples" / "speaker0_red.wav"
        b = out / "samples" / "speaker1_red.wav"
        c = out / "samples" / "speaker0_blue.wav"
        d = out / "d.wav"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "convert",
                     str(ckpt), str(corpus_path), str(a), str(b), str(c),
                     str(d)]) == 0
        assert d.exists()
        assert (out / "convert_d.pgm").exists()

    def test_convert_wrong_rate_exits_2(self, tiny_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "gen-data"]) == 0
        corpus_path = out / "corpus.bin"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "train",
                     str(corpus_path)]) == 0
        bad = tmp_path / "bad.wav"
        wav_write(Utterance(0, 0, np.zeros(4000), 16000, 0), bad)
        code = main(["--config", str(tiny_cfg), "--out", str(out), "convert",
                     str(out / "final_checkpoint.bin"), str(corpus_path),
                     str(bad), str(bad), str(bad), str(tmp_path / "d.wav")])
        assert code == 2

    def test_render(self, tiny_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "gen-data"]) == 0
        wav = out / "samples" / "speaker0_red.wav"
        img = tmp_path / "spec.pgm"
        assert main(["--config", str(tiny_cfg), "--out", str(out), "render",
                     str(wav), str(img)]) == 0
        raw = img.read_bytes()
        assert raw.startswith(b"P5\n16 16\n")

    def test_render_missing_source_exits_2(self, tiny_cfg, tmp_path):
        code = main(["--config", str(tiny_cfg), "--out", str(tmp_path / "o"),
                     "render", str(tmp_path / "nope.wav"), str(tmp_path / "x.pgm")])
        assert code == 2

    def test_pure_tone_render_band(self, tmp_path):
        cfg = parse_config(None)
        cqt_cfg = cli.cqt_config_from(cfg)
        from voiceanalogy.cqt import compress, design_filterbank, forward_cqt
        fb = design_filterbank(cqt_cfg)
        k = 24
        sig = np.sin(2 * np.pi * fb.center_frequencies[k] * np.arange(4000) / 8000)
        spec = compress(forward_cqt(sig, fb), cqt_cfg)
        path = tmp_path / "tone.pgm"
        write_pgm(spec.values, path)
        body = path.read_bytes().split(b"255\n", 1)[1]
        img = np.frombuffer(body, dtype=np.uint8).reshape(48, 63)
        # brightest row is the tone's bin, counted from the bottom
        assert 48 - 1 - img.mean(axis=1).argmax() == k
