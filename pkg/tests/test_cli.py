import csv
import json

import numpy as np
import pytest

from vqtimbre import audio, checkpoint, cli
from vqtimbre import tensor as T
from vqtimbre.config import ConfigError, RunConfig
from vqtimbre.evalharness import synth_corpus

SMALL = ["--set", "batch=1", "--set", "segment_seconds=0.25", "--set", "synth_seconds=3"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--iters", "200", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(run_dir):
    return str(run_dir / "checkpoints" / "model.ckpt")


@pytest.fixture(scope="module")
def source_wav(tmp_path_factory):
    path = tmp_path_factory.mktemp("wav") / "source.wav"
    audio.write_wav(path, synth_corpus(2, 2.0, seed=9).audio[1])
    return str(path)


class TestRunConfig:
    def test_defaults_are_toy(self):
        cfg = RunConfig.parse("")
        assert cfg.model.window == 512 and cfg.model.codebook_size == 32
        assert cfg.run["preset"] == "toy"

    def test_parse_types_and_comments(self):
        text = "# run\nlr = 0.001\nbatch=4  # small\nstft_windows = 128,256\nquantize = false\n"
        cfg = RunConfig.parse(text)
        assert cfg.train.lr == 0.001 and cfg.train.batch == 4
        assert cfg.model.stft_windows == (128, 256) and cfg.model.quantize is False

    def test_overrides_win(self):
        cfg = RunConfig.parse("batch = 4\n", overrides=["batch=6"])
        assert cfg.train.batch == 6

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match=r"cfg:2: unknown key 'colour'"):
            RunConfig.parse("batch = 2\ncolour = red\n", "cfg")

    @pytest.mark.parametrize("text", ["batch = two\n", "just words\n", "preset = huge\n", "batch = 0\n"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            RunConfig.parse(text)

    def test_dump_round_trip(self):
        cfg = RunConfig.parse("lr = 0.003\nlatent_dim = 8\nsynth_class = reed\n")
        again = RunConfig.parse(cfg.dumps())
        assert again.to_dict() == cfg.to_dict()

    def test_paper_preset(self):
        cfg = RunConfig.parse("preset = paper\n")
        assert cfg.model.window == 2048 and cfg.model.codebook_size == 1024

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.load(tmp_path / "nope.cfg")


class TestTrainCommand:
    def test_layout_and_reloadable(self, run_dir, ckpt):
        assert (run_dir / "logs" / "train_log.csv").exists()
        assert (run_dir / "checkpoints" / "final.ckpt").exists()
        model, meta, _ = checkpoint.load_model(ckpt)
        assert meta["step"] == 200 and model.codebook is not None

    def test_config_echoed_into_checkpoint(self, ckpt):
        _, meta, _ = checkpoint.load_model(ckpt)
        echoed = meta["extra"]["run_config"]
        assert echoed["iters"] == "200" and echoed["batch"] == "1" and echoed["synth_seconds"] == "3.0"

    def test_idempotent(self, tmp_path):
        args = ["train", "--iters", "3", *SMALL]
        assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
        assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
        for name in ("checkpoints/model.ckpt", "checkpoints/final.ckpt", "logs/train_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_file_and_baseline(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("iters = 2\nbatch = 1\nsegment_seconds = 0.25\nsynth_seconds = 3\nsynth_class = breath\n")
        assert cli.main(["train", "--config", str(cfg), "--baseline", "--out", str(tmp_path)]) == 0
        model, _, arrays = checkpoint.load_model(tmp_path / "checkpoints" / "model.ckpt")
        assert model.codebook is None and not any("codebook" in k for k in arrays)

    def test_wav_corpus(self, tmp_path, source_wav):
        assert cli.main(["train", "--iters", "2", "--corpus", source_wav, "--out", str(tmp_path),
                         "--set", "batch=1", "--set", "segment_seconds=0.25"]) == 0

    def test_resume(self, tmp_path, run_dir):
        out = tmp_path / "resumed"
        resume = str(run_dir / "checkpoints" / "final.ckpt")
        assert cli.main(["train", "--iters", "202", "--resume", resume, "--out", str(out), *SMALL]) == 0
        _, meta, _ = checkpoint.load_model(out / "checkpoints" / "model.ckpt")
        assert meta["step"] == 202


class TestAudioCommands:
    def test_reconstruct(self, tmp_path, ckpt, source_wav, capsys):
        assert cli.main(["reconstruct", "--checkpoint", ckpt, "--input", source_wav, "--out", str(tmp_path)]) == 0
        assert "LSD" in capsys.readouterr().out
        w, sr = audio.read_wav(tmp_path / "audio" / "source_recon.wav")
        assert sr == 22050 and w.size > 0

    def test_transfer_outputs_and_idempotence(self, tmp_path, ckpt, source_wav):
        for sub in ("a", "b"):
            assert cli.main(["transfer", "--checkpoint", ckpt, "--input", source_wav,
                             "--out", str(tmp_path / sub)]) == 0
        for name in ("audio/source_transfer.wav", "reports/source_codes.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        with open(tmp_path / "a" / "reports" / "source_codes.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert all(0 <= int(r["code_index"]) < 32 for r in rows)

    def test_map_descriptors(self, tmp_path, ckpt):
        assert cli.main(["map-descriptors", "--checkpoint", ckpt, "--descriptor", "bandwidth",
                         "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "reports" / "map_bandwidth.csv").read_text().splitlines()
        assert lines[0] == "code_index,descriptor,value,valid" and len(lines) == 33

    def test_synth_descriptor_ramp(self, tmp_path, ckpt):
        assert cli.main(["synth-descriptor", "--checkpoint", ckpt, "--descriptor", "centroid",
                         "--ramp", "500:4000:200", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "reports" / "synth_centroid.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 200
        assert float(rows[0]["target"]) == 500 and float(rows[-1]["target"]) == 4000
        w, _ = audio.read_wav(tmp_path / "audio" / "synth_centroid.wav")
        assert w.size == 199 * 128 + 512

    def test_synth_descriptor_from_map_and_targets(self, tmp_path, ckpt):
        cli.main(["map-descriptors", "--checkpoint", ckpt, "--out", str(tmp_path)])
        targets = tmp_path / "targets.csv"
        targets.write_text("target\n1000\n2000\n3000\n")
        assert cli.main(["synth-descriptor", "--checkpoint", ckpt, "--targets", str(targets),
                         "--map", str(tmp_path / "reports" / "map_centroid.csv"), "--out", str(tmp_path)]) == 0

    def test_inspect(self, ckpt, capsys):
        assert cli.main(["inspect", "--checkpoint", ckpt]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["meta"]["step"] == 200
        assert info["codebook"]["size"] == 32
        assert info["codebook"]["used"] == len(info["codebook"]["usage"]) > 0

    def test_eval_table(self, tmp_path, ckpt, capsys):
        cfg = tmp_path / "eval.cfg"
        cfg.write_text("synth_seconds = 4\n")
        assert cli.main(["eval", "--config", str(cfg), "--models", ckpt, ckpt, ckpt,
                         "--baselines", ckpt, ckpt, ckpt, "--out", str(tmp_path)]) == 0
        table = (tmp_path / "reports" / "eval_table.txt").read_text()
        assert "[vq-vae]" in table and "[baseline]" in table
        for name in ("reed", "brass", "breath", "average"):
            assert name in table
        assert table in capsys.readouterr().out
        assert (tmp_path / "reports" / "eval_vq-vae.csv").exists()


class TestExitCodes:
    def test_usage_error_from_argparse(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transfer"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["dance"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path, source_wav):
        code = cli.main(["transfer", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", source_wav])
        assert code == cli.EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        assert cli.main(["train", "--set", "wobble=1", "--out", str(tmp_path)]) == cli.EXIT_USAGE

    def test_ramp_and_targets_exclusive(self, ckpt):
        assert cli.main(["synth-descriptor", "--checkpoint", ckpt]) == cli.EXIT_USAGE

    def test_bad_wav_is_data_error(self, tmp_path, ckpt):
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"RIFF\x00\x00\x00\x00JUNK")
        code = cli.main(["transfer", "--checkpoint", ckpt, "--input", str(bad), "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_corrupt_checkpoint_is_data_error(self, tmp_path, ckpt):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(open(ckpt, "rb").read()[:100])
        assert cli.main(["inspect", "--checkpoint", str(bad)]) == cli.EXIT_DATA

    def test_silent_corpus_is_data_error(self, tmp_path):
        silent = tmp_path / "silent.wav"
        audio.write_wav(silent, np.zeros(22050))
        with pytest.warns(UserWarning):
            code = cli.main(["train", "--iters", "1", "--corpus", str(silent), "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_divergence_is_numeric_failure(self, tmp_path, ckpt):
        model, _, _ = checkpoint.load_model(ckpt)
        model.params["dec.proj.w"].data[0, 0] = np.nan
        poisoned = checkpoint.save_model(tmp_path / "poisoned.ckpt", model, T.Adam(model.params), step=0)
        code = cli.main(["train", "--iters", "5", "--resume", str(poisoned), *SMALL, "--out", str(tmp_path)])
        assert code == cli.EXIT_NUMERIC
        assert (tmp_path / "checkpoints" / "emergency.ckpt").exists()
