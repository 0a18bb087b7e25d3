import numpy as np
import pytest

from crispedge.cli import main
from crispedge.config import RunConfig, parse_config, parse_overrides
from crispedge.data import load_image, load_manifest
from crispedge.errors import ConfigurationError

TINY = ["--set", "synth_n=4", "--set", "synth_train=3", "--set", "synth_height=32", "--set", "synth_width=32",
        "--set", "epochs=1", "--set", "batch_size=2"]


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=3, channels=(4, 8, 16), apply_nms=True)
        assert parse_config(cfg.to_text()) == cfg

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# hi\n\nlr = 0.01  # faster\nloss=weighted-ce\n")
        assert cfg.lr == 0.01 and cfg.loss == "weighted-ce"

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown config key 'lr_decay'"):
            parse_config("lr_decay = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigurationError, match="epochs"):
            parse_overrides(["epochs=many"])
        with pytest.raises(ConfigurationError, match="loss"):
            parse_overrides(["loss=hinge"])
        with pytest.raises(ConfigurationError, match="line 1"):
            parse_config("just words\n")

    def test_subconfig_errors_surface(self):
        with pytest.raises(ConfigurationError, match="cardinality"):
            parse_overrides(["cardinality=3"])

    def test_documented_defaults_match(self):
        import crispedge.config as mod

        block = mod.__doc__.split("::", 1)[1]
        assert parse_config(block) == RunConfig()


class TestCommands:
    def test_pipeline(self, tmp_path, capsys):
        d = tmp_path
        assert main(TINY + ["synth", "--out", str(d / "data")]) == 0
        train_lines = load_manifest(d / "data" / "train.tsv")
        assert len(train_lines) == 3 * 3  # three annotators per training image
        assert len(load_manifest(d / "data" / "test.tsv")) == 1

        cfg = d / "run.cfg"
        cfg.write_text(f"train_manifest = {d / 'data' / 'train.tsv'}\n")
        assert main(["--config", str(cfg)] + TINY + ["train", "--out", str(d / "m.ckpt")]) == 0
        assert (d / "m.loss.tsv").read_text().startswith("epoch\tloss\n")

        assert main(["predict", "--checkpoint", str(d / "m.ckpt"), "--manifest", str(d / "data" / "test.tsv"),
                     "--out", str(d / "pred")]) == 0
        pred_file = d / "pred" / "synth_0003.pgm"
        assert pred_file.read_bytes().split(b"\n")[2] == b"65535"
        p = load_image(pred_file, allow_16bit=True)
        assert p.shape == (32, 32) and 0 < p.min() and p.max() < 1

        assert main(["--threads", "2", "eval", "--pred", str(d / "pred"), "--manifest", str(d / "data" / "test.tsv"),
                     "--out", str(d / "ev"), "--crispness"]) == 0
        assert "thickness_ratio=" in (d / "ev" / "crispness.txt").read_text()
        assert main(["plot", "--out", str(d / "pr.svg"), str(d / "ev" / "pr_pre_nms.csv")]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert [line.split(":")[0] for line in out] == ["synth", "train", "predict", "eval", "plot"]

    def test_synth_reproducible(self, tmp_path):
        for name in ("a", "b"):
            assert main(["--seed", "7", "synth", "--n", "10", "--out", str(tmp_path / name)]) == 0
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_augment_names(self, tmp_path):
        main(TINY + ["synth", "--out", str(tmp_path / "d")])
        assert main(["augment", "--manifest", str(tmp_path / "d" / "test.tsv"), "--out", str(tmp_path / "aug")]) == 0
        names = sorted(p.name for p in (tmp_path / "aug" / "images").iterdir())
        assert len(names) == 32
        assert names[0].startswith("synth_0003_s") and names[0].endswith("_r0_f0.pgm")

    def test_exit_codes(self, tmp_path, capsys):
        assert main(["--set", "bogus=1", "synth", "--out", str(tmp_path)]) == 2
        assert main(["predict", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path), "x.pgm"]) == 3
        (tmp_path / "bad.ckpt").write_bytes(b"CRSPEDGE\x01\x00\x00\x00junk")
        assert main(["predict", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path), "x.pgm"]) == 3
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert capsys.readouterr().out == ""

    def test_numeric_exit(self, tmp_path, monkeypatch):
        import crispedge.cli as cli

        real = cli.synth_split

        def blank(cfg):
            # an empty annotation with epsilon = 0 leaves the Dice term undefined
            split = real(cfg)
            for s in split.train:
                s.annotation[:] = 0
            return split

        monkeypatch.setattr(cli, "synth_split", blank)
        args = TINY + ["--set", "loss=dice", "--set", "epsilon=0", "train", "--out", str(tmp_path / "m.ckpt")]
        assert main(args) == 4

    def test_train_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(TINY + ["train", "--out", str(tmp_path / f"{name}.ckpt")]) == 0
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
