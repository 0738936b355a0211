import numpy as np
import pytest

from dscl.cli import main
from dscl.config import ConfigFileError, config_to_text, parse_config_text
from dscl.pipeline import TrainConfig


class TestConfigFile:
    def test_parse_known_keys_and_comments(self):
        text = "# comment\nalpha = 0.5\nmode = M3  # trailing\nbackground_group = false\n"
        values = parse_config_text(text)
        assert values == {"alpha": 0.5, "mode": "M3", "background_group": False}

    def test_unknown_key_rejected_listing_valid(self):
        with pytest.raises(ConfigFileError, match="alpha, beta, tau"):
            parse_config_text("bogus = 1\n")

    def test_bad_value_types(self):
        with pytest.raises(ConfigFileError):
            parse_config_text("steps = many\n")
        with pytest.raises(ConfigFileError):
            parse_config_text("mode = M9\n")
        with pytest.raises(ConfigFileError):
            parse_config_text("background_group = maybe\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigFileError, match="duplicate"):
            parse_config_text("alpha = 1\nalpha = 2\n")

    def test_round_trip(self):
        cfg = TrainConfig(alpha=0.25, mode="M1", steps=7)
        text = config_to_text(cfg.to_kv())
        assert TrainConfig.from_kv(parse_config_text(text)) == cfg

    def test_shipped_default_config_has_paper_weights(self):
        from pathlib import Path

        cfg = TrainConfig.from_kv(
            parse_config_text(Path("configs/default.cfg").read_text())
        )
        assert cfg.alpha == 0.6 and cfg.beta == 0.4


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(
        [
            "generate",
            "--count",
            "8",
            "--out",
            str(out),
            "--set",
            "width = 16",
            "--set",
            "height = 16",
            "--set",
            "seed = 5",
        ]
    )
    assert code == 0
    return out


def run_train(tmp_path, corpus_dir, extra=()):
    out = tmp_path / "run"
    args = [
        "train",
        "--manifest",
        str(corpus_dir / "manifest.txt"),
        "--out",
        str(out),
        "--set", "width = 16",
        "--set", "height = 16",
        "--set", "depth = 16",
        "--set", "steps = 3",
        "--set", "batch = 2",
        "--set", "lr = 0.05",
        *extra,
    ]
    assert main(args) == 0
    return out


class TestCli:
    def test_help_exits_zero_for_every_subcommand(self, capsys):
        for cmd in ("generate", "train", "eval", "ablate", "bench", "gradcheck", "dump-groups"):
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
            capsys.readouterr()

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus", "x"])
        assert exc.value.code == 2  # argparse usage failure

    def test_unknown_config_key_exit_code_1(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense = 1\n")
        assert main(["generate", "--config", str(bad), "--count", "1", "--out", str(tmp_path)]) == 1

    def test_generate_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            args = [
                "generate", "--count", "3", "--out", str(out),
                "--set", "width = 16", "--set", "height = 16",
            ]
            assert main(args) == 0
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_train_eval_dump_flow(self, tmp_path, corpus_dir, capsys):
        run_dir = run_train(tmp_path, corpus_dir)
        assert (run_dir / "checkpoint.dst").exists()
        assert (run_dir / "metrics.csv").exists()
        capsys.readouterr()

        eval_csv = tmp_path / "eval.csv"
        code = main(
            [
                "eval",
                "--checkpoint", str(run_dir / "checkpoint.dst"),
                "--manifest", str(corpus_dir / "manifest.txt"),
                "--out", str(eval_csv),
            ]
        )
        assert code == 0
        printed = capsys.readouterr().out
        assert "mIoU = " in printed
        value = float(printed.split("mIoU = ")[-1].split()[0])
        assert 0.0 <= value <= 1.0
        assert eval_csv.read_text().startswith("class,iou")

        code = main(
            [
                "dump-groups",
                "--checkpoint", str(run_dir / "checkpoint.dst"),
                "--manifest", str(corpus_dir / "manifest.txt"),
                "--image-id", "scene00000",
                "--out", str(tmp_path / "dumps"),
            ]
        )
        assert code == 0
        from dscl.io import read_tensor

        assignment = read_tensor(tmp_path / "dumps" / "scene00000_groups.dst").data
        assert assignment.dtype == np.uint16
        proto_text = (tmp_path / "dumps" / "scene00000_prototypes.csv").read_text()
        assert proto_text.startswith("group,class,")

    def test_train_zero_steps_checkpoint_equals_initialization(self, tmp_path, corpus_dir):
        from dscl.pipeline import init_state, load_checkpoint

        run_dir = run_train(tmp_path, corpus_dir, extra=["--set", "steps = 0"])
        state, cfg = load_checkpoint(run_dir / "checkpoint.dst")
        fresh = init_state(cfg)
        for (name, a), (_, b) in zip(state.parameters().items(), fresh.parameters().items()):
            assert np.array_equal(a.data, b.data), name

    def test_train_determinism_bit_identical_outputs(self, tmp_path, corpus_dir):
        run_a = run_train(tmp_path / "a", corpus_dir)
        run_b = run_train(tmp_path / "b", corpus_dir)
        assert (run_a / "checkpoint.dst").read_bytes() == (run_b / "checkpoint.dst").read_bytes()
        assert (run_a / "metrics.csv").read_bytes() == (run_b / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path, corpus_dir):
        full = run_train(tmp_path / "full", corpus_dir, extra=["--set", "steps = 6"])
        half = run_train(tmp_path / "half", corpus_dir, extra=["--set", "steps = 3"])
        resumed_dir = tmp_path / "resumed"
        args = [
            "train",
            "--manifest", str(corpus_dir / "manifest.txt"),
            "--out", str(resumed_dir),
            "--resume", str(half / "checkpoint.dst"),
            "--set", "width = 16", "--set", "height = 16", "--set", "depth = 16",
            "--set", "steps = 3", "--set", "batch = 2", "--set", "lr = 0.05",
        ]
        assert main(args) == 0
        from dscl.pipeline import load_checkpoint

        full_state, _ = load_checkpoint(full / "checkpoint.dst")
        resumed_state, _ = load_checkpoint(resumed_dir / "checkpoint.dst")
        for (name, a), (_, b) in zip(
            full_state.parameters().items(), resumed_state.parameters().items()
        ):
            assert np.array_equal(a.data, b.data), name

    def test_gradcheck_cli(self, capsys):
        assert main(["gradcheck", "--seed", "1", "--tol", "1e-4"]) == 0
        out = capsys.readouterr().out
        for term in ("ce", "pgcl", "sgcl", "m4"):
            assert f"{term}: PASS" in out

    def test_bench_cli(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--sizes", "8", "--groups", "2", "--repeats", "3", "--out", str(out)]) == 0
        text = out.read_text().splitlines()
        assert text[0] == "resolution,G,variant,median_seconds,pairs"
        assert len(text) == 3
        capsys.readouterr()

    def test_ablate_cli_fast(self, tmp_path, capsys):
        args = [
            "ablate",
            "--seeds", "1,2,3",
            "--train-count", "3",
            "--eval-count", "2",
            "--set", "width = 16", "--set", "height = 16", "--set", "depth = 8",
            "--set", "steps = 0", "--set", "batch = 2",
            "--set", f"out_dir = {tmp_path}",
        ]
        assert main(args) == 0
        text = (tmp_path / "ablation.csv").read_text().splitlines()
        assert text[0] == "mode,seed,miou_base,miou_refined"
        assert len(text) == 16
        capsys.readouterr()

    def test_missing_manifest_exit_1(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 1
