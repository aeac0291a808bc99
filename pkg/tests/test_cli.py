"""End-to-end CLI tests (argument handling, override plumbing, exit codes)."""

import json
import os
import subprocess
import sys

import pytest

from mavenquad.cli import main, parse_extra_overrides, CliError

TINY = ["--train.iterations", "1", "--train.rollout_steps", "4",
        "--train.envs_per_task", "2", "--ppo.hidden", "[16,16]",
        "--ppo.epochs", "1", "--ppo.n_minibatches", "2",
        "--encoder.hidden", "[16,16]", "--encoder.latent_dim", "2",
        "--encoder.context_batch", "8", "--tasks.n_mass_tasks", "2",
        "--env.max_episode_steps", "120"]


def run_train(tmp_path, extra=()):
    out = str(tmp_path / "run")
    code = main(["train", "--scenario", "mass", "--method", "maven",
                 "--seed", "3", "--out", out, "--quiet", *TINY, *extra])
    return code, out


class TestOverrideParsing:
    def test_pairs_and_equals_forms(self):
        got = parse_extra_overrides(["--ppo.lr", "0.001",
                                     "--train.seed=4"])
        assert got == [("ppo.lr", "0.001"), ("train.seed", "4")]

    def test_unknown_flag_rejected(self):
        with pytest.raises(CliError, match="unknown flag"):
            parse_extra_overrides(["--bogus", "3"])

    def test_missing_value_rejected(self):
        with pytest.raises(CliError, match="missing a value"):
            parse_extra_overrides(["--ppo.lr"])


class TestTrainCommand:
    def test_writes_checkpoint_and_log(self, tmp_path, capsys):
        code, out = run_train(tmp_path)
        assert code == 0
        assert os.path.exists(os.path.join(out, "checkpoint.bin"))
        assert os.path.exists(os.path.join(out, "train_log.jsonl"))
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["seed"] == 3
        assert manifest["config"]["encoder"]["latent_dim"] == 2
        assert "checkpoint:" in capsys.readouterr().out

    def test_env_var_overrides_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MAVEN_SEED", "41")
        code, out = run_train(tmp_path)
        assert code == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["seed"] == 41

    def test_config_file_plus_override(self, tmp_path):
        cfg_file = tmp_path / "cfg.yaml"
        cfg_file.write_text("train:\n  iterations: 1\n  rollout_steps: 4\n"
                            "  envs_per_task: 2\nppo:\n  hidden: [16, 16]\n"
                            "  epochs: 1\n  n_minibatches: 2\n"
                            "encoder:\n  hidden: [16, 16]\n  latent_dim: 2\n"
                            "  context_batch: 8\n"
                            "tasks:\n  n_mass_tasks: 2\n")
        out = str(tmp_path / "run")
        code = main(["train", "--scenario", "mass", "--method", "maven",
                     "--config", str(cfg_file), "--out", out, "--quiet",
                     "--encoder.latent_dim", "3"])
        assert code == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["config"]["encoder"]["latent_dim"] == 3

    def test_unknown_flag_exits_2_with_usage(self, tmp_path, capsys):
        code = main(["train", "--bogus", "3", "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "usage:" in err and "unknown flag" in err

    def test_invalid_yaml_diagnostic(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train:\n  iterations: [unclosed\n")
        code = main(["train", "--config", str(bad), "--out",
                     str(tmp_path / "r"), "--quiet"])
        assert code == 1
        assert "line" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        code, _ = run_train(tmp_path, extra=["--train.warp_speed", "9"])
        assert code == 1
        assert "unknown config key" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny maven checkpoint shared across eval/inspect tests."""
    tmp = tmp_path_factory.mktemp("cli_ckpt")
    code, out = run_train(tmp)
    assert code == 0
    return os.path.join(out, "checkpoint.bin")


class TestEvalCommand:
    def test_eval_writes_report(self, trained, tmp_path, capsys):
        out = str(tmp_path / "ev")
        code = main(["eval", "--checkpoint", trained, "--suite",
                     "switchback", "--tasks", "mass=0.33", "--out", out,
                     "--quiet"])
        assert code == 0
        assert os.path.exists(os.path.join(out, "report.csv"))
        assert os.path.exists(os.path.join(out, "summary.json"))
        assert "success" in capsys.readouterr().out

    def test_eval_random_suite_n(self, trained, tmp_path):
        out = str(tmp_path / "ev")
        code = main(["eval", "--checkpoint", trained, "--suite",
                     "random_tracks", "--n", "2", "--tasks", "mass=0.3",
                     "--out", out, "--quiet", "--deterministic-latent"])
        assert code == 0
        rows = open(os.path.join(out, "report.csv")).read().splitlines()
        assert len(rows) == 1 + 2  # header + 2 tracks x 1 task

    def test_architecture_override_mismatch_fails(self, trained, capsys):
        code = main(["eval", "--checkpoint", trained, "--suite",
                     "switchback", "--tasks", "mass=0.33", "--quiet",
                     "--encoder.latent_dim", "12"])
        assert code == 1
        assert "shape" in capsys.readouterr().err

    def test_missing_checkpoint_fails(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.bin"),
                     "--quiet"])
        assert code == 1

    def test_bad_task_kind_rejected(self, trained, capsys):
        code = main(["eval", "--checkpoint", trained, "--tasks",
                     "warp=1,2", "--quiet"])
        assert code == 2
        assert "unknown task kind" in capsys.readouterr().err


class TestBenchCommand:
    def test_prints_rate(self, capsys):
        code = main(["bench-throughput", "--envs", "8", "--steps", "5"])
        assert code == 0
        out = capsys.readouterr().out
        assert "env steps/sec" in out

    def test_suite_writes_report(self, tmp_path, capsys, monkeypatch):
        import mavenquad.cli as cli_mod

        def fake_suite(n_workers=None, seed=0, progress=False):
            return [{"n_envs": n, "steps": 5, "n_workers": 1,
                     "elapsed_s": 0.1, "env_steps_per_sec": n * 50.0,
                     "us_per_env_step": 2.0} for n in (64, 1024)]

        monkeypatch.setattr(cli_mod, "throughput_suite", fake_suite)
        report = str(tmp_path / "tp.md")
        code = main(["bench-throughput", "--suite", "--report", report])
        assert code == 0
        text = open(report).read()
        assert "Parallel efficiency" in text
        assert "host CPU count" in text


class TestInspectCommand:
    def test_prints_metadata(self, trained, capsys):
        code = main(["inspect-checkpoint", trained])
        assert code == 0
        out = capsys.readouterr().out
        assert "method: maven" in out
        assert "tensor policy.actor.w0" in out

    def test_missing_file(self, tmp_path, capsys):
        code = main(["inspect-checkpoint", str(tmp_path / "ghost.bin")])
        assert code == 1


def test_console_entry_point(trained):
    """The installed script must resolve and run."""
    r = subprocess.run([sys.executable, "-m", "mavenquad.cli",
                        "inspect-checkpoint", trained],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "method: maven" in r.stdout
