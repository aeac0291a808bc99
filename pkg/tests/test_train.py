"""Integration tests for the meta-training loop."""

import json
import os

import numpy as np
import pytest

from mavenquad.checkpoint import load_checkpoint
from mavenquad.config import default_config
from mavenquad.nn import param_checksum
from mavenquad.train import MetaTrainer, resolve_tasks


def tiny_cfg():
    cfg = default_config()
    cfg.train.iterations = 2
    cfg.train.rollout_steps = 6
    cfg.train.envs_per_task = 2
    cfg.train.checkpoint_every = 100
    cfg.ppo.hidden = (16, 16)
    cfg.ppo.epochs = 2
    cfg.ppo.n_minibatches = 2
    cfg.ppo.latent_refresh = 4
    cfg.encoder.latent_dim = 3
    cfg.encoder.hidden = (16, 16)
    cfg.encoder.context_batch = 8
    cfg.encoder.buffer_capacity = 32
    cfg.encoder.update_every = 3
    cfg.tasks.n_mass_tasks = 2
    cfg.tasks.loss_levels = (0.3,)
    cfg.tasks.fault_rotors = (0, 1)
    cfg.env.max_episode_steps = 40
    return cfg


class TestResolveTasks:
    def test_fixed_baseline_gets_single_nominal_task(self):
        cfg = tiny_cfg()
        tasks = resolve_tasks("standard_rl", "mass", cfg,
                              np.random.default_rng(0))
        assert len(tasks) == 1
        assert tasks[0].mass == cfg.tasks.nominal_mass
        assert np.all(tasks[0].fault.loss == 0.0)

    def test_dr_baseline_samples_per_episode(self):
        assert resolve_tasks("rl_dr", "mass", tiny_cfg(),
                             np.random.default_rng(0)) is None

    def test_meta_methods_get_task_sets(self):
        cfg = tiny_cfg()
        tasks = resolve_tasks("maven", "thrust_loss", cfg,
                              np.random.default_rng(0))
        assert len(tasks) == 2
        assert {int(np.argmax(t.fault.loss)) for t in tasks} == {0, 1}
        assert all(t.fault.loss.max() == 0.3 for t in tasks)


class TestTrainingRun:
    def test_maven_smoke(self, tmp_path):
        cfg = tiny_cfg()
        tr = MetaTrainer(cfg, "mass", "maven", str(tmp_path))
        ckpt_path = tr.train()
        assert os.path.exists(ckpt_path)
        assert tr.env_steps == 2 * 6 * 2 * 2

        ck = load_checkpoint(ckpt_path)
        assert ck.method == "maven"
        assert ck.extra["iteration"] == 2
        assert "omega_kl" in ck.extra
        names = set(ck.tensors)
        assert "policy.actor.w0" in names
        assert "policy.log_std" in names
        assert "encoder.phi.w0" in names
        assert "encoder.f_dyn.w0" in names

        lines = [json.loads(s) for s in
                 open(tmp_path / "train_log.jsonl").read().splitlines()]
        assert len(lines) == 2
        for k in ("iteration", "env_steps", "mean_reward", "pass_rate",
                  "actor_loss", "value_loss", "entropy", "clip_fraction",
                  "enc_kl", "enc_pos", "enc_rew", "enc_spec",
                  "enc_omega_kl"):
            assert k in lines[-1], k
        assert lines[0]["iteration"] == 1
        assert lines[1]["env_steps"] == 48

        manifest = json.load(open(tmp_path / "manifest.json"))
        assert manifest["method"] == "maven"
        assert manifest["seed"] == cfg.train.seed
        assert manifest["config"]["encoder"]["latent_dim"] == 3

    def test_training_is_deterministic(self, tmp_path):
        blobs, logs = [], []
        for tag in ("a", "b"):
            cfg = tiny_cfg()
            run = tmp_path / tag
            tr = MetaTrainer(cfg, "mass", "maven", str(run))
            path = tr.train()
            blobs.append(open(path, "rb").read())
            logs.append(open(run / "train_log.jsonl", "rb").read())
        assert blobs[0] == blobs[1]
        assert logs[0] == logs[1]

    def test_seed_changes_outcome(self, tmp_path):
        blobs = []
        for seed in (0, 1):
            cfg = tiny_cfg()
            run = tmp_path / str(seed)
            tr = MetaTrainer(cfg, "mass", "maven", str(run), seed=seed)
            blobs.append(open(tr.train(), "rb").read())
        assert blobs[0] != blobs[1]

    def test_standard_rl_zero_latent_no_encoder(self, tmp_path):
        cfg = tiny_cfg()
        tr = MetaTrainer(cfg, "mass", "standard_rl", str(tmp_path))
        assert tr.n_tasks == 1
        ro, _ = tr._rollout()
        assert np.all(ro["z"] == 0.0)
        ck = load_checkpoint(tr.train())
        assert not any(n.startswith("encoder.") for n in ck.tensors)

    def test_rl_dr_redraws_dynamics(self, tmp_path):
        cfg = tiny_cfg()
        cfg.env.max_episode_steps = 5  # force resets inside the rollout
        tr = MetaTrainer(cfg, "mass", "rl_dr", str(tmp_path))
        tr.train()
        env = tr.envs[0]
        assert env.dr == "mass"
        assert np.all(env.mass >= cfg.tasks.mass_min)
        assert np.all(env.mass <= cfg.tasks.mass_max)
        # a redraw happened: masses moved off the construction value
        assert np.any(env.mass != cfg.quad.mass)

    def test_frozen_dynamics_head_stays_frozen(self, tmp_path):
        cfg = tiny_cfg()
        tr = MetaTrainer(cfg, "mass", "maven", str(tmp_path))
        before = param_checksum(tr.encoder.f_dyn.params)
        phi_before = param_checksum(tr.encoder.phi.params)
        tr.train()
        assert param_checksum(tr.encoder.f_dyn.params) == before
        assert param_checksum(tr.encoder.phi.params) != phi_before

    def test_ablation_trains_encoder_without_prediction_loss(self, tmp_path):
        cfg = tiny_cfg()
        tr = MetaTrainer(cfg, "mass", "critic_encoder_ablation",
                         str(tmp_path))
        f_dyn_before = param_checksum(tr.encoder.f_dyn.params)
        phi_before = param_checksum(tr.encoder.phi.params)
        path = tr.train()
        assert param_checksum(tr.encoder.phi.params) != phi_before
        assert param_checksum(tr.encoder.f_dyn.params) == f_dyn_before
        lines = [json.loads(s) for s in
                 open(tmp_path / "train_log.jsonl").read().splitlines()]
        assert lines[-1]["enc_pos"] == 0.0  # no prediction loss in play
        ck = load_checkpoint(path)
        assert ck.method == "critic_encoder_ablation"

    def test_latent_refresh_cadence(self, tmp_path):
        cfg = tiny_cfg()
        cfg.train.rollout_steps = 8
        tr = MetaTrainer(cfg, "mass", "maven", str(tmp_path))
        ro, _ = tr._rollout()
        z = ro["z"]  # (T, tasks, envs, d), refresh every 4 steps
        for t0 in (0, 4):
            for dt in (1, 2, 3):
                np.testing.assert_array_equal(z[t0 + dt], z[t0])
        assert not np.allclose(z[4], z[0])

    def test_context_buffers_fill_at_one_row_per_step(self, tmp_path):
        cfg = tiny_cfg()
        tr = MetaTrainer(cfg, "mass", "maven", str(tmp_path))
        tr._rollout()
        for buf in tr.buffers:
            assert len(buf) == cfg.train.rollout_steps

    def test_interrupt_still_writes_checkpoint(self, tmp_path):
        cfg = tiny_cfg()
        cfg.train.iterations = 50
        tr = MetaTrainer(cfg, "mass", "maven", str(tmp_path))
        orig = tr._rollout
        calls = {"n": 0}

        def boom():
            calls["n"] += 1
            if calls["n"] >= 2:
                raise KeyboardInterrupt
            return orig()

        tr._rollout = boom
        with pytest.raises(KeyboardInterrupt):
            tr.train()
        ck = load_checkpoint(str(tmp_path / "checkpoint.bin"))
        assert ck.extra["iteration"] == 1

    def test_unknown_method_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="unknown method"):
            MetaTrainer(tiny_cfg(), "mass", "dagger", str(tmp_path))
