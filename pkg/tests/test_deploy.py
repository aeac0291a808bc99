"""Tests for trajectory metrics, CSV export, and the deployment loop."""

import csv
import math
import os

import numpy as np
import pytest

from mavenquad.checkpoint import save_checkpoint
from mavenquad.config import SeedTree, config_to_dict, default_config
from mavenquad.deploy import (CheckpointMismatch, OnlineContext,
                              fault_eval_tasks, load_deployment,
                              mass_eval_tasks, meta_test_episode,
                              resolve_suite, run_benchmark, trial_rngs)
from mavenquad.encoder import Encoder, aggregate_posterior_np
from mavenquad.envs import TaskSpec, TerminationStatus
from mavenquad.dynamics import FaultSpec
from mavenquad.metrics import (EvalReport, Trajectory, export_trajectory,
                               load_trajectory, round9, round9_array,
                               trajectory_metrics)
from mavenquad.train import MetaTrainer


def eval_cfg():
    cfg = default_config()
    cfg.ppo.hidden = (16, 16)
    cfg.encoder.hidden = (16, 16)
    cfg.encoder.latent_dim = 3
    cfg.env.max_episode_steps = 200
    return cfg


def make_trajectory(success=True, n=6, d=None, seed=0):
    rng = np.random.default_rng(seed)
    wp = np.zeros(n + 1, dtype=np.int64)
    if success:
        wp[-1] = 1
    thr = rng.random(n + 1)
    thr[-1] = 0.0
    return Trajectory(
        t=np.arange(n + 1) * 0.01, p=rng.normal(size=(n + 1, 3)),
        v=rng.normal(size=(n + 1, 3)), w=rng.normal(size=(n + 1, 3)),
        throttle=thr, rate_cmd=rng.normal(size=(n + 1, 3)),
        waypoint_index=wp, n_waypoints=1,
        status=int(TerminationStatus.SUCCESS if success
                   else TerminationStatus.TIMEOUT),
        z_mu=None if d is None else rng.normal(size=(n + 1, d)),
        z_var=None if d is None else rng.random((n + 1, d)) + 0.1)


class TestRound9:
    def test_examples(self):
        assert round9(1.0 / 3.0) == 0.333333333
        assert round9(0.0) == 0.0
        assert round9(-123456789.123) == -123456789.0

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for v in rng.normal(scale=1e3, size=200):
            assert round9(round9(v)) == round9(v)

    def test_array_helper(self):
        arr = np.array([[1.0 / 3.0, 2.0 / 3.0]])
        np.testing.assert_array_equal(round9_array(arr),
                                      [[0.333333333, 0.666666667]])


class TestTrajectoryMetrics:
    def test_straight_line_oracle(self):
        # two 0.01 s steps along +x at 1 m per step, waypoint hit on row 2
        t = np.array([0.0, 0.01, 0.02])
        p = np.array([[0.0, 0, 1], [1.0, 0, 1], [2.0, 0, 1]])
        v = np.array([[1.0, 0, 0], [3.0, 0, 0], [2.0, 0, 0]])
        traj = Trajectory(
            t=t, p=p, v=v, w=np.zeros((3, 3)),
            throttle=np.array([0.9, 0.5, 0.0]), rate_cmd=np.zeros((3, 3)),
            waypoint_index=np.array([0, 0, 1]), n_waypoints=1,
            status=int(TerminationStatus.SUCCESS))
        m = trajectory_metrics(traj)
        assert m["success"] is True
        assert m["completion_time"] == 0.02
        assert m["avg_vel"] == pytest.approx(2.0 / 0.02)
        assert m["max_vel"] == 3.0
        assert m["throttle_frac"] == 50.0  # one of two pre-completion actions
        assert m["steps"] == 2

    def test_failure_has_nan_times(self):
        traj = make_trajectory(success=False)
        m = trajectory_metrics(traj)
        assert m["success"] is False
        assert math.isnan(m["completion_time"])
        assert math.isnan(m["avg_vel"])
        assert m["max_vel"] > 0.0

    def test_clock_stops_at_first_entry(self):
        # cursor reaches the track length mid-trajectory; later rows ignored
        t = np.arange(5) * 0.01
        p = np.zeros((5, 3))
        p[:, 0] = np.arange(5)
        traj = Trajectory(
            t=t, p=p, v=np.zeros((5, 3)), w=np.zeros((5, 3)),
            throttle=np.zeros(5), rate_cmd=np.zeros((5, 3)),
            waypoint_index=np.array([0, 1, 2, 2, 2]), n_waypoints=2,
            status=int(TerminationStatus.SUCCESS))
        m = trajectory_metrics(traj)
        assert m["completion_time"] == 0.02
        assert m["avg_vel"] == pytest.approx(2.0 / 0.02)

    def test_metrics_computed_at_export_precision(self):
        # a position component with >9 significant digits must be rounded
        # before the path length enters the average-velocity division
        t = np.array([0.0, 0.01])
        p = np.array([[0.0, 0.0, 0.0], [0.123456789123456, 0.0, 0.0]])
        traj = Trajectory(
            t=t, p=p, v=np.zeros((2, 3)), w=np.zeros((2, 3)),
            throttle=np.zeros(2), rate_cmd=np.zeros((2, 3)),
            waypoint_index=np.array([0, 1]), n_waypoints=1,
            status=int(TerminationStatus.SUCCESS))
        m = trajectory_metrics(traj)
        assert m["avg_vel"] == 0.123456789 / 0.01


class TestCsvRoundtrip:
    def test_header_layout_with_latent(self, tmp_path):
        traj = make_trajectory(d=2)
        path = tmp_path / "traj.csv"
        export_trajectory(traj, str(path))
        header = open(path).readline().strip().split(",")
        assert header == ["t", "px", "py", "pz", "vx", "vy", "vz",
                          "wx", "wy", "wz", "throttle", "wcx", "wcy", "wcz",
                          "z_mu_1", "z_mu_2", "z_var_1", "z_var_2",
                          "waypoint_index"]

    def test_z_columns_absent_for_baselines(self, tmp_path):
        traj = make_trajectory(d=None)
        path = tmp_path / "traj.csv"
        export_trajectory(traj, str(path))
        header = open(path).readline()
        assert "z_mu" not in header and "z_var" not in header
        back = load_trajectory(str(path), n_waypoints=1)
        assert back.z_mu is None

    def test_row_count_is_steps_plus_one(self, tmp_path):
        traj = make_trajectory(n=9)
        path = tmp_path / "t.csv"
        export_trajectory(traj, str(path))
        rows = list(csv.reader(open(path)))
        assert len(rows) == 1 + 9 + 1

    def test_nine_significant_digits(self, tmp_path):
        traj = make_trajectory(n=1)
        traj.p[0, 0] = 0.123456789123456
        path = tmp_path / "t.csv"
        export_trajectory(traj, str(path))
        row = open(path).read().splitlines()[1].split(",")
        assert row[1] == "0.123456789"

    def test_reimport_reproduces_metrics_exactly(self, tmp_path):
        for seed, success in ((0, True), (1, False), (2, True)):
            traj = make_trajectory(success=success, n=25, d=3, seed=seed)
            path = tmp_path / f"t{seed}.csv"
            export_trajectory(traj, str(path))
            back = load_trajectory(str(path), n_waypoints=traj.n_waypoints,
                                   status=traj.status)
            m0 = trajectory_metrics(traj)
            m1 = trajectory_metrics(back)
            for k in ("completion_time", "avg_vel", "max_vel",
                      "throttle_frac"):
                if isinstance(m0[k], float) and math.isnan(m0[k]):
                    assert math.isnan(m1[k])
                else:
                    assert m0[k] == m1[k], k
            assert m0["success"] == m1["success"]

    def test_mangled_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_trajectory(str(path), n_waypoints=1)


class TestEvalReport:
    def make_report(self):
        rep = EvalReport()
        task = TaskSpec(0, 0.33, FaultSpec()).describe()
        for i, success in enumerate((True, True, False, True)):
            rep.add("maven", task, f"track{i}",
                    {"success": success, "completion_time":
                     1.0 + i if success else float("nan"),
                     "avg_vel": 2.0, "max_vel": 3.0, "throttle_frac": 10.0,
                     "steps": 100, "status": 2 if success else 3})
        return rep

    def test_aggregates(self):
        agg = self.make_report().aggregates()
        assert len(agg) == 1
        assert agg[0]["success_rate"] == 75.0
        assert agg[0]["mean_completion_time"] == pytest.approx(
            (1.0 + 2.0 + 4.0) / 3.0)
        assert agg[0]["n_trials"] == 4

    def test_success_rate_filter(self):
        rep = self.make_report()
        assert rep.success_rate(method="maven") == 75.0
        with pytest.raises(ValueError):
            rep.success_rate(method="ghost")

    def test_csv_written_deterministically(self, tmp_path):
        blobs = []
        for tag in ("a", "b"):
            p = tmp_path / f"{tag}.csv"
            self.make_report().write_csv(str(p))
            blobs.append(p.read_bytes())
        assert blobs[0] == blobs[1]
        header = blobs[0].decode().splitlines()[0]
        assert header.startswith("method,task_id,mass")


class TestOnlineContext:
    def make_ctx(self, capacity=256):
        cfg = eval_cfg()
        ss = np.random.SeedSequence(0).spawn(3)
        enc = Encoder(cfg.encoder, *[np.random.default_rng(s) for s in ss])
        return OnlineContext(enc, capacity), enc

    def test_empty_buffer_gives_prior(self):
        ctx, _ = self.make_ctx()
        mu, var = ctx.posterior()
        np.testing.assert_array_equal(mu, 0.0)
        np.testing.assert_array_equal(var, 1.0)

    def test_posterior_matches_full_recompute(self):
        ctx, enc = self.make_ctx()
        rng = np.random.default_rng(1)
        for _ in range(20):
            ctx.push(rng.normal(size=22), rng.normal(size=4),
                     float(rng.normal()), rng.normal(size=22))
        mu, var = ctx.posterior()
        mu_f, var_f = enc.encode_factor_np(ctx.buffer.context_rows())
        mu_ref, var_ref = aggregate_posterior_np(mu_f, var_f)
        np.testing.assert_allclose(mu, mu_ref, atol=1e-12)
        np.testing.assert_allclose(var, var_ref, atol=1e-12)

    def test_capacity_caps_size(self):
        ctx, _ = self.make_ctx(capacity=8)
        rng = np.random.default_rng(2)
        for t in range(1, 12):
            ctx.push(rng.normal(size=22), rng.normal(size=4), 0.0,
                     rng.normal(size=22))
            assert len(ctx) == min(t, 8)

    def test_eviction_updates_cache(self):
        # after wraparound the posterior must reflect the newest rows only
        ctx, enc = self.make_ctx(capacity=4)
        rng = np.random.default_rng(3)
        for _ in range(9):
            ctx.push(rng.normal(size=22), rng.normal(size=4), 0.0,
                     rng.normal(size=22))
        mu, var = ctx.posterior()
        mu_f, var_f = enc.encode_factor_np(ctx.buffer.context_rows())
        mu_ref, var_ref = aggregate_posterior_np(mu_f, var_f)
        np.testing.assert_allclose(mu, mu_ref, atol=1e-12)
        np.testing.assert_allclose(var, var_ref, atol=1e-12)


def train_tiny(tmp_path, method, iterations=2, seed=0):
    cfg = default_config()
    cfg.train.iterations = iterations
    cfg.train.rollout_steps = 6
    cfg.train.envs_per_task = 2
    cfg.ppo.hidden = (16, 16)
    cfg.ppo.epochs = 2
    cfg.ppo.n_minibatches = 2
    cfg.ppo.latent_refresh = 4
    cfg.encoder.latent_dim = 3
    cfg.encoder.hidden = (16, 16)
    cfg.encoder.context_batch = 8
    cfg.encoder.buffer_capacity = 32
    cfg.tasks.n_mass_tasks = 2
    cfg.env.max_episode_steps = 150
    run = tmp_path / f"run_{method}"
    tr = MetaTrainer(cfg, "mass", method, str(run), seed=seed)
    return tr.train()


class TestDeploymentLoading:
    def test_roundtrip_restores_tensors(self, tmp_path):
        path = train_tiny(tmp_path, "maven")
        dep = load_deployment(path)
        assert dep.method == "maven"
        assert dep.encoder is not None
        from mavenquad.checkpoint import load_checkpoint
        ck = load_checkpoint(path)
        restored = dep.policy.named_tensors()
        restored.update(dep.encoder.named_tensors())
        assert set(restored) == set(ck.tensors)
        for name, arr in ck.tensors.items():
            np.testing.assert_array_equal(restored[name], arr)
        # rebuilt dynamics head stays frozen
        assert all(not p.requires_grad for p in dep.encoder.f_dyn.params)

    def test_baseline_has_no_encoder(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "standard_rl"))
        assert dep.encoder is None

    def test_dimension_mismatch_refused(self, tmp_path):
        cfg = eval_cfg()
        ss = np.random.SeedSequence(0).spawn(2)
        from mavenquad.ppo import PolicyValue
        policy = PolicyValue(22, 5, 4, cfg.ppo,  # latent 5, config says 3
                             np.random.default_rng(ss[0]),
                             np.random.default_rng(ss[1]))
        path = str(tmp_path / "bad.bin")
        save_checkpoint(path, policy.named_tensors(), config_to_dict(cfg),
                        0, "standard_rl")
        with pytest.raises(CheckpointMismatch, match="shape"):
            load_deployment(path)

    def test_unknown_tensor_refused(self, tmp_path):
        cfg = eval_cfg()
        ss = np.random.SeedSequence(0).spawn(2)
        from mavenquad.ppo import PolicyValue
        policy = PolicyValue(22, 3, 4, cfg.ppo,
                             np.random.default_rng(ss[0]),
                             np.random.default_rng(ss[1]))
        tensors = policy.named_tensors()
        tensors["policy.mystery"] = np.zeros(3)
        path = str(tmp_path / "bad2.bin")
        save_checkpoint(path, tensors, config_to_dict(cfg), 0, "standard_rl")
        with pytest.raises(CheckpointMismatch, match="mystery"):
            load_deployment(path)


class TestMetaTestEpisode:
    def test_first_step_uses_the_prior(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "maven"))
        seen = []
        task = TaskSpec(0, 0.33, FaultSpec())
        track = np.array([[0.0, 0.0, 1.0], [2.0, 2.0, 1.0]])
        rng_a, rng_l = trial_rngs(0, 0, 0)
        meta_test_episode(dep.policy, dep.encoder, task, track, dep.cfg,
                          rng_a, rng_l,
                          on_step=lambda t, mu, var:
                          seen.append((t, mu.copy(), var.copy())))
        t0, mu0, var0 = seen[0]
        assert t0 == 0
        np.testing.assert_array_equal(mu0, 0.0)
        np.testing.assert_array_equal(var0, 1.0)
        # posterior tightens once transitions arrive
        assert np.all(seen[-1][2] < 1.0)

    def test_episode_terminates_and_records(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "maven"))
        task = TaskSpec(0, 0.4, FaultSpec())
        track = np.array([[0.0, 0.0, 1.0], [2.5, 2.5, 1.2]])
        rng_a, rng_l = trial_rngs(0, 0, 0)
        traj, m = meta_test_episode(dep.policy, dep.encoder, task, track,
                                    dep.cfg, rng_a, rng_l)
        assert traj.status in (1, 2, 3)
        assert len(traj.t) == traj.steps + 1
        assert np.all(traj.throttle >= 0.0) and np.all(traj.throttle <= 1.0)
        assert traj.throttle[-1] == 0.0
        np.testing.assert_array_equal(traj.rate_cmd[-1], 0.0)
        assert traj.z_mu.shape == (traj.steps + 1, 3)
        assert m["steps"] == traj.steps >= 1

    def test_deterministic_flags_reproduce_bitwise(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "maven"))
        task = TaskSpec(0, 0.33, FaultSpec())
        track = np.array([[0.0, 0.0, 1.0], [2.0, -2.0, 1.0]])
        outs = []
        for latent_seed in (0, 99):  # latent rng must be irrelevant
            rng_a, rng_l = trial_rngs(0, 0, 0)
            rng_l = np.random.default_rng(latent_seed)
            traj, _ = meta_test_episode(
                dep.policy, dep.encoder, task, track, dep.cfg, rng_a, rng_l,
                deterministic_action=True, deterministic_latent=True)
            outs.append(traj)
        np.testing.assert_array_equal(outs[0].p, outs[1].p)
        np.testing.assert_array_equal(outs[0].z_mu, outs[1].z_mu)

    def test_seeded_stochastic_episode_reproduces(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "maven"))
        task = TaskSpec(0, 0.33, FaultSpec())
        track = np.array([[0.0, 0.0, 1.0], [2.0, 2.0, 1.0]])
        ps = []
        for _ in range(2):
            rng_a, rng_l = trial_rngs(7, 0, 0)
            traj, _ = meta_test_episode(dep.policy, dep.encoder, task, track,
                                        dep.cfg, rng_a, rng_l)
            ps.append(traj.p)
        np.testing.assert_array_equal(ps[0], ps[1])

    def test_deployment_leaves_params_bit_unchanged(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "maven"))
        task = TaskSpec(0, 0.33, FaultSpec())
        track = np.array([[0.0, 0.0, 1.0], [2.0, 2.0, 1.0]])
        before = dep.checksum()
        rng_a, rng_l = trial_rngs(0, 0, 0)
        meta_test_episode(dep.policy, dep.encoder, task, track, dep.cfg,
                          rng_a, rng_l)
        assert dep.checksum() == before

    def test_baseline_episode_runs_without_encoder(self, tmp_path):
        dep = load_deployment(train_tiny(tmp_path, "standard_rl"))
        task = TaskSpec(0, 0.33, FaultSpec())
        track = np.array([[0.0, 0.0, 1.0], [1.5, 1.5, 1.0]])
        rng_a, rng_l = trial_rngs(0, 0, 0)
        traj, m = meta_test_episode(dep.policy, None, task, track, dep.cfg,
                                    rng_a, rng_l)
        assert traj.z_mu is None
        assert traj.status in (1, 2, 3)


class TestSuites:
    def test_switchback_track(self):
        cfg = eval_cfg()
        tracks = resolve_suite("switchback", cfg, 0, 1)
        assert len(tracks) == 1
        np.testing.assert_array_equal(
            tracks[0][1], [[0, 0, 1], [-3, -3, 1], [3, 3, 1]])

    def test_random_tracks_seeded(self):
        cfg = eval_cfg()
        a = resolve_suite("random_tracks", cfg, 5, 4)
        b = resolve_suite("random_tracks", cfg, 5, 4)
        c = resolve_suite("random_tracks", cfg, 6, 4)
        assert len(a) == 4
        for (na, wa), (nb, wb) in zip(a, b):
            assert na == nb
            np.testing.assert_array_equal(wa, wb)
        assert not np.array_equal(a[0][1], c[0][1])
        for _, wps in a:
            assert wps.shape == (cfg.eval.track_waypoints, 3)
            assert np.all(wps >= np.asarray(cfg.env.waypoint_low))
            assert np.all(wps <= np.asarray(cfg.env.waypoint_high))

    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError, match="unknown suite"):
            resolve_suite("figure_eight", eval_cfg(), 0, 1)

    def test_task_grids(self):
        masses = mass_eval_tasks([0.25, 0.375, 0.5])
        assert [t.mass for t in masses] == [0.25, 0.375, 0.5]
        faults = fault_eval_tasks()
        assert [round(t.fault.loss[0], 2) for t in faults] == \
            [0.0, 0.15, 0.3, 0.45, 0.6]
        assert all(t.mass == 0.33 for t in faults)


class TestRunBenchmark:
    def test_report_shape_and_determinism(self, tmp_path):
        ck_maven = train_tiny(tmp_path, "maven")
        ck_base = train_tiny(tmp_path, "standard_rl")
        tasks = mass_eval_tasks([0.3, 0.45])
        outs = []
        for tag in ("x", "y"):
            out = tmp_path / tag
            os.makedirs(out, exist_ok=True)
            rep = run_benchmark({"maven": ck_maven, "standard_rl": ck_base},
                                "random_tracks", tasks, n_tracks=3, seed=11,
                                out_dir=str(out))
            assert len(rep.rows) == 2 * 2 * 3
            outs.append((out / "report.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_benchmark({"maven": str(tmp_path / "nope.bin")},
                          "switchback", mass_eval_tasks([0.33]), 1, 0)
