"""Throughput harness tests (kept tiny; absolute rates are hardware facts)."""

from mavenquad.bench import (_shards, default_steps, measure_throughput,
                             parallel_efficiency, throughput_suite,
                             write_report)
from mavenquad.config import default_config


class TestShards:
    def test_even_split(self):
        assert _shards(8, 4) == [2, 2, 2, 2]

    def test_remainder_spread(self):
        assert _shards(10, 4) == [3, 3, 2, 2]
        assert sum(_shards(4097, 3)) == 4097

    def test_more_workers_than_envs(self):
        shards = _shards(2, 4)
        assert sum(shards) == 2 and all(s >= 0 for s in shards)


class TestEfficiency:
    def test_perfect_scaling_is_one(self):
        rs = [{"n_envs": 64, "env_steps_per_sec": 640.0},
              {"n_envs": 4096, "env_steps_per_sec": 40960.0}]
        assert parallel_efficiency(rs) == 1.0

    def test_half_rate_retained(self):
        rs = [{"n_envs": 64, "env_steps_per_sec": 640.0},
              {"n_envs": 4096, "env_steps_per_sec": 20480.0}]
        assert abs(parallel_efficiency(rs) - 0.5) < 1e-12

    def test_default_steps_floor(self):
        assert default_steps(4096, budget=400_000) == 97
        assert default_steps(1_000_000) == 20


class TestMeasure:
    def test_single_worker_inline(self):
        cfg = default_config()
        cfg.env.max_episode_steps = 50
        r = measure_throughput(8, 5, cfg=cfg, n_workers=1, warmup=1)
        assert r["n_envs"] == 8 and r["steps"] == 5 and r["n_workers"] == 1
        assert r["env_steps_per_sec"] > 0
        assert r["us_per_env_step"] > 0

    def test_two_workers_spawn(self):
        cfg = default_config()
        cfg.env.max_episode_steps = 50
        r = measure_throughput(8, 5, cfg=cfg, n_workers=2, warmup=1)
        assert r["n_workers"] == 2
        assert r["env_steps_per_sec"] > 0

    def test_suite_collects_all_sizes(self):
        cfg = default_config()
        cfg.env.max_episode_steps = 50
        rs = throughput_suite(batch_sizes=(4, 8), cfg=cfg, n_workers=1,
                              steps=4)
        assert [r["n_envs"] for r in rs] == [4, 8]

    def test_report_file(self, tmp_path):
        rs = [{"n_envs": 64, "steps": 10, "n_workers": 1, "elapsed_s": 0.1,
               "env_steps_per_sec": 6400.0, "us_per_env_step": 156.25},
              {"n_envs": 1024, "steps": 10, "n_workers": 1, "elapsed_s": 0.2,
               "env_steps_per_sec": 51200.0, "us_per_env_step": 19.5}]
        path = tmp_path / "tp.md"
        eff = write_report(rs, str(path))
        text = path.read_text()
        assert "| 64 |" in text or "| 64" in text
        assert f"{eff:.3f}" in text
        assert abs(eff - 0.5) < 1e-12
