"""Environment throughput benchmark over persistent worker processes.

A batch of environments is sharded across workers; each worker steps its
shard with random actions. Timing covers only the stepping loop (workers
are started and warmed up beforehand), so the reported rate is the
sustained simulation throughput.
"""

import multiprocessing as mp
import os
import time

import numpy as np

from .config import SeedTree, config_from_dict, config_to_dict, \
    default_config
from .dynamics import FaultSpec
from .envs import BatchEnv, TaskSpec


def _random_actions(rng, n):
    a = np.empty((n, 4))
    a[:, 0] = rng.random(n)
    a[:, 1:] = rng.uniform(-1.0, 1.0, size=(n, 3))
    return a


def _step_loop(env, rng, steps):
    for _ in range(steps):
        env.step(_random_actions(rng, env.n))


def _make_env(cfg, shard, worker_idx, seed):
    tree = SeedTree(seed)
    task = TaskSpec(0, cfg.tasks.nominal_mass, FaultSpec())
    rngs = [tree.rng("env", worker_idx, j) for j in range(shard)]
    return BatchEnv(shard, cfg, task=task, mode="train", rngs=rngs)


def _worker_main(conn, cfg_dict, shard, worker_idx, seed):
    cfg = config_from_dict(cfg_dict)
    env = _make_env(cfg, shard, worker_idx, seed)
    rng = SeedTree(seed).rng("action", worker_idx)
    while True:
        msg = conn.recv()
        if msg[0] == "run":
            t0 = time.perf_counter()
            _step_loop(env, rng, msg[1])
            conn.send(("done", time.perf_counter() - t0))
        elif msg[0] == "quit":
            conn.close()
            return


def _shards(n_envs, n_workers):
    base, extra = divmod(n_envs, n_workers)
    return [base + (1 if i < extra else 0) for i in range(n_workers)]


def measure_throughput(n_envs, steps, cfg=None, n_workers=None, seed=0,
                       warmup=3):
    """Env steps/sec for one batch size; wall-clocked around the run."""
    if cfg is None:
        cfg = default_config()
    if n_workers is None:
        n_workers = os.cpu_count() or 1
    n_workers = max(1, min(n_workers, n_envs))
    cfg_dict = config_to_dict(cfg)

    if n_workers == 1:
        # no IPC in the single-worker case; same code path as the workers
        env = _make_env(cfg, n_envs, 0, seed)
        rng = SeedTree(seed).rng("action", 0)
        _step_loop(env, rng, warmup)
        t0 = time.perf_counter()
        _step_loop(env, rng, steps)
        elapsed = time.perf_counter() - t0
    else:
        ctx = mp.get_context("spawn")
        conns, procs = [], []
        for i, shard in enumerate(_shards(n_envs, n_workers)):
            parent, child = ctx.Pipe()
            p = ctx.Process(target=_worker_main,
                            args=(child, cfg_dict, shard, i, seed),
                            daemon=True)
            p.start()
            conns.append(parent)
            procs.append(p)
        try:
            for c in conns:
                c.send(("run", warmup))
            for c in conns:
                c.recv()
            t0 = time.perf_counter()
            for c in conns:
                c.send(("run", steps))
            for c in conns:
                c.recv()
            elapsed = time.perf_counter() - t0
        finally:
            for c in conns:
                c.send(("quit", None))
            for p in procs:
                p.join(timeout=10)

    total = n_envs * steps
    return {"n_envs": n_envs, "steps": steps, "n_workers": n_workers,
            "elapsed_s": elapsed, "env_steps_per_sec": total / elapsed,
            "us_per_env_step": 1e6 * elapsed / total}


def parallel_efficiency(results):
    """Per-env throughput retained between the smallest and largest batch."""
    lo = min(results, key=lambda r: r["n_envs"])
    hi = max(results, key=lambda r: r["n_envs"])
    rate_lo = lo["env_steps_per_sec"] / lo["n_envs"]
    rate_hi = hi["env_steps_per_sec"] / hi["n_envs"]
    return rate_hi / rate_lo


def default_steps(n_envs, budget=400_000):
    """Step count giving each batch size a comparable work budget."""
    return max(20, budget // n_envs)


def throughput_suite(batch_sizes=(64, 1024, 4096), cfg=None, n_workers=None,
                     seed=0, steps=None, budget=400_000, progress=False):
    results = []
    for n in batch_sizes:
        r = measure_throughput(n, steps or default_steps(n, budget), cfg,
                               n_workers, seed)
        if progress:
            print(f"envs {n:5d}: {r['env_steps_per_sec']:,.0f} steps/s "
                  f"({r['us_per_env_step']:.2f} us/env-step, "
                  f"{r['n_workers']} worker(s))", flush=True)
        results.append(r)
    return results


def write_report(results, path):
    eff = parallel_efficiency(results)
    lines = ["# Environment throughput", "",
             f"- host CPU count: {os.cpu_count()}",
             f"- workers used: {results[0]['n_workers']}",
             "", "| envs | steps | env steps/sec | us per env step |",
             "|-----:|------:|--------------:|----------------:|"]
    for r in results:
        lines.append(f"| {r['n_envs']} | {r['steps']} | "
                     f"{r['env_steps_per_sec']:,.0f} | "
                     f"{r['us_per_env_step']:.3f} |")
    lo = min(r["n_envs"] for r in results)
    hi = max(r["n_envs"] for r in results)
    lines += ["", f"Parallel efficiency {lo} -> {hi} envs "
              f"(per-env rate retained): {eff:.3f}", ""]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return eff
