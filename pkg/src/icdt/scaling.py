"""Quality-versus-compute study: train several configs under one regime and tabulate PSNR."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from icdt import metrics
from icdt.config import RunConfig
from icdt.engine import from_uint8
from icdt.model import ConfigError, count_params, estimate_flops, training_compute
from icdt.pipeline import build_trainer

ITER_COLUMNS = ["model", "iteration", "psnr"]
FLOPS_COLUMNS = ["model", "params", "gflops", "final_psnr"]
COMPUTE_COLUMNS = ["model", "iteration", "train_flops", "psnr"]


def parse_configs(text: str) -> list:
    """``"tiny/2,tiny/1"`` -> ``[("tiny", 2), ("tiny", 1)]``."""
    out = []
    for token in (t.strip() for t in text.split(",")):
        if not token:
            continue
        name, sep, p = token.partition("/")
        if not sep or not p.isdigit():
            raise ConfigError(f"bad model spec {token!r}; expected NAME/PATCH such as tiny/2")
        out.append((name, int(p)))
    if not out:
        raise ConfigError("scaling report needs at least one NAME/PATCH config")
    return out


@dataclass
class ModelRun:
    label: str
    params: int
    flops: int
    batch_size: int
    points: list = field(default_factory=list)      # (iteration, psnr)

    @property
    def final_psnr(self) -> float:
        return self.points[-1][1]


def mean_psnr(trainer, degraded: np.ndarray, reference: np.ndarray, steps: int, seed: int, x_T=None) -> float:
    out = trainer.enhance(from_uint8(degraded), steps=steps, seed=seed, x_T=x_T)
    return float(np.mean([metrics.psnr(a, b) for a, b in zip(out, reference)]))


def noise_draws(shape: tuple, seed: int, draws: int) -> list:
    """``(sampler seed, x_T)`` per draw; every model in a study reuses the same list."""
    return [(seed + r, np.random.default_rng([seed, r]).standard_normal(shape, dtype=np.float32))
            for r in range(draws)]


def draw_psnr(trainer, degraded: np.ndarray, reference: np.ndarray, steps: int, draws: list) -> float:
    """Mean PSNR averaged over several sampling-noise draws."""
    return float(np.mean([mean_psnr(trainer, degraded, reference, steps, s, x) for s, x in draws]))


def run_scaling(
    base: RunConfig,
    specs: list,
    train: tuple,
    held_out: tuple,
    eval_every: int,
    eval_steps: int = 50,
    log=None,
    eval_draws: int = 1,
) -> list:
    """Train every ``(name, patch)`` from the same seed and data; evaluate EMA PSNR periodically.

    Each evaluation averages ``eval_draws`` sampling-noise draws. All models
    share the initial noise and sampler seeds when their latent shapes agree.
    """
    if eval_draws < 1:
        raise ConfigError(f"eval_draws must be positive, got {eval_draws}")
    runs = [replace(base, name=n, patch=p) for n, p in specs]   # validates every config up front
    eval_every = max(1, min(eval_every, base.iterations)) if base.iterations else 1
    checkpoints = sorted({*range(eval_every, base.iterations + 1, eval_every), base.iterations})
    shared = {}
    results = []
    for (name, p), cfg in zip(specs, runs):
        trainer = build_trainer(cfg, *train)
        mcfg = cfg.model_config()
        run = ModelRun(f"{name}/{p}", count_params(mcfg), estimate_flops(mcfg), cfg.batch_size)
        shape = (len(held_out[0]),) + trainer.codec.latent_shape(cfg.side)
        if shape not in shared:
            shared[shape] = noise_draws(shape, cfg.seed, eval_draws)
        done = 0
        for target in checkpoints:
            trainer.fit(from_uint8(train[0]), from_uint8(train[1]), target - done)
            done = target
            score = draw_psnr(trainer, held_out[0], held_out[1], min(eval_steps, cfg.timesteps), shared[shape])
            run.points.append((done, score))
            if log:
                log(f"{run.label} iter {done} psnr {score:.3f}")
        results.append(run)
    return results


def write_report(runs: list, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "iters": os.path.join(out_dir, "psnr_vs_iters.csv"),
        "flops": os.path.join(out_dir, "final_vs_flops.csv"),
        "compute": os.path.join(out_dir, "psnr_vs_compute.csv"),
    }
    with open(paths["iters"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ITER_COLUMNS)
        for r in runs:
            w.writerows([r.label, it, repr(v)] for it, v in r.points)
    with open(paths["flops"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FLOPS_COLUMNS)
        for r in runs:
            w.writerow([r.label, r.params, repr(r.flops / 1e9), repr(r.final_psnr)])
    with open(paths["compute"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COMPUTE_COLUMNS)
        for r in runs:
            w.writerows(
                [r.label, it, repr(float(training_compute(r.flops, r.batch_size, it))), repr(v)] for it, v in r.points
            )
    return paths
