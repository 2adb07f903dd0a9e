"""Training loop and conditional ancestral sampler."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from icdt import checkpoint as ckpt
from icdt import diffusion as D
from icdt.codec import LatentCodec, codec_from_header
from icdt.model import ConfigError, IcdtModel, ModelConfig, estimate_flops, training_compute
from icdt.optim import TrainState, adamw_step, ema_update

LOSS_CSV_HEADER = ["step", "l_simple", "l_vlb", "total", "wall_ms"]


@dataclass(frozen=True)
class LatentPair:
    z0: np.ndarray
    zcond: np.ndarray
    t: np.ndarray
    eps: np.ndarray


@dataclass(frozen=True)
class LossReport:
    step: int
    l_simple: float
    l_vlb: float
    total: float
    wall_ms: float

    def row(self) -> list:
        return [self.step, repr(self.l_simple), repr(self.l_vlb), repr(self.total), f"{self.wall_ms:.3f}"]


def to_uint8(x: np.ndarray) -> np.ndarray:
    """``[-1, 1]`` floats -> 8-bit, clamping out-of-range values."""
    return np.round((np.clip(x, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def paired_flip(degraded: np.ndarray, reference: np.ndarray, rng: np.random.Generator, p: float = 0.5):
    """Mirror whole pairs left-right; the same decision applies to both images of a pair."""
    flip = rng.random(degraded.shape[0]) < p
    deg, ref = degraded.copy(), reference.copy()
    deg[flip] = deg[flip][:, :, ::-1]
    ref[flip] = ref[flip][:, :, ::-1]
    return deg, ref


def make_latent_pair(degraded, reference, codec: LatentCodec, schedule: D.NoiseSchedule, rng) -> LatentPair:
    deg, ref = paired_flip(degraded, reference, rng)
    zcond = codec.to_latent(deg)
    z0 = codec.to_latent(ref)
    t = rng.integers(1, schedule.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape, dtype=np.float32)
    return LatentPair(z0, zcond, t, eps)


def training_step(
    state: TrainState,
    batch: tuple,
    codec: LatentCodec,
    schedule: D.NoiseSchedule,
    model: IcdtModel,
    lam: float = 0.001,
    lr: float = 1e-4,
    ema_decay: float = 0.9999,
) -> tuple:
    """Hybrid-loss update on one batch of ``(degraded, reference)`` images in ``[-1, 1]``."""
    start = time.perf_counter()
    degraded, reference = batch
    if degraded.shape != reference.shape:
        raise ConfigError(f"degraded {degraded.shape} and reference {reference.shape} batches differ")
    pair = make_latent_pair(degraded, reference, codec, schedule, state.rng)
    expect = (model.cfg.latent_side, model.cfg.latent_side, model.cfg.latent_channels)
    if pair.z0.shape[1:] != expect:
        raise ConfigError(f"codec produces latents {pair.z0.shape[1:]}, model expects {expect}")
    zt = D.q_sample(pair.z0, pair.t, pair.eps, schedule).astype(model.dtype)
    model.zero_grad()
    out = model(zt, pair.zcond, pair.t)
    total, simple, vlb = D.hybrid_loss(pair.eps, out, pair.z0, zt, pair.t, schedule, lam)
    total.backward()
    adamw_step(state, model.grads(), lr=lr)
    ema_update(state, ema_decay)
    state.step += 1
    report = LossReport(state.step, simple.item(), vlb.item(), total.item(), 1e3 * (time.perf_counter() - start))
    return state, report


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless index batches: a fresh shuffle per epoch, trailing partial batch dropped."""
    if n < batch_size:
        raise ConfigError(f"dataset of {n} pairs is smaller than batch size {batch_size}")
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


# ----------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------

def p_sample(model: IcdtModel, xt, zcond, s: int, schedule: D.NoiseSchedule, rng: np.random.Generator, clamp=None):
    """One reverse step from schedule step ``s`` to ``s - 1``; noiseless at ``s == 1``.

    ``schedule`` may be respaced; the model is fed the original timestep.
    ``clamp`` optionally bounds the implied x0 prediction (off by default).
    """
    from icdt.tensor import no_grad

    with no_grad():
        eps, v = model(xt, zcond, int(schedule.timesteps[s]))
    eps, v = eps.data, v.data
    if clamp is not None:
        x0 = np.clip(D.predict_x0_from_eps(xt, s, eps, schedule), -clamp, clamp)
        mean = D.posterior_mean_variance(x0, xt, s, schedule).mean
    else:
        mean = D.mu_from_eps(xt, s, eps, schedule)
    if s == 1:
        return mean.astype(xt.dtype)
    logvar = D.sigma_from_v(v, s, schedule)
    noise = rng.standard_normal(xt.shape, dtype=np.float32).astype(xt.dtype)
    return (mean + np.exp(0.5 * logvar) * noise).astype(xt.dtype)


def sample_latents(model: IcdtModel, zcond, schedule: D.NoiseSchedule, rng, x_T=None) -> np.ndarray:
    x = rng.standard_normal(zcond.shape, dtype=np.float32) if x_T is None else np.array(x_T, dtype=np.float32)
    x = x.astype(model.dtype)
    zcond = np.asarray(zcond, dtype=model.dtype)
    for s in range(schedule.T, 0, -1):
        x = p_sample(model, x, zcond, s, schedule, rng)
    return x


def sample_loop(
    model: IcdtModel,
    degraded: np.ndarray,
    codec: LatentCodec,
    schedule: D.NoiseSchedule,
    steps: int = 250,
    seed: int = 0,
    x_T=None,
) -> np.ndarray:
    """Enhance ``[-1, 1]`` degraded image(s); returns 8-bit image(s) of the same shape."""
    single = degraded.ndim == 3
    deg = degraded[None] if single else degraded
    zcond = codec.to_latent(deg)
    sub = D.respace(schedule, min(steps, schedule.T))
    z0 = sample_latents(model, zcond, sub, np.random.default_rng(seed), x_T)
    out = to_uint8(codec.from_latent(z0))
    return out[0] if single else out


# ----------------------------------------------------------------------
# trainer
# ----------------------------------------------------------------------

class Trainer:
    """Bundles model, codec, schedule and optimizer state with the run hyperparameters."""

    def __init__(
        self,
        model: IcdtModel,
        codec: LatentCodec,
        schedule: D.NoiseSchedule,
        lr: float = 1e-4,
        ema_decay: float = 0.9999,
        lam: float = 0.001,
        batch_size: int = 32,
        seed: int = 0,
        state: TrainState | None = None,
    ):
        self.model = model
        self.codec = codec
        self.schedule = schedule
        self.lr = lr
        self.ema_decay = ema_decay
        self.lam = lam
        self.batch_size = batch_size
        self.seed = seed
        self.state = state or TrainState.create(model.state_arrays(), seed)

    @property
    def compute(self) -> float:
        """Cumulative training FLOPs so far."""
        return training_compute(estimate_flops(self.model.cfg), self.batch_size, self.state.step)

    def step(self, degraded: np.ndarray, reference: np.ndarray) -> LossReport:
        _, report = training_step(
            self.state, (degraded, reference), self.codec, self.schedule, self.model, self.lam, self.lr, self.ema_decay
        )
        return report

    def fit(self, degraded: np.ndarray, reference: np.ndarray, iterations: int, callback=None) -> list:
        """Run ``iterations`` steps over the paired arrays; returns every loss report."""
        reports = []
        batches = iterate_batches(len(degraded), self.batch_size, self.state.rng)
        for _ in range(iterations):
            idx = next(batches)
            r = self.step(degraded[idx], reference[idx])
            reports.append(r)
            if callback is not None:
                callback(self, r)
        return reports

    def ema_model(self) -> IcdtModel:
        m = IcdtModel(self.model.cfg, dtype=self.model.dtype)
        m.load_arrays(self.state.ema_params)
        return m

    def enhance(self, degraded: np.ndarray, steps: int = 250, seed: int = 0, use_ema: bool = True, x_T=None):
        model = self.ema_model() if use_ema else self.model
        return sample_loop(model, degraded, self.codec, self.schedule, steps, seed, x_T)

    # -- persistence ------------------------------------------------------
    def save(self, path: str, extra: dict | None = None) -> None:
        sections = {
            "model": self.model.cfg.to_block(),
            "schedule": self.schedule.to_block(),
            "codec": self.codec.header(),
            "state": {
                "step": str(self.state.step),
                "rng": ckpt.rng_to_text(self.state.rng),
                "lr": repr(self.lr),
                "ema_decay": repr(self.ema_decay),
                "lambda": repr(self.lam),
                "batch_size": str(self.batch_size),
                "seed": str(self.seed),
            },
        }
        if extra:
            sections["run"] = {k: str(v) for k, v in extra.items()}
        tensors = {}
        for ns, arrays in (
            ("params", self.state.params),
            ("ema", self.state.ema_params),
            ("adam_m", self.state.adam_m),
            ("adam_v", self.state.adam_v),
            ("codec", self.codec.arrays()),
        ):
            for k, v in arrays.items():
                tensors[f"{ns}.{k}"] = v
        ckpt.write(path, sections, tensors)

    @classmethod
    def load(cls, path: str) -> "Trainer":
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        data = ckpt.read(path)
        sec = data.sections
        cfg = ModelConfig.from_block(sec["model"])
        model = IcdtModel(cfg)

        def ns(prefix):
            return {k[len(prefix) + 1:]: v.copy() for k, v in data.tensors.items() if k.startswith(prefix + ".")}

        model.load_arrays(ns("params"))
        codec = codec_from_header(sec["codec"])
        codec.load_arrays(ns("codec"))
        st = sec["state"]
        state = TrainState(
            params=model.state_arrays(),
            adam_m=ns("adam_m"),
            adam_v=ns("adam_v"),
            ema_params=ns("ema"),
            step=int(st["step"]),
            rng=ckpt.rng_from_text(st["rng"]),
        )
        schedule = D.schedule_from_block(sec["schedule"])
        trainer = cls(
            model,
            codec,
            schedule,
            lr=float(st["lr"]),
            ema_decay=float(st["ema_decay"]),
            lam=float(st["lambda"]),
            batch_size=int(st["batch_size"]),
            seed=int(st["seed"]),
            state=state,
        )
        trainer.run_info = sec.get("run", {})
        return trainer


def save_checkpoint(trainer: Trainer, path: str) -> None:
    trainer.save(path)


def load_checkpoint(path: str) -> Trainer:
    return Trainer.load(path)


class LossLog:
    """Appends loss reports to a CSV with header ``step,l_simple,l_vlb,total,wall_ms``."""

    def __init__(self, path: str, append: bool = False):
        self.path = path
        new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
        self._f = open(path, "a" if append else "w", newline="")
        self._w = csv.writer(self._f)
        if new:
            self._w.writerow(LOSS_CSV_HEADER)

    def write(self, report: LossReport) -> None:
        self._w.writerow(report.row())
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
