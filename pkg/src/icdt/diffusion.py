"""Gaussian diffusion: noise schedules, forward marginal, posterior, losses, respacing.

Timesteps are 1-based throughout: ``t`` runs over ``1..T`` and every
coefficient array has length ``T + 1`` with index 0 holding the empty-product
value (``alpha_bar[0] = 1``). A timestep argument may be an int or an integer
array with one entry per batch element; coefficients broadcast over the
trailing axes of the data.

Functions accept either numpy arrays or :class:`~icdt.tensor.Tensor`; with
tensors the result stays on the autodiff graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from icdt.tensor import Tensor
from icdt import tensor as tc

LOG_2PI = math.log(2 * math.pi)


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients of a variance schedule.

    ``timesteps[s]`` maps a schedule step back to the step of the schedule it
    was respaced from (identity for a base schedule); the denoiser is always
    called with the original step.
    """

    betas: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    timesteps: np.ndarray = field(default=None)
    base_T: int | None = None
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    posterior_vars: np.ndarray = field(init=False, repr=False)
    log_posterior_vars_clipped: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        T = b.size
        betas = np.concatenate([[0.0], b])
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        post = np.zeros(T + 1)
        post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
        logpost = np.full(T + 1, np.nan)
        with np.errstate(divide="ignore"):
            logpost[1:] = np.log(post[1:])
        # t=1 has zero posterior variance; borrow t=2 (or beta_1 when T == 1)
        logpost[1] = logpost[2] if T > 1 else math.log(betas[1])
        ts = np.arange(T + 1) if self.timesteps is None else np.asarray(self.timesteps, dtype=np.int64)
        for name, val in (
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("posterior_vars", post),
            ("log_posterior_vars_clipped", logpost),
            ("timesteps", ts),
        ):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def T(self) -> int:
        return self.betas.size - 1

    def check_t(self, t):
        ta = np.asarray(t)
        if np.any(ta < 1) or np.any(ta > self.T):
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")
        return ta

    def coef(self, arr: np.ndarray, t, ndim: int, dtype=np.float64):
        """Gather ``arr[t]`` shaped to broadcast against ``ndim``-d batched data."""
        ta = self.check_t(t)
        vals = arr[ta]
        if ta.ndim == 0:
            return np.asarray(vals, dtype=dtype)
        return vals.reshape((-1,) + (1,) * (ndim - 1)).astype(dtype)

    @property
    def is_respaced(self) -> bool:
        return self.base_T is not None

    def to_block(self) -> dict:
        """Plain key/value description for checkpoint headers."""
        return {
            "T": str(self.base_T or self.T),
            "beta_start": repr(self.beta_start),
            "beta_end": repr(self.beta_end),
            "respacing": ",".join(str(int(i)) for i in self.timesteps[1:]) if self.is_respaced else "",
        }


@dataclass(frozen=True)
class PosteriorStats:
    mean: object
    variance: object
    log_variance: object


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) * ((beta_end - beta_start) / (T - 1))
    return NoiseSchedule(betas, beta_start, beta_end)


def schedule_from_block(block: dict) -> NoiseSchedule:
    base = linear_beta_schedule(int(block["T"]), float(block["beta_start"]), float(block["beta_end"]))
    idx = block.get("respacing", "")
    if not idx:
        return base
    return respace_indices(base, [int(i) for i in idx.split(",")])


# ----------------------------------------------------------------------
# generic helpers
# ----------------------------------------------------------------------

def _exp(x):
    return tc.exp(x) if isinstance(x, Tensor) else np.exp(x)


def _dtype(x):
    return x.dtype if isinstance(x, (Tensor, np.ndarray)) else np.float64


def _c(s: NoiseSchedule, arr, t, like):
    return s.coef(arr, t, np.ndim(like.data if isinstance(like, Tensor) else like), _dtype(like))


# ----------------------------------------------------------------------
# forward process and posterior
# ----------------------------------------------------------------------

def q_sample(x0, t, eps, s: NoiseSchedule):
    """Draw from q(x_t | x_0) given the noise: √ᾱ_t·x0 + √(1−ᾱ_t)·eps."""
    if np.shape(x0) != np.shape(eps):
        raise tc.DimensionError(f"x0 {np.shape(x0)} and eps {np.shape(eps)} differ")
    ab = _c(s, s.alpha_bars, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev, t, noise, s: NoiseSchedule):
    """One forward kernel q(x_t | x_{t-1})."""
    b = _c(s, s.betas, t, x_prev)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def posterior_mean_variance(x0, xt, t, s: NoiseSchedule) -> PosteriorStats:
    """Mean, variance and clipped log-variance of q(x_{t-1} | x_t, x_0)."""
    s.check_t(t)
    ta = np.asarray(t)
    ab = s.alpha_bars
    c0 = np.sqrt(ab[ta - 1]) * s.betas[ta] / (1.0 - ab[ta])
    ct = np.sqrt(s.alphas[ta]) * (1.0 - ab[ta - 1]) / (1.0 - ab[ta])
    nd = np.ndim(x0.data if isinstance(x0, Tensor) else x0)
    shape = () if ta.ndim == 0 else (-1,) + (1,) * (nd - 1)
    dt = _dtype(x0)
    mean = np.asarray(c0, dtype=dt).reshape(shape) * x0 + np.asarray(ct, dtype=dt).reshape(shape) * xt
    var = _c(s, s.posterior_vars, t, x0)
    logvar = _c(s, s.log_posterior_vars_clipped, t, x0)
    return PosteriorStats(mean, var, logvar)


def predict_x0_from_eps(xt, t, eps, s: NoiseSchedule):
    ab = _c(s, s.alpha_bars, t, xt)
    return (xt - np.sqrt(1.0 - ab) * eps) * (1.0 / np.sqrt(ab))


def mu_from_eps(xt, t, eps_pred, s: NoiseSchedule):
    """Reverse-process mean from a noise prediction."""
    a = _c(s, s.alphas, t, xt)
    b = _c(s, s.betas, t, xt)
    ab = _c(s, s.alpha_bars, t, xt)
    return (xt - (b / np.sqrt(1.0 - ab)) * eps_pred) * (1.0 / np.sqrt(a))


def sigma_from_v(v, t, s: NoiseSchedule):
    """Log-variance interpolated between log β_t (v=1) and clipped log β̃_t (v=0)."""
    lb = _c(s, np.log(np.maximum(s.betas, 1e-300)), t, v)
    lp = _c(s, s.log_posterior_vars_clipped, t, v)
    return v * (lb - lp) + lp


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def gaussian_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    diff = mean1 - mean2
    return 0.5 * (-1.0 + logvar2 - logvar1 + _exp(logvar1 - logvar2) + diff * diff * _exp(-1.0 * logvar2))


def gaussian_nll(x, mean, logvar):
    """Elementwise negative log-density of a continuous Gaussian."""
    diff = x - mean
    return 0.5 * (LOG_2PI + logvar + diff * diff * _exp(-1.0 * logvar))


def _detach(x):
    return x.detach() if isinstance(x, Tensor) else x


def _per_element(x, t):
    """Mean over non-batch axes; for a scalar t, over everything."""
    if np.ndim(t) == 0:
        return x.mean() if isinstance(x, Tensor) else np.mean(x)
    axes = tuple(range(1, x.ndim))
    return x.mean(axis=axes) if isinstance(x, Tensor) else np.mean(x, axis=axes)


def vlb_term(model_out, x0, xt, t, s: NoiseSchedule):
    """One uniformly-sampled VLB term, averaged over elements (nats).

    ``L_{t-1} = KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))`` for t > 1 and the
    reconstruction NLL of ``x0`` at t = 1. The model mean is detached so only
    the variance head receives gradient from this term. With a batched ``t``
    the result has one entry per batch element.
    """
    eps_pred, v = model_out
    mean_pred = mu_from_eps(xt, t, _detach(eps_pred), s)
    logvar_pred = sigma_from_v(v, t, s)
    true = posterior_mean_variance(x0, xt, t, s)
    kl = gaussian_kl(true.mean, true.log_variance, mean_pred, logvar_pred)
    nll = gaussian_nll(x0, mean_pred, logvar_pred)
    ta = np.asarray(t)
    if ta.ndim == 0:
        return _per_element(nll if ta == 1 else kl, t)
    nd = np.ndim(x0.data if isinstance(x0, Tensor) else x0)
    first = (ta == 1).astype(_dtype(x0)).reshape((-1,) + (1,) * (nd - 1))
    mixed = nll * first + kl * (1.0 - first)
    return _per_element(mixed, t)


def l_simple(eps_true, eps_pred):
    d = eps_true - eps_pred
    return (d * d).mean() if isinstance(d, Tensor) else float(np.mean(d * d))


def hybrid_loss(eps_true, model_out, x0, xt, t, s: NoiseSchedule, lam: float = 0.001):
    """l_simple + lam·mean(vlb). Returns ``(total, l_simple, l_vlb)``."""
    simple = l_simple(eps_true, model_out[0])
    vlb = vlb_term(model_out, x0, xt, t, s)
    if np.ndim(t) != 0:
        vlb = vlb.mean() if isinstance(vlb, Tensor) else float(np.mean(vlb))
    return simple + lam * vlb, simple, vlb


# ----------------------------------------------------------------------
# respacing
# ----------------------------------------------------------------------

def respace_indices(s: NoiseSchedule, indices) -> NoiseSchedule:
    """Schedule over an increasing subset of ``1..T`` preserving ᾱ at each kept step."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0 or np.any(np.diff(idx) <= 0) or idx[0] < 1 or idx[-1] > s.T:
        raise ScheduleError(f"respacing indices must be strictly increasing within 1..{s.T}")
    ab = s.alpha_bars[idx]
    prev = np.concatenate([[1.0], ab[:-1]])
    new_betas = 1.0 - ab / prev
    orig = s.timesteps[idx]
    return NoiseSchedule(
        new_betas, s.beta_start, s.beta_end, timesteps=np.concatenate([[0], orig]), base_T=s.base_T or s.T
    )


def respace(s: NoiseSchedule, k: int) -> NoiseSchedule:
    """Keep ``k`` uniformly spaced steps of ``1..T`` (always including T)."""
    T = s.T
    if not 1 <= k <= T:
        raise ScheduleError(f"respacing count must be in 1..{T}, got {k}")
    if k == 1:
        idx = [T]
    else:
        idx = sorted({int(round(1 + i * (T - 1) / (k - 1))) for i in range(k)})
    return respace_indices(s, idx)
