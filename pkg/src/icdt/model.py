"""Image-conditional diffusion transformer.

The noised latent and the conditional latent are concatenated on the channel
axis, cut into ``p×p`` patches, linearly embedded and run through ``N``
adaLN blocks conditioned on the timestep embedding. A final adaptive norm and
linear decoder map every token back to a ``p×p×2C`` patch; after
unpatchifying, the first ``C`` channels are the noise prediction and the last
``C`` the variance interpolant ``v``.

All arrays are channels-last: latents are ``(B, I, I, C)`` and token
sequences ``(B, S, d)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from icdt import tensor as tc
from icdt.tensor import Tensor

FREQ_DIM = 256
MAX_PERIOD = 10000.0


class ConfigError(ValueError):
    """Inconsistent architecture or input geometry."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 12
    hidden: int = 384
    heads: int = 6
    patch: int = 4
    latent_side: int = 32
    latent_channels: int = 4
    mlp_ratio: int = 4
    freq_dim: int = FREQ_DIM

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"need at least one layer, got {self.layers}")
        if self.patch < 1 or self.latent_side % self.patch:
            raise ConfigError(f"latent side {self.latent_side} is not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.hidden % 4:
            raise ConfigError(f"hidden {self.hidden} must be divisible by 4 for 2-D sin-cos positions")
        if self.freq_dim % 2:
            raise ConfigError("frequency embedding size must be even")

    @property
    def tokens(self) -> int:
        return (self.latent_side // self.patch) ** 2

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 2 * self.latent_channels

    def to_block(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_block(cls, block: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in block.items() if k in names})


PRESETS = {
    "S": dict(layers=12, hidden=384, heads=6),
    "B": dict(layers=12, hidden=768, heads=12),
    "L": dict(layers=24, hidden=1024, heads=16),
    "XL": dict(layers=28, hidden=1152, heads=16),
    "tiny": dict(layers=2, hidden=64, heads=2),
}


def preset(name: str, patch: int = 4, latent_side: int = 32, latent_channels: int = 4, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(
        patch=patch, latent_side=latent_side, latent_channels=latent_channels, **{**base, **overrides}
    )


# ----------------------------------------------------------------------
# fixed embeddings
# ----------------------------------------------------------------------

def timestep_frequencies(dim: int = FREQ_DIM) -> np.ndarray:
    half = dim // 2
    return np.exp(-math.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)


def timestep_embedding(t, dim: int = FREQ_DIM) -> np.ndarray:
    """Sinusoidal code of ``t``: ``[sin(t·ω), cos(t·ω)]``; shape ``(dim,)`` or ``(B, dim)``."""
    ta = np.asarray(t, dtype=np.float64)
    args = ta[..., None] * timestep_frequencies(dim)
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / MAX_PERIOD ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed ``(grid², dim)`` table; half the width codes the row, half the column."""
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)


# ----------------------------------------------------------------------
# patch geometry
# ----------------------------------------------------------------------

def patchify(x: Tensor, p: int) -> Tensor:
    """``(B, I, I, K)`` -> ``(B, S, p·p·K)`` with row-major patch order."""
    B, H, W, K = x.shape
    if H % p or W % p:
        raise ConfigError(f"spatial size {H}x{W} is not divisible by patch {p}")
    h, w = H // p, W // p
    x = x.reshape(B, h, p, w, p, K).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * w, p * p * K)


def unpatchify(tokens: Tensor, p: int, channels: int) -> Tensor:
    """Inverse of :func:`patchify` for a square grid."""
    B, S, _ = tokens.shape
    g = int(round(math.sqrt(S)))
    if g * g != S:
        raise ConfigError(f"token count {S} is not a square")
    x = tokens.reshape(B, g, g, p, p, channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * p, g * p, channels)


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


class IcdtModel:
    """Parameter container plus the functional forward pass.

    ``params`` is an ordered ``name -> Tensor`` mapping; the order is the
    checkpoint order.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d, C = cfg.hidden, cfg.latent_channels
        p: dict[str, np.ndarray] = {}

        def lin(name, fan_in, fan_out, init="xavier"):
            if init == "xavier":
                w = _xavier(rng, fan_in, fan_out, self.dtype)
            elif init == "normal":
                w = (rng.standard_normal((fan_in, fan_out)) * 0.02).astype(self.dtype)
            else:
                w = np.zeros((fan_in, fan_out), dtype=self.dtype)
            p[name + ".weight"] = w
            p[name + ".bias"] = np.zeros(fan_out, dtype=self.dtype)

        lin("x_embed", cfg.patch_dim, d)
        lin("t_embed.fc1", cfg.freq_dim, d, "normal")
        lin("t_embed.fc2", d, d, "normal")
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            lin(pre + "attn.qkv", d, 3 * d)
            lin(pre + "attn.proj", d, d)
            lin(pre + "mlp.fc1", d, cfg.mlp_ratio * d)
            lin(pre + "mlp.fc2", cfg.mlp_ratio * d, d)
            lin(pre + "adaLN", d, 6 * d)
            # (scale1, shift1, gate1, scale2, shift2, gate2): gates start closed
            for g in (2, 5):
                p[pre + "adaLN.weight"][:, g * d:(g + 1) * d] = 0
        lin("final.adaLN", d, 2 * d)
        lin("final.linear", d, cfg.patch_dim, "zeros")

        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        grid = cfg.latent_side // cfg.patch
        self.pos_embed = sincos_pos_embed_2d(d, grid).astype(self.dtype)

    # -- bookkeeping ------------------------------------------------------
    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def state_arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ConfigError(f"parameter {k}: expected {t.shape}, got {arrays[k].shape}")
            t.data = np.ascontiguousarray(arrays[k], dtype=self.dtype)

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return tc.linear(x, self.params[name + ".weight"], self.params[name + ".bias"])

    # -- pieces ---------------------------------------------------------
    def patchify_embed(self, latent: Tensor) -> Tensor:
        tokens = self._lin(patchify(latent, self.cfg.patch), "x_embed")
        return tokens + self.pos_embed

    def embed_timestep(self, t) -> Tensor:
        freq = Tensor(timestep_embedding(t, self.cfg.freq_dim).astype(self.dtype))
        if freq.ndim == 1:
            freq = freq.reshape(1, -1)
        return self._lin(tc.silu(self._lin(freq, "t_embed.fc1")), "t_embed.fc2")

    def _modulation(self, cond: Tensor, name: str, count: int) -> list:
        d = self.cfg.hidden
        mod = self._lin(tc.silu(cond), name)
        mod = mod.reshape(cond.shape[0], 1, count * d)
        return [tc.slice_last(mod, i * d, (i + 1) * d) for i in range(count)]

    def attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.cfg
        B, S, d = x.shape
        qkv = self._lin(x, f"blocks.{i}.attn.qkv")
        qkv = qkv.reshape(B, S, 3, cfg.heads, cfg.head_dim).permute(2, 0, 3, 1, 4)
        out = tc.softmax_attention(qkv[0], qkv[1], qkv[2])
        out = out.permute(0, 2, 1, 3).reshape(B, S, d)
        return self._lin(out, f"blocks.{i}.attn.proj")

    def mlp(self, x: Tensor, i: int) -> Tensor:
        return self._lin(tc.gelu(self._lin(x, f"blocks.{i}.mlp.fc1")), f"blocks.{i}.mlp.fc2")

    def adaln_forward(self, tokens: Tensor, cond: Tensor, i: int) -> Tensor:
        """One adaLN block: two gated residual branches modulated by ``cond``."""
        scale1, shift1, gate1, scale2, shift2, gate2 = self._modulation(cond, f"blocks.{i}.adaLN", 6)
        h = tc.layernorm_no_affine(tokens) * (scale1 + 1.0) + shift1
        x = tokens + gate1 * self.attention(h, i)
        h = tc.layernorm_no_affine(x) * (scale2 + 1.0) + shift2
        return x + gate2 * self.mlp(h, i)

    def final_decode(self, tokens: Tensor, cond: Tensor) -> tuple:
        scale, shift = self._modulation(cond, "final.adaLN", 2)
        h = tc.layernorm_no_affine(tokens) * (scale + 1.0) + shift
        out = unpatchify(self._lin(h, "final.linear"), self.cfg.patch, 2 * self.cfg.latent_channels)
        C = self.cfg.latent_channels
        return tc.slice_last(out, 0, C), tc.slice_last(out, C, 2 * C)

    # -- full pass ------------------------------------------------------
    def forward(self, zt, zcond, t) -> tuple:
        """Predict ``(eps, v)`` for noised latents ``zt`` given conditional latents ``zcond``.

        Accepts ``(I, I, C)`` or batched ``(B, I, I, C)`` inputs; ``t`` is an int
        or one step per batch element.
        """
        zt, zcond = tc.as_tensor(zt, self.dtype), tc.as_tensor(zcond, self.dtype)
        if zt.shape != zcond.shape:
            raise ConfigError(f"noised latent {zt.shape} and condition {zcond.shape} differ")
        single = zt.ndim == 3
        if single:
            zt, zcond = zt.reshape((1,) + zt.shape), zcond.reshape((1,) + zcond.shape)
        cfg = self.cfg
        expect = (cfg.latent_side, cfg.latent_side, cfg.latent_channels)
        if zt.ndim != 4 or zt.shape[1:] != expect:
            raise ConfigError(f"expected latents of shape (B, {expect}), got {zt.shape}")
        B = zt.shape[0]
        ta = np.broadcast_to(np.asarray(t), (B,))
        x = self.patchify_embed(tc.concat_channels(zt, zcond))
        c = self.embed_timestep(ta)
        for i in range(cfg.layers):
            x = self.adaln_forward(x, c, i)
        eps, v = self.final_decode(x, c)
        if single:
            eps, v = eps.reshape(expect), v.reshape(expect)
        return eps, v

    __call__ = forward


# ----------------------------------------------------------------------
# analytic accounting
# ----------------------------------------------------------------------

def count_params(cfg: ModelConfig) -> int:
    """Trainable parameter count (the fixed positional table is excluded)."""
    d, f = cfg.hidden, cfg.freq_dim
    h = cfg.mlp_ratio * d
    block = (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + (d * 6 * d + 6 * d)
    embed = cfg.patch_dim * d + d
    temb = f * d + d + d * d + d
    final = d * 2 * d + 2 * d + d * cfg.patch_dim + cfg.patch_dim
    return cfg.layers * block + embed + temb + final


def estimate_flops(cfg: ModelConfig) -> int:
    """Forward-pass multiply-accumulate count for one sample.

    One multiply-add counts as one operation, the convention under which the
    published ICDT/DiT figures are stated.
    """
    d, S, f = cfg.hidden, cfg.tokens, cfg.freq_dim
    h = cfg.mlp_ratio * d
    per_block = 4 * S * d * d + 2 * S * S * d + 2 * S * d * h + 6 * d * d
    embed = S * cfg.patch_dim * d
    temb = f * d + d * d
    final = 2 * d * d + S * d * cfg.patch_dim
    return cfg.layers * per_block + embed + temb + final


def training_compute(flops: float, batch_size: int, iterations: int) -> float:
    """Training cost as forward FLOPs x batch x iterations x 3 (backward ~ 2x forward)."""
    return float(flops) * batch_size * iterations * 3
