"""Image <-> latent codecs standing in for a pretrained VAE.

Images are float arrays in ``[-1, 1]`` shaped ``(H, W, 3)`` or
``(B, H, W, 3)``. Latents are ``(H/f, W/f, C)``. Every codec carries a
``scale``: :meth:`LatentCodec.to_latent` divides by it so that diffusion sees
roughly unit-variance latents, and :meth:`LatentCodec.from_latent` undoes it.
"""
from __future__ import annotations

import math

import numpy as np

from icdt import tensor as tc
from icdt.optim import TrainState, adamw_step
from icdt.tensor import Tensor


class NotFittedError(RuntimeError):
    """A trainable codec was used before training."""


class CodecShapeError(ValueError):
    pass


def _batched(x: np.ndarray):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def space_to_depth(x: np.ndarray, f: int) -> np.ndarray:
    """``(B, H, W, K)`` -> ``(B, H/f, W/f, f·f·K)``; each block flattened as (row, col, channel)."""
    B, H, W, K = x.shape
    if H % f or W % f:
        raise CodecShapeError(f"image {H}x{W} is not divisible by factor {f}")
    y = x.reshape(B, H // f, f, W // f, f, K).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(B, H // f, W // f, f * f * K))


def depth_to_space(z: np.ndarray, f: int) -> np.ndarray:
    B, h, w, D = z.shape
    K = D // (f * f)
    y = z.reshape(B, h, w, f, f, K).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(B, h * f, w * f, K))


class LatentCodec:
    kind = "base"

    def __init__(self, factor: int, channels: int, scale: float = 1.0):
        self.factor = factor
        self.channels = channels
        self.scale = float(scale)

    def _check(self, x):
        if x.shape[-1] != 3:
            raise CodecShapeError(f"expected 3-channel images, got shape {x.shape}")
        if x.shape[-3] % self.factor or x.shape[-2] % self.factor:
            raise CodecShapeError(f"image {x.shape[-3]}x{x.shape[-2]} is not divisible by factor {self.factor}")

    def encode(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def latent_shape(self, side: int) -> tuple:
        return (side // self.factor, side // self.factor, self.channels)

    def to_latent(self, x: np.ndarray) -> np.ndarray:
        return self.encode(x) / np.asarray(self.scale, dtype=np.float32)

    def from_latent(self, z: np.ndarray) -> np.ndarray:
        return self.decode(z * np.asarray(self.scale, dtype=np.float32))

    def fit_scale(self, images: np.ndarray, limit: int = 1000) -> float:
        """Set ``scale`` to the standard deviation of (up to ``limit``) encoded images."""
        z = self.encode(np.asarray(images)[:limit])
        self.scale = float(np.std(z.astype(np.float64))) or 1.0
        return self.scale

    # header / parameter hooks for checkpoints
    def header(self) -> dict:
        return {"kind": self.kind, "factor": str(self.factor), "channels": str(self.channels), "scale": repr(self.scale)}

    def arrays(self) -> dict:
        return {}

    def load_arrays(self, arrays: dict) -> None:
        pass


class IdentityCodec(LatentCodec):
    kind = "identity"

    def __init__(self, scale: float = 1.0):
        super().__init__(1, 3, scale)

    def encode(self, x):
        self._check(np.asarray(x))
        return np.asarray(x, dtype=np.float32)

    def decode(self, z):
        return np.asarray(z, dtype=np.float32)


class SpaceToDepthCodec(LatentCodec):
    """Lossless: moves each ``f×f`` pixel block into ``3·f²`` channels."""

    kind = "space_to_depth"

    def __init__(self, factor: int, scale: float = 1.0):
        super().__init__(factor, 3 * factor * factor, scale)

    def encode(self, x):
        x, single = _batched(x)
        self._check(x)
        z = space_to_depth(np.asarray(x, dtype=np.float32), self.factor)
        return z[0] if single else z

    def decode(self, z):
        z, single = _batched(z)
        x = depth_to_space(np.asarray(z, dtype=np.float32), self.factor)
        return x[0] if single else x


class TinyAutoencoder(LatentCodec):
    """Trainable codec: a ``f×f``-kernel, stride-``f`` convolution followed by a
    pointwise layer, mirrored by the decoder.

    Non-overlapping strided convolutions are exactly space-to-depth followed
    by a per-position linear map, which is how they are computed here.
    """

    kind = "tiny_autoencoder"

    def __init__(self, factor: int = 8, channels: int = 4, hidden: int = 64, seed: int = 0, scale: float = 1.0):
        super().__init__(factor, channels, scale)
        self.hidden = hidden
        self.fitted = False
        rng = np.random.default_rng(seed)
        d_in = 3 * factor * factor

        def w(a, b):
            lim = math.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, (a, b)).astype(np.float32)

        shapes = {
            "enc1": (d_in, hidden),
            "enc2": (hidden, channels),
            "dec1": (channels, hidden),
            "dec2": (hidden, d_in),
        }
        self.params = {}
        for name, (a, b) in shapes.items():
            self.params[name + ".weight"] = Tensor(w(a, b), requires_grad=True)
            self.params[name + ".bias"] = Tensor(np.zeros(b, np.float32), requires_grad=True)

    def header(self) -> dict:
        h = super().header()
        h["hidden"] = str(self.hidden)
        h["fitted"] = str(int(self.fitted))
        return h

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.params.items():
            t.data = np.ascontiguousarray(arrays[k], dtype=np.float32)

    def _lin(self, x, name):
        return tc.linear(x, self.params[name + ".weight"], self.params[name + ".bias"])

    def _encode_graph(self, x: Tensor) -> Tensor:
        return self._lin(tc.silu(self._lin(x, "enc1")), "enc2")

    def _decode_graph(self, z: Tensor) -> Tensor:
        return self._lin(tc.silu(self._lin(z, "dec1")), "dec2")

    def _require_fit(self):
        if not self.fitted:
            raise NotFittedError("TinyAutoencoder must be trained with train_codec() before use")

    def encode(self, x):
        self._require_fit()
        x, single = _batched(x)
        self._check(x)
        with tc.no_grad():
            z = self._encode_graph(Tensor(space_to_depth(np.asarray(x, np.float32), self.factor))).data
        return z[0] if single else z

    def decode(self, z):
        self._require_fit()
        z, single = _batched(z)
        with tc.no_grad():
            x = depth_to_space(self._decode_graph(Tensor(np.asarray(z, np.float32))).data, self.factor)
        return x[0] if single else x


def identity_codec() -> IdentityCodec:
    return IdentityCodec()


def space_to_depth_codec(f: int) -> SpaceToDepthCodec:
    return SpaceToDepthCodec(f)


def tiny_autoencoder(f: int = 8, C: int = 4, hidden: int = 64, seed: int = 0) -> TinyAutoencoder:
    return TinyAutoencoder(f, C, hidden, seed)


def train_codec(
    codec: LatentCodec,
    images: np.ndarray,
    epochs: int,
    lr: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
) -> LatentCodec:
    """Fit a trainable codec by MSE reconstruction with AdamW; lossless codecs pass through.

    Works on ``f×f`` blocks: every block of every image is one training row.
    """
    if not isinstance(codec, TinyAutoencoder):
        return codec
    blocks = space_to_depth(np.asarray(images, np.float32), codec.factor)
    rows = blocks.reshape(-1, blocks.shape[-1])
    state = TrainState.create({k: t.data for k, t in codec.params.items()}, seed)
    rng = state.rng
    per_batch = max(1, batch_size * blocks.shape[1] * blocks.shape[2])
    n_batches = max(1, len(rows) // per_batch)
    for _ in range(epochs):
        order = rng.permutation(len(rows))
        for b in range(n_batches):
            x = Tensor(rows[order[b * per_batch:(b + 1) * per_batch]])
            for t in codec.params.values():
                t.grad = None
            diff = codec._decode_graph(codec._encode_graph(x)) - x
            loss = (diff * diff).mean()
            loss.backward()
            adamw_step(state, {k: t.grad for k, t in codec.params.items()}, lr=lr)
            state.step += 1
    codec.fitted = True
    return codec


def make_codec(kind: str, factor: int = 8, channels: int = 4, hidden: int = 64, seed: int = 0) -> LatentCodec:
    if kind == "identity":
        return IdentityCodec()
    if kind == "space_to_depth":
        return SpaceToDepthCodec(factor)
    if kind == "tiny_autoencoder":
        return TinyAutoencoder(factor, channels, hidden, seed)
    raise CodecShapeError(f"unknown codec {kind!r}")


def codec_from_header(h: dict) -> LatentCodec:
    kind = h["kind"]
    scale = float(h.get("scale", "1.0"))
    if kind == "identity":
        c = IdentityCodec(scale)
    elif kind == "space_to_depth":
        c = SpaceToDepthCodec(int(h["factor"]), scale)
    elif kind == "tiny_autoencoder":
        c = TinyAutoencoder(int(h["factor"]), int(h["channels"]), int(h.get("hidden", 64)), scale=scale)
        c.fitted = h.get("fitted", "0") == "1"
    else:
        raise CodecShapeError(f"unknown codec {kind!r}")
    return c
