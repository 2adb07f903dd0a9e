"""Run configuration and its plain-text file format.

A config file is flat ``key=value`` lines grouped under section headers::

    [model]
    name=tiny
    patch=2

Unknown sections or keys are errors, so a typo never silently falls back to
a default. Floats are written with ``repr`` and read back exactly.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace

from icdt import codec as C
from icdt import diffusion as D
from icdt.model import PRESETS, ConfigError, ModelConfig, preset

# field -> section it lives in, in file order
SECTIONS = {
    "model": ["name", "patch", "layers"],
    "data": ["root", "side", "train_split", "eval_split"],
    "codec": ["codec", "codec_factor", "codec_channels", "codec_hidden", "codec_epochs", "codec_lr"],
    "schedule": ["timesteps", "beta_start", "beta_end"],
    "train": ["lr", "batch_size", "iterations", "ema_decay", "lam", "seed", "checkpoint_every"],
    "sample": ["steps"],
    "paths": ["out_dir"],
}


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. Defaults are the full-scale recipe; see :func:`desk_profile`."""

    name: str = "XL"
    patch: int = 2
    layers: int = 0                   # 0 keeps the preset depth
    root: str = "data"
    side: int = 256
    train_split: str = "train"
    eval_split: str = "test"
    codec: str = "tiny_autoencoder"
    codec_factor: int = 8
    codec_channels: int = 4
    codec_hidden: int = 64
    codec_epochs: int = 20
    codec_lr: float = 1e-4
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    lr: float = 1e-4
    batch_size: int = 32
    iterations: int = 90000
    ema_decay: float = 0.9999
    lam: float = 0.001
    seed: int = 0
    checkpoint_every: int = 1000
    steps: int = 250
    out_dir: str = "run"

    def __post_init__(self):
        self.validate()

    # -- derived pieces ---------------------------------------------------
    @property
    def factor(self) -> int:
        return 1 if self.codec == "identity" else self.codec_factor

    @property
    def latent_channels(self) -> int:
        if self.codec == "identity":
            return 3
        if self.codec == "space_to_depth":
            return 3 * self.codec_factor ** 2
        return self.codec_channels

    def model_config(self) -> ModelConfig:
        extra = {"layers": self.layers} if self.layers else {}
        return preset(self.name, self.patch, self.side // self.factor, self.latent_channels, **extra)

    def schedule(self) -> D.NoiseSchedule:
        return D.linear_beta_schedule(self.timesteps, self.beta_start, self.beta_end)

    def make_codec(self) -> C.LatentCodec:
        return C.make_codec(self.codec, self.codec_factor, self.codec_channels, self.codec_hidden, self.seed)

    def validate(self) -> None:
        if self.name not in PRESETS:
            raise ConfigError(f"unknown model {self.name!r}; choose from {sorted(PRESETS)}")
        if self.codec not in ("identity", "space_to_depth", "tiny_autoencoder"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        for key in ("patch", "side", "codec_factor", "codec_channels", "codec_hidden", "timesteps",
                    "batch_size", "steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("layers", "codec_epochs", "iterations", "checkpoint_every", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if self.side % (self.factor * self.patch):
            raise ConfigError(
                f"side {self.side} is not divisible by codec factor {self.factor} x patch {self.patch}"
            )
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.steps > self.timesteps:
            raise ConfigError(f"sampling steps {self.steps} exceed T={self.timesteps}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.lr <= 0 or self.codec_lr <= 0 or self.lam < 0:
            raise ConfigError("learning rates must be positive and lam non-negative")

    # -- text format ------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for k in keys:
                v = getattr(self, k)
                lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_file(io.StringIO(text))
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse(key, raw, types[key])
        return cls(**values)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings, e.g. from repeated ``--set`` flags."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for item in pairs:
            key, sep, raw = item.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ConfigError(f"bad override {item!r}; expected key=value with a known key")
            changes[key] = _parse(key, raw.strip(), types[key])
        return replace(self, **changes)


def _parse(key: str, raw: str, typ):
    typ = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def full_profile(**changes) -> RunConfig:
    return replace(RunConfig(), **changes)


def desk_profile(**changes) -> RunConfig:
    """Minutes-on-a-laptop profile: tiny model on 16×16 images in pixel space.

    With T=200 the betas are scaled by 1000/T so the chain still ends near
    pure noise; EMA decay is shortened to match the 2k-step horizon.
    """
    base = RunConfig(
        name="tiny",
        patch=2,
        side=16,
        codec="identity",
        timesteps=200,
        beta_start=5e-4,
        beta_end=0.1,
        batch_size=8,
        iterations=2000,
        ema_decay=0.995,
        checkpoint_every=500,
        steps=200,
    )
    return replace(base, **changes)


PROFILES = {"full": full_profile, "desk": desk_profile}
