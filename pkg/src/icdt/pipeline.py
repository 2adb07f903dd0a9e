"""Glue between a :class:`RunConfig` and the engine: data loading and trainer setup."""
from __future__ import annotations

import numpy as np

from icdt import codec as C
from icdt.config import RunConfig
from icdt.data import PairedDataset
from icdt.engine import Trainer, from_uint8
from icdt.model import ConfigError, IcdtModel


def load_split(cfg: RunConfig, split: str) -> tuple:
    """uint8 ``(degraded, reference, names)`` for one split, checked against ``cfg.side``."""
    ds = PairedDataset(cfg.root, split)
    deg, ref = ds.load()
    if deg.shape[1:3] != (cfg.side, cfg.side):
        raise ConfigError(f"{ds.dir_a} holds {deg.shape[1]}x{deg.shape[2]} images, config side is {cfg.side}")
    return deg, ref, ds.names


def build_trainer(cfg: RunConfig, degraded: np.ndarray, reference: np.ndarray) -> Trainer:
    """Fit the codec (and its latent scale) on the training images, then a fresh model."""
    deg, ref = from_uint8(degraded), from_uint8(reference)
    images = np.concatenate([deg, ref])
    codec = cfg.make_codec()
    if isinstance(codec, C.TinyAutoencoder):
        C.train_codec(codec, images, cfg.codec_epochs, lr=cfg.codec_lr, batch_size=cfg.batch_size, seed=cfg.seed)
    codec.fit_scale(images)
    model = IcdtModel(cfg.model_config(), seed=cfg.seed)
    return Trainer(
        model, codec, cfg.schedule(),
        lr=cfg.lr, ema_decay=cfg.ema_decay, lam=cfg.lam, batch_size=cfg.batch_size, seed=cfg.seed,
    )
