"""Paired image datasets, 8-bit image I/O and the synthetic underwater generator."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_EXTS = (".png", ".ppm")

# veil colour the haze pulls toward (RGB, 0..1)
VEIL = np.array([0.10, 0.55, 0.65])


class DatasetError(ValueError):
    pass


def read_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str, img: np.ndarray) -> None:
    """Write an 8-bit RGB image; ``.ppm`` gives binary P6, anything else PNG."""
    fmt = "PPM" if path.lower().endswith(".ppm") else "PNG"
    Image.fromarray(np.asarray(img, dtype=np.uint8), "RGB").save(path, format=fmt)


def list_images(directory: str) -> list:
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))


@dataclass
class PairedDataset:
    """``root/{split}A`` holds degraded images, ``root/{split}B`` same-named references."""

    root: str
    split: str = "train"

    def __post_init__(self):
        self.dir_a = os.path.join(self.root, self.split + "A")
        self.dir_b = os.path.join(self.root, self.split + "B")
        for d in (self.dir_a, self.dir_b):
            if not os.path.isdir(d):
                raise DatasetError(f"missing directory {d}")
        names_a = list_images(self.dir_a)
        missing = [n for n in names_a if not os.path.exists(os.path.join(self.dir_b, n))]
        if missing:
            raise DatasetError(f"no reference image for {missing[:5]} in {self.dir_b}")
        if not names_a:
            raise DatasetError(f"no images in {self.dir_a}")
        self.names = names_a

    def __len__(self) -> int:
        return len(self.names)

    def load(self) -> tuple:
        """All pairs as uint8 arrays ``(N, H, W, 3)``: ``(degraded, reference)``."""
        deg, ref = [], []
        for n in self.names:
            a = read_image(os.path.join(self.dir_a, n))
            b = read_image(os.path.join(self.dir_b, n))
            if a.shape != b.shape:
                raise DatasetError(f"{n}: degraded {a.shape} vs reference {b.shape}")
            deg.append(a)
            ref.append(b)
        shapes = {a.shape for a in deg}
        if len(shapes) != 1:
            raise DatasetError(f"images have mixed sizes {sorted(shapes)}")
        return np.stack(deg), np.stack(ref)


# ----------------------------------------------------------------------
# synthetic paired data
# ----------------------------------------------------------------------

def _smooth_field(rng, side: int) -> np.ndarray:
    coarse = rng.uniform(0.2, 1.0, size=(3, 3, 3))
    img = np.asarray(Image.fromarray((coarse * 255).astype(np.uint8), "RGB").resize((side, side), Image.BILINEAR))
    return img.astype(np.float64) / 255.0


def _draw_shapes(rng, img: np.ndarray, count: int) -> np.ndarray:
    side = img.shape[0]
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    for _ in range(count):
        color = rng.uniform(0.15, 1.0, size=3)
        cy, cx = rng.uniform(0, side, size=2)
        r = rng.uniform(0.12, 0.3) * side
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.0))
        img[mask] = color
    return img


def degrade(ref: np.ndarray, params: dict, rng: np.random.Generator) -> np.ndarray:
    """Underwater-style corruption of a ``[0, 1]`` RGB image.

    Per-channel attenuation (strongest on red), haze toward a blue-green veil,
    a mild Gaussian blur and additive noise.
    """
    att = np.array([params["att_r"], params["att_g"], params["att_b"]])
    trans = params["transmission"]
    x = ref * att
    x = trans * x + (1.0 - trans) * VEIL
    x = np.stack([gaussian_filter(x[..., c], params["blur"], mode="reflect") for c in range(3)], axis=-1)
    x = x + rng.normal(0.0, params["noise"], size=x.shape)
    return np.clip(x, 0.0, 1.0)


def synthetic_pair(rng: np.random.Generator, side: int) -> tuple:
    ref = _draw_shapes(rng, _smooth_field(rng, side), int(rng.integers(1, 4)))
    params = {
        "att_r": float(rng.uniform(0.25, 0.45)),
        "att_g": float(rng.uniform(0.80, 0.95)),
        "att_b": float(rng.uniform(0.90, 1.00)),
        "transmission": float(rng.uniform(0.65, 0.85)),
        "blur": float(rng.uniform(0.4, 0.8)),
        "noise": 0.01,
    }
    deg = degrade(ref, params, rng)
    to8 = lambda a: np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)  # noqa: E731
    return to8(deg), to8(ref), params


def make_synthetic(out_dir: str, count: int, side: int, seed: int = 0, split: str = "train", ext: str = ".png") -> list:
    """Write ``count`` pairs to ``out_dir/{split}A`` and ``{split}B`` plus a parameter manifest."""
    if count < 1 or side < 1:
        raise DatasetError(f"count and side must be positive, got {count}, {side}")
    rng = np.random.default_rng(seed)
    dir_a = os.path.join(out_dir, split + "A")
    dir_b = os.path.join(out_dir, split + "B")
    os.makedirs(dir_a, exist_ok=True)
    os.makedirs(dir_b, exist_ok=True)
    lines = [f"seed={seed} count={count} side={side} veil={','.join(repr(float(v)) for v in VEIL)}"]
    names = []
    for i in range(count):
        deg, ref, params = synthetic_pair(rng, side)
        name = f"{i:05d}{ext}"
        write_image(os.path.join(dir_a, name), deg)
        write_image(os.path.join(dir_b, name), ref)
        lines.append(name + " " + " ".join(f"{k}={v!r}" for k, v in params.items()))
        names.append(name)
    with open(os.path.join(out_dir, f"{split}_manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return names


def synthetic_arrays(count: int, side: int, seed: int = 0) -> tuple:
    """In-memory version of :func:`make_synthetic`: uint8 ``(degraded, reference)`` stacks."""
    rng = np.random.default_rng(seed)
    pairs = [synthetic_pair(rng, side) for _ in range(count)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
