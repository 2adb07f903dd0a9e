"""Checkpoint file format.

A checkpoint is a UTF-8 text header followed by raw tensor bytes::

    ICDT-CHECKPOINT 1
    [model]
    layers=2
    ...
    [schedule]
    [codec]
    [state]
    [tensors]
    params.x_embed.weight=24,64
    ema.x_embed.weight=24,64
    ...
    [end]
    <little-endian float32 data of each listed tensor, in header order>

Namespaces: ``params.``, ``ema.``, ``adam_m.``, ``adam_v.`` for the denoiser
and ``codec.`` for trainable codec weights. Header values are plain strings;
floats are written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

MAGIC = "ICDT-CHECKPOINT 1"
END = "[end]"


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    sections: dict          # section name -> {key: value}
    tensors: dict           # full name -> float32 array


def write(path: str, sections: dict, tensors: dict) -> None:
    lines = [MAGIC]
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        for k, v in kv.items():
            v = str(v)
            if "\n" in v:
                raise CheckpointError(f"header value for {name}.{k} contains a newline")
            lines.append(f"{k}={v}")
    lines.append("[tensors]")
    for name, arr in tensors.items():
        lines.append(f"{name}={','.join(str(n) for n in arr.shape)}")
    lines.append(END)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read(path: str) -> CheckpointData:
    with open(path, "rb") as f:
        blob = f.read()
    marker = ("\n" + END + "\n").encode()
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path} is not an ICDT checkpoint")
    header = blob[:cut].decode("utf-8").split("\n")[1:]
    offset = cut + len(marker)
    sections: dict = {}
    shapes: dict = {}
    current = None
    for line in header:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current != "tensors":
                sections[current] = {}
            continue
        key, _, value = line.partition("=")
        if current == "tensors":
            shapes[key] = tuple(int(n) for n in value.split(",")) if value else ()
        elif current is not None:
            sections[current][key] = value
    tensors = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after tensor data")
    return CheckpointData(sections, tensors)


def rng_to_text(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_text(text: str) -> np.random.Generator:
    state = json.loads(text)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
