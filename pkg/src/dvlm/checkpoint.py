"""Little-endian checkpoint container and flat ``key=value`` config files.

Layout::

    magic        8 bytes  b"DVLMCKPT"
    version      u32
    header_len   u32
    header       utf-8 ``key=value`` lines (model config plus ``vocab``)
    n_tensors    u32
    per tensor:  name_len u32, name utf-8, rank u32, dims u32*rank,
                 float32 data (C order)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .model import DiffusionVLM, ModelConfig
from .vocab import Vocab

MAGIC = b"DVLMCKPT"
VERSION = 1

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path: PathLike) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def save_checkpoint(path: PathLike, model: DiffusionVLM, vocab: Vocab) -> None:
    header = model.cfg.to_text() + f"vocab={','.join(vocab.words)}\n"
    hb = header.encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hb)))
        f.write(hb)
        state = model.state_dict()
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            nb = name.encode()
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: PathLike) -> tuple[DiffusionVLM, Vocab]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    header = parse_kv(data[off : off + hlen].decode())
    off += hlen
    vocab = Vocab(tuple(w for w in header.pop("vocab", "").split(",") if w))
    model = DiffusionVLM(ModelConfig.from_dict(header))
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nl].decode()
        off += nl
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, vocab
