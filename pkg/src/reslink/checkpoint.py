"""Binary model checkpoints (.rslk).

Layout (all integers little-endian):

    magic            4 bytes  b"RSLK"
    version          u32
    config length    u32
    config           UTF-8 YAML: model config dict + class names
    entry count      u32
    per entry:
        name length  u32
        name         UTF-8
        dtype tag    u8   (0 = float32, 1 = float64)
        rank         u8
        extents      u32 * rank
        values       raw little-endian, C order

Entries cover every trainable parameter plus batchnorm running statistics,
in registry order, so a load reproduces inference behaviour exactly.
"""

from __future__ import annotations

import struct

import numpy as np
import yaml

from .errors import CheckpointError
from .model import ModelConfig, ResLinkModel, build_model

MAGIC = b"RSLK"
FORMAT_VERSION = 1

_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_FOR = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, model: ResLinkModel, class_names: list) -> None:
    config_text = yaml.safe_dump(
        {"model": model.config.to_dict(), "class_names": list(class_names)},
        sort_keys=True,
    )
    entries = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        blob = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            tag = _TAG_FOR[arr.dtype]
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_FOR[tag]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> tuple[ResLinkModel, list]:
    """Rebuild a model from a checkpoint; returns (model, class_names)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} "
                f"(this build reads version {FORMAT_VERSION})"
            )
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            meta = yaml.safe_load(_read_exact(fh, clen, "config").decode("utf-8"))
            config = ModelConfig.from_dict(meta["model"])
            class_names = list(meta["class_names"])
        except CheckpointError:
            raise
        except Exception as exc:
            raise CheckpointError(f"malformed checkpoint config block: {exc}") from exc

        model = build_model(config, seed=0)
        expected = model.state_arrays()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        if count != len(expected):
            raise CheckpointError(
                f"checkpoint holds {count} arrays but the configured model "
                f"has {len(expected)}"
            )
        for name, arr in expected:
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            fname = _read_exact(fh, nlen, "name").decode("utf-8")
            if fname != name:
                raise CheckpointError(
                    f"checkpoint entry {fname!r} does not match expected {name!r}"
                )
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank"))
            if tag not in _DTYPE_FOR:
                raise CheckpointError(f"unknown dtype tag {tag} for entry {name!r}")
            shape = struct.unpack(f"<{rank}I",
                                  _read_exact(fh, 4 * rank, "extents"))
            if shape != arr.shape:
                raise CheckpointError(
                    f"checkpoint entry {name!r} has shape {shape}, expected "
                    f"{arr.shape}"
                )
            dt = _DTYPE_FOR[tag]
            raw = _read_exact(fh, int(np.prod(shape, dtype=np.int64)) * dt.itemsize,
                              f"values of {name!r}")
            values = np.frombuffer(raw, dtype=dt).reshape(shape)
            arr[...] = values.astype(arr.dtype, copy=False)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final checkpoint entry")
    return model, class_names
