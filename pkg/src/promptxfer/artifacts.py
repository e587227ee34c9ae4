"""Binary artifact formats: model checkpoints (PSTL) and prompt files (PSPA).

Layout (little-endian): magic(4) | version u16 | meta_len u32 | meta JSON
(canonical: sorted keys, compact separators) | payload.  Model payload is a
tensor table: count u32, then per entry name_len u16, name, dtype tag u8
(0 = f32), ndim u8, dims u32..., raw '<f4' values.  Prompt payload is the
l x d matrix as raw '<f4'.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from . import autograd as ag
from .model import DpMeta, ModelConfig, SoftPrompt, TransformerLM, param_names

MODEL_MAGIC = b"PSTL"
PROMPT_MAGIC = b"PSPA"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class ArtifactError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_header(fh: BinaryIO, magic: bytes, meta: dict) -> None:
    blob = _canonical_json(meta)
    fh.write(magic)
    fh.write(struct.pack("<H", FORMAT_VERSION))
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_header(fh: BinaryIO, magic: bytes) -> dict:
    got = fh.read(4)
    if got != magic:
        raise ArtifactError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(meta_len).decode("utf-8"))


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", _DTYPE_F32, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    dtype_tag, ndim = struct.unpack("<BB", fh.read(2))
    if dtype_tag != _DTYPE_F32:
        raise ArtifactError(f"unknown dtype tag {dtype_tag}")
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).copy()
    return name, arr


def save_model(path, model: TransformerLM, provenance: dict | None = None) -> None:
    if provenance is None:
        provenance = getattr(model, "provenance", {})
    meta = {
        "config": model.config.to_dict(),
        "fingerprint": model.fingerprint(),
        "provenance": provenance,
    }
    with open(path, "wb") as fh:
        _write_header(fh, MODEL_MAGIC, meta)
        names = param_names(model.config)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_tensor(fh, name, model.params[name].data)


def load_model(path) -> TransformerLM:
    with open(path, "rb") as fh:
        meta = _read_header(fh, MODEL_MAGIC)
        config = ModelConfig.from_dict(meta["config"])
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, ag.Tensor] = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            params[name] = ag._new(arr)
    model = TransformerLM(config, params)
    if model.fingerprint() != meta["fingerprint"]:
        raise ArtifactError(f"checkpoint fingerprint mismatch in {path}")
    model.provenance = meta.get("provenance", {})
    return model


def save_prompt(path, prompt: SoftPrompt, tuning_config_digest: str = "") -> None:
    meta = {
        "l": prompt.length,
        "d": prompt.width,
        "init_seed": prompt.init_seed,
        "init_scheme": prompt.init_scheme,
        "source_fingerprint": prompt.source_fingerprint,
        "dp_meta": prompt.dp_meta.to_dict() if prompt.dp_meta else None,
        "tuning_config_digest": tuning_config_digest,
    }
    with open(path, "wb") as fh:
        _write_header(fh, PROMPT_MAGIC, meta)
        fh.write(np.ascontiguousarray(prompt.matrix, dtype="<f4").tobytes())


def load_prompt(path) -> SoftPrompt:
    with open(path, "rb") as fh:
        meta = _read_header(fh, PROMPT_MAGIC)
        l, d = int(meta["l"]), int(meta["d"])
        mat = np.frombuffer(fh.read(4 * l * d), dtype="<f4").reshape(l, d).copy()
    dp = DpMeta.from_dict(meta["dp_meta"]) if meta.get("dp_meta") else None
    return SoftPrompt(
        matrix=mat,
        init_seed=int(meta["init_seed"]),
        init_scheme=meta["init_scheme"],
        source_fingerprint=meta["source_fingerprint"],
        dp_meta=dp,
    )
