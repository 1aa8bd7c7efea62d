"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DMMC" | u16 version | u32 section count
    section: u16 name length | name (utf-8) | u8 kind | payload
      kind 0 (json):  u64 length | utf-8 JSON
      kind 1 (array): u8 dtype length | dtype str | u8 ndim | u64 * ndim | u64 nbytes | raw data

Every array is stored in explicit little-endian form, so files are portable.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .codebook import Codebook
from .etf import EtfClassifier
from .ndcore import Tensor
from .networks import DmmModel
from .train import Adam, TrainConfig, TrainState

MAGIC = b"DMMC"
VERSION = 1
KIND_JSON = 0
KIND_ARRAY = 1

Section = Union[dict, np.ndarray]


class CheckpointFormatError(ValueError):
    pass


def _write_sections(f, sections: Dict[str, Section]) -> None:
    f.write(MAGIC + struct.pack("<HI", VERSION, len(sections)))
    for name, value in sections.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)) + raw)
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<"))
            dt = arr.dtype.str.encode("ascii")
            f.write(struct.pack("<BB", KIND_ARRAY, len(dt)) + dt)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            data = arr.tobytes()
            f.write(struct.pack("<Q", len(data)) + data)
        else:
            data = json.dumps(value, sort_keys=True).encode("utf-8")
            f.write(struct.pack("<BQ", KIND_JSON, len(data)) + data)


def _read(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return b


def _read_sections(f) -> Tuple[int, Dict[str, Section]]:
    if _read(f, 4, "magic") != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<HI", _read(f, 6, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: Dict[str, Section] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read(f, 2, "section name length"))
        name = _read(f, n, "section name").decode("utf-8")
        (kind,) = struct.unpack("<B", _read(f, 1, name))
        if kind == KIND_JSON:
            (length,) = struct.unpack("<Q", _read(f, 8, name))
            out[name] = json.loads(_read(f, length, name).decode("utf-8"))
        elif kind == KIND_ARRAY:
            (dl,) = struct.unpack("<B", _read(f, 1, name))
            dtype = np.dtype(_read(f, dl, name).decode("ascii"))
            (ndim,) = struct.unpack("<B", _read(f, 1, name))
            shape = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim, name))
            (nbytes,) = struct.unpack("<Q", _read(f, 8, name))
            arr = np.frombuffer(_read(f, nbytes, name), dtype=dtype).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="))
        else:
            raise CheckpointFormatError(f"unknown section kind {kind} for {name!r}")
    if f.read(1):
        raise CheckpointFormatError("trailing bytes after last section")
    return version, out


def state_sections(state: TrainState) -> Dict[str, Section]:
    model, cb, opt = state.model, state.model.codebook, state.optimizer
    sections: Dict[str, Section] = {
        "config": state.config.to_dict(),
        "meta": {
            "epoch": state.epoch,
            "model_seed": model.seed,
            "etf_seed": model.etf.seed,
            "tau": cb.tau,
            "kappa": cb.kappa,
            "adam": {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
            "rng": state.rng.bit_generator.state,
        },
    }
    for k, p in model.params.items():
        sections[f"param.{k}"] = p.data
    sections["codebook.codes"] = cb.codes.data
    sections["codebook.ema_counts"] = cb.ema_counts
    sections["codebook.ema_accum"] = cb.ema_accum
    sections["etf.M"] = model.etf.M.data
    sections.update(opt.state_arrays())
    return sections


def dumps_state(state: TrainState) -> bytes:
    buf = io.BytesIO()
    _write_sections(buf, state_sections(state))
    return buf.getvalue()


def loads_state(data: bytes) -> TrainState:
    _, s = _read_sections(io.BytesIO(data))
    try:
        config = TrainConfig.from_dict(s["config"])
        meta = s["meta"]
        params = {k[len("param."):]: Tensor(v, requires_grad=True, name=k[len("param."):])
                  for k, v in s.items() if k.startswith("param.")}
        cb = Codebook(
            codes=Tensor(s["codebook.codes"], requires_grad=True, name="codebook"),
            ema_counts=s["codebook.ema_counts"],
            ema_accum=s["codebook.ema_accum"],
            tau=float(meta["tau"]),
            kappa=float(meta["kappa"]),
        )
        etf = EtfClassifier(M=Tensor(s["etf.M"], name="etf"), seed=int(meta["etf_seed"]))
    except KeyError as e:
        raise CheckpointFormatError(f"checkpoint is missing section or field {e}") from None
    model = DmmModel(config.dims, params, cb, etf, seed=int(meta["model_seed"]),
                     learnable_classifier=config.learnable_classifier)
    a = meta["adam"]
    opt = Adam(model.trainable(fixed_codebook=config.fixed_codebook),
               beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    opt.load_state_arrays(s, int(a["t"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(config, model, opt, rng, epoch=int(meta["epoch"]))


def save_checkpoint(path, state: TrainState) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_state(state))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads_state(path.read_bytes())
