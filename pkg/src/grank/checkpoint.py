"""GRNK checkpoint files.

Layout (little-endian)::

    b"GRNK"  version:u32
    repeated: name_len:u32  name:utf8  rows:u32  cols:u32  values[rows*cols]

Version 1 stores 32-bit floats, version 2 stores 64-bit floats (written
for 64-bit training runs so reloads stay bitwise exact).  Optimizer records
follow the parameters under an ``opt.`` prefix; scalar bookkeeping lives in
1x1 ``meta.`` records.  The configuration snapshot is written beside the
file as ``<path>.cfg``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, load_config, save_config
from .errors import ConfigError, ParseError

MAGIC = b"GRNK"
_DTYPES = {1: "<f4", 2: "<f8"}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: Config
    step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, float] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return int(self.params["shared.item_embedding"].shape[0])

    @property
    def demographics_width(self) -> int:
        return int(self.meta.get("demographics_width", 0))


def config_path(path) -> Path:
    return Path(f"{path}.cfg")


def write_records(fh, records: dict[str, np.ndarray], dtype: str) -> None:
    for name, value in records.items():
        value = np.asarray(value)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim == 0:
            value = value.reshape(1, 1)
        if value.ndim != 2:
            raise ValueError(f"record {name!r} is not a matrix")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)) + encoded)
        fh.write(struct.pack("<II", *value.shape))
        fh.write(np.ascontiguousarray(value, dtype=dtype).tobytes())


def read_records(raw: bytes, pos: int, dtype: str) -> dict[str, np.ndarray]:
    width = np.dtype(dtype).itemsize
    out = {}
    while pos < len(raw):
        try:
            (length,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + length].decode("utf-8")
            pos += 4 + length
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as exc:
            raise ParseError(f"truncated or corrupt record header at byte {pos}") from exc
        size = rows * cols * width
        if pos + size > len(raw):
            raise ParseError(f"record {name!r} runs past end of file")
        out[name] = np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += size
    return out


def save_checkpoint(path, model, step: int = 0, optimizer=None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = model.parameter_dict()
    wide = any(p.data.dtype == np.float64 for p in params.values())
    version = 2 if wide else 1
    values = {
        "step": step,
        "n_items": model.n_items,
        "demographics_width": model.demographics_width,
        **(meta or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", version))
        write_records(fh, {name: p.data for name, p in params.items()}, _DTYPES[version])
        if optimizer is not None:
            write_records(fh, {f"opt.{k}": v for k, v in optimizer.state_dict().items()}, _DTYPES[version])
        write_records(fh, {f"meta.{k}": np.float64(v) for k, v in values.items()}, _DTYPES[version])
    tmp.replace(path)
    save_config(model.cfg, config_path(path))
    return path


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version not in _DTYPES:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    records = read_records(raw, 8, _DTYPES[version])
    params, opt, meta = {}, {}, {}
    for name, value in records.items():
        if name.startswith("opt."):
            opt[name[4:]] = value
        elif name.startswith("meta."):
            meta[name[5:]] = float(value[0, 0])
        else:
            params[name] = value
    cfg_file = config_path(path)
    if not cfg_file.exists():
        raise ConfigError(f"{path}: missing config snapshot {cfg_file.name}")
    return Checkpoint(params=params, config=load_config(cfg_file), step=int(meta.get("step", 0)), optimizer=opt, meta=meta)


def load_model(path, overrides: dict | None = None):
    """Rebuild a model from a checkpoint; returns (model, checkpoint)."""
    from .model import GRankModel

    ckpt = read_checkpoint(path)
    cfg = ckpt.config
    if overrides:
        cfg.update(overrides)
    dtype = next(iter(ckpt.params.values())).dtype
    model = GRankModel(cfg, ckpt.n_items, ckpt.demographics_width, seed=0)
    model.cast(dtype)
    own = model.parameter_dict()
    missing = set(own) - set(ckpt.params)
    extra = set(ckpt.params) - set(own)
    if missing or extra:
        raise ConfigError(f"checkpoint/config mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    for name, p in own.items():
        if p.data.shape != ckpt.params[name].shape:
            raise ConfigError(f"{name}: checkpoint shape {ckpt.params[name].shape} != model shape {p.data.shape}")
        p.assign(ckpt.params[name])
    return model, ckpt
