"""Binary checkpoints.

Layout (little-endian throughout)::

    b"XGFT"  u32 version
    u32 count, then parameter records (name, dims, f32 values)
    u32 count, then exact records (name, dims, f64 values): parameters,
        optimiser buffers and recurrent state, so a resumed run is bit-exact
    u32 length, then UTF-8 JSON with configs, counters, rng and worker state

A record is ``u32 name length, name bytes, u32 ndim, u32 dims..., values``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import read_records, write_records

MAGIC = b"XGFT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]        # f32 view, what inference tools read
    exact: dict[str, np.ndarray]         # f64 blocks
    meta: dict

    def exact_params(self) -> dict[str, np.ndarray]:
        pre = "param/"
        found = {k[len(pre):]: v for k, v in self.exact.items() if k.startswith(pre)}
        return found or {k: v.astype(np.float64) for k, v in self.params.items()}

    def block(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.exact.items() if k.startswith(prefix)}


def encode(params: dict[str, np.ndarray], exact: dict[str, np.ndarray], meta: dict) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<I", len(params)))
    write_records(fh, params.items(), "<f4")
    fh.write(struct.pack("<I", len(exact)))
    write_records(fh, exact.items(), "<f8")
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    return fh.getvalue()


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise CheckpointError(f"{source}: truncated header")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    fh = io.BytesIO(data[8:])
    try:
        (n,) = struct.unpack("<I", fh.read(4))
        params = read_records(fh, n, "<f4")
        (n,) = struct.unpack("<I", fh.read(4))
        exact = read_records(fh, n, "<f8")
        (n,) = struct.unpack("<I", fh.read(4))
        blob = fh.read(n)
        if len(blob) != n:
            raise ValueError("truncated state block")
        meta = json.loads(blob.decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from None
    if fh.read(1):
        raise CheckpointError(f"{source}: trailing bytes after state block")
    return Checkpoint(params, exact, meta)


def save(path: str | Path, params: dict[str, np.ndarray], exact: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(params, exact, meta))
    tmp.replace(path)
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {str(path)!r} not found")
    return decode(path.read_bytes(), str(path))


def checkpoint_io(direction: str, path: str | Path, trainer=None, config: dict | None = None):
    """Save a trainer to ``path`` or load a checkpoint from it."""
    if direction == "save":
        if trainer is None:
            raise ValueError("save needs a trainer")
        return save(path, *trainer_payload(trainer, config))
    if direction == "load":
        return load(path)
    raise ValueError(f"direction must be 'save' or 'load', got {direction!r}")


def trainer_payload(trainer, config: dict | None = None):
    params = trainer.params.state()
    exact = {f"param/{k}": v for k, v in params.items()}
    exact.update({f"opt/{k}": v for k, v in trainer.opt.arrays().items()})
    exact.update(trainer.history_arrays())
    meta = {
        "agent": trainer.agent_cfg.to_dict(),
        "trainer": trainer.cfg.to_dict(),
        "state": trainer.state_dict(),
        "experiment": config,
    }
    return params, exact, meta


def restore_trainer(ckpt: Checkpoint, grammar=None):
    from .a2c import Trainer, TrainerConfig
    from .agent import AgentConfig

    meta = ckpt.meta
    tr = Trainer(AgentConfig(**meta["agent"]), TrainerConfig(**meta["trainer"]),
                 seed=meta["state"]["seed"], grammar=grammar)
    tr.load_state(meta["state"], ckpt.exact_params(), ckpt.block("opt/"),
                  {k: v for k, v in ckpt.exact.items() if k.startswith("history/")})
    return tr
