"""Binary checkpoints: format version, JSON metadata, then named float64 arrays.

Layout (little-endian)::

    b"NCOPTCKP"  u32 version  u32 meta_len  meta_json
    u32 count  { u32 name_len  name  u32 ndim  i64[ndim] shape  f8[prod(shape)] }*

Array names are ``section/param``; sections used by the trainer are
``policy``, ``critic``, ``adam.policy``, ``adam.critic`` and ``state``.
"""

from __future__ import annotations

import io
import json
import struct
from collections.abc import Mapping

import numpy as np

from .grad import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ParamStore, read_arrays, write_arrays
from .io import atomic_write_bytes


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, sections: Mapping[str, Mapping[str, np.ndarray] | ParamStore], meta: dict | None = None) -> None:
    flat = {}
    for sec, arrays in sections.items():
        if isinstance(arrays, ParamStore):
            arrays = arrays.arrays()
        for name, a in arrays.items():
            flat[f"{sec}/{name}"] = a
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    write_arrays(buf, flat)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, mlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(mlen).decode())
        flat = read_arrays(fh)
    sections: dict[str, dict[str, np.ndarray]] = {}
    for key, a in flat.items():
        sec, _, name = key.partition("/")
        sections.setdefault(sec, {})[name] = a
    return meta, sections


def load_policy(path):
    """Rebuild a :class:`~ncopt.policy.PointerNetwork` from a checkpoint."""
    from .policy import PointerNetwork

    meta, sections = load_checkpoint(path)
    arch = meta.get("policy_arch")
    if arch is None or "policy" not in sections:
        raise CheckpointError(f"{path}: no policy in checkpoint")
    net = PointerNetwork(d=arch["d"], input_dim=arch["input_dim"], n_glimpses=arch["n_glimpses"])
    net.params.load_arrays(sections["policy"])
    return net
