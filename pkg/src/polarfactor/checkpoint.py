"""Binary checkpoints: a plain-text header, a JSON metadata block and a
little-endian float64 payload, guarded by a sha256 over both blocks.

Layout::

    POLARFACTOR-CHECKPOINT
    version: 1
    meta-bytes: <n>
    payload-bytes: <m>
    sha256: <hex digest of meta + payload>
    <blank line>
    <n bytes of UTF-8 JSON><m bytes of '<f8' values>
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .icnn import IcnnConfig, IcnnParams
from .mlp import MlpConfig, MlpParams
from .numcore import DTYPE

MAGIC = b"POLARFACTOR-CHECKPOINT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Named parameter sets plus free-form JSON metadata."""

    components: dict[str, IcnnParams | MlpParams] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def _component_meta(name: str, p, steps: int) -> dict:
    if isinstance(p, IcnnParams):
        kind = "icnn"
        cfg = {k: getattr(p.cfg, k) for k in p.cfg.__dataclass_fields__}
    elif isinstance(p, MlpParams):
        kind = "mlp"
        cfg = {k: getattr(p.cfg, k) for k in p.cfg.__dataclass_fields__}
    else:
        raise CheckpointError(f"{name}: unsupported parameter type {type(p).__name__}")
    layout = [[n, list(s)] for n, s in p.layout]
    return {"name": name, "kind": kind, "config": cfg, "layout": layout, "size": int(p.size), "steps": int(steps)}


def to_bytes(ck: Checkpoint) -> bytes:
    comps = []
    arrays = []
    for name in sorted(ck.components):
        p = ck.components[name]
        comps.append(_component_meta(name, p, ck.steps.get(name, 0)))
        arrays.append(np.ascontiguousarray(p.flat, dtype="<f8"))
    meta = {"components": comps, "meta": ck.meta}
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    payload = b"".join(a.tobytes() for a in arrays)
    digest = hashlib.sha256(meta_b + payload).hexdigest()
    header = (
        MAGIC + b"\n"
        + f"version: {VERSION}\nmeta-bytes: {len(meta_b)}\npayload-bytes: {len(payload)}\nsha256: {digest}\n\n".encode()
    )
    return header + meta_b + payload


def from_bytes(blob: bytes) -> Checkpoint:
    lines = []
    pos = 0
    for _ in range(6):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated header")
        lines.append(blob[pos:end])
        pos = end + 1
    if lines[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    fields = {}
    for ln in lines[1:5]:
        key, _, val = ln.decode("ascii", "replace").partition(": ")
        fields[key] = val
    try:
        version = int(fields["version"])
        n_meta = int(fields["meta-bytes"])
        n_payload = int(fields["payload-bytes"])
        digest = fields["sha256"]
    except (KeyError, ValueError):
        raise CheckpointError("malformed header") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if lines[5] != b"" or len(blob) != pos + n_meta + n_payload:
        raise CheckpointError("size mismatch between header and body")
    meta_b = blob[pos : pos + n_meta]
    payload = blob[pos + n_meta :]
    if hashlib.sha256(meta_b + payload).hexdigest() != digest:
        raise CheckpointError("checksum mismatch: file is corrupted")
    meta = json.loads(meta_b)
    values = np.frombuffer(payload, dtype="<f8").astype(DTYPE)
    ck = Checkpoint(meta=meta["meta"])
    off = 0
    for c in meta["components"]:
        if c["kind"] == "icnn":
            p = IcnnParams(IcnnConfig(**c["config"]))
        else:
            p = MlpParams(MlpConfig(**c["config"]))
        if [[n, list(s)] for n, s in p.layout] != c["layout"] or p.size != c["size"]:
            raise CheckpointError(f"{c['name']}: layout does not match its config")
        p.flat = values[off : off + p.size].copy()
        off += p.size
        ck.components[c["name"]] = p
        ck.steps[c["name"]] = c["steps"]
    if off != values.size:
        raise CheckpointError("payload length does not match the components")
    return ck


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())
