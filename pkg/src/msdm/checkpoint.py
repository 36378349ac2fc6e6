"""Checkpoint files: a text manifest followed by raw little-endian float32 tensors.

Layout::

    MSDM-CKPT 1
    seed: <int>
    step: <int>
    epoch: <int>
    meta: <single-line JSON>
    tensor: <index> <name> <kind> <dim,dim,...>
    ...
    <blank line>
    <tensor bytes concatenated in declaration order>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .architecture import Model, ModelConfig
from .errors import FormatError

MAGIC = "MSDM-CKPT 1"


def save_checkpoint(path: str | Path, model: Model, *, step: int = 0, epoch: int = 0, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["model"] = model.config.to_dict()
    lines = [MAGIC, f"seed: {model.seed}", f"step: {step}", f"epoch: {epoch}"]
    lines.append("meta: " + json.dumps(meta, sort_keys=True, separators=(",", ":")))
    tensors = model.named_tensors()
    for i, (name, p) in enumerate(tensors):
        kind = "param" if p.trainable else "buffer"
        lines.append(f"tensor: {i} {name} {kind} {','.join(str(d) for d in p.shape)}")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for _, p in tensors:
            fh.write(p.value.astype("<f4").tobytes(order="C"))
    tmp.replace(path)


def read_checkpoint_header(path: str | Path) -> tuple[dict, list[tuple[str, str, tuple[int, ...]]], bytes]:
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0 or not blob.startswith(MAGIC.encode()):
        raise FormatError(f"{path}: not a checkpoint file")
    head: dict = {}
    entries = []
    for line in blob[:sep].decode("utf-8").splitlines()[1:]:
        key, _, value = line.partition(": ")
        if key == "tensor":
            _, name, kind, shape = value.split(" ")
            entries.append((name, kind, tuple(int(d) for d in shape.split(",") if d)))
        elif key == "meta":
            head["meta"] = json.loads(value)
        else:
            head[key] = int(value)
    return head, entries, blob[sep + 2 :]


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Rebuild the model and return it with the header (seed, step, epoch, meta)."""
    head, entries, payload = read_checkpoint_header(path)
    config = ModelConfig.from_dict(head["meta"]["model"])
    model = Model(config, seed=head.get("seed", config.seed))
    tensors = model.named_tensors()
    if [(n, p.shape) for n, p in tensors] != [(n, s) for n, _, s in entries]:
        raise FormatError(f"{path}: tensor manifest does not match the model config")
    offset = 0
    for _, p in tensors:
        nbytes = p.value.size * 4
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated tensor data")
        p.value = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(p.shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: trailing bytes after tensor data")
    return model, head
