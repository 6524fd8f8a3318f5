"""Checkpoint file: text header with a tensor manifest, then float32 payload.

Layout::

    HLORA-CKPT 1
    config_hash <hex>
    stages <comma-separated completed stages or ->
    entries <n>
    <name> <dim,dim,...> <byte offset> <element count>
    ...
    end
    <raw little-endian float32 payload>
"""

from __future__ import annotations

import io

import numpy as np

MAGIC = "HLORA-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray], config_hash: str, stages: list[str]) -> bytes:
    names = sorted(state)
    lines = [f"{MAGIC} {VERSION}", f"config_hash {config_hash}", f"stages {','.join(stages) or '-'}", f"entries {len(names)}"]
    payload = io.BytesIO()
    for name in names:
        if any(c.isspace() for c in name):
            raise CheckpointError(f"entry name {name!r} contains whitespace")
        arr = np.array(state[name], dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"{name} {shape} {payload.tell()} {arr.size}")
        payload.write(arr.tobytes())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + payload.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], str, list[str]]:
    head_end = blob.find(b"\nend\n")
    if head_end < 0:
        raise CheckpointError("checkpoint header is not terminated")
    header = blob[:head_end].decode("ascii").split("\n")
    payload = memoryview(blob)[head_end + 5 :]
    try:
        magic, version = header[0].split()
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint (tag {magic!r})")
        if int(version) != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_hash = header[1].split()[1]
        stages_field = header[2].split()[1]
        n = int(header[3].split()[1])
        entries = header[4 : 4 + n]
        if len(entries) != n or len(header) != 4 + n:
            raise CheckpointError("manifest length disagrees with entry count")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    state = {}
    end = 0
    for line in entries:
        name, shape_s, off_s, count_s = line.split()
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        offset, count = int(off_s), int(count_s)
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"{name}: shape {shape} does not hold {count} values")
        if offset + 4 * count > len(payload):
            raise CheckpointError(f"{name}: payload truncated")
        state[name] = np.frombuffer(payload[offset : offset + 4 * count], dtype="<f4").reshape(shape).copy()
        end = max(end, offset + 4 * count)
    if end != len(payload):
        raise CheckpointError("payload length disagrees with manifest")
    stages = [] if stages_field == "-" else stages_field.split(",")
    return state, config_hash, stages


def save(path, state: dict[str, np.ndarray], config_hash: str, stages: list[str]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(state, config_hash, stages))


def load(path, expected_hash: str | None = None, force: bool = False):
    """Returns ``(state, config_hash, stages)``; a hash mismatch fails unless ``force``."""
    with open(path, "rb") as fh:
        state, config_hash, stages = loads(fh.read())
    if expected_hash is not None and config_hash != expected_hash and not force:
        raise CheckpointError(
            f"{path}: checkpoint config hash {config_hash} does not match {expected_hash} (use --force to override)"
        )
    return state, config_hash, stages
