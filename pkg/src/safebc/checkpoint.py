"""Plain-text checkpoint format shared by every model kind.

Layout::

    CKPT v1 kind=<mlp|operator|bcbf>
    meta <key> <value>          # zero or more
    <tensor-name> <rows> <cols>
    <row of `cols` decimal values>
    ...

Values use 17 significant digits, which round-trips float64 exactly. 1-D
tensors are stored as a single row; loaders reshape from their known model
structure. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

KINDS = ("mlp", "operator", "bcbf")


def fmt(x):
    """Decimal text for one float, exact under round-trip."""
    return format(float(x), ".17g")


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, kind, tensors, meta=None):
    """Write named tensors (dict name -> array of ndim <= 2) plus metadata."""
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    lines = [f"CKPT v1 kind={kind}"]
    for key, value in (meta or {}).items():
        key = str(key)
        if " " in key:
            raise CheckpointError(f"meta key {key!r} contains a space")
        lines.append(f"meta {key} {value}")
    for name, arr in tensors.items():
        name = str(name)
        if " " in name:
            raise CheckpointError(f"tensor name {name!r} contains a space")
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim > 2:
            raise CheckpointError(f"tensor {name!r} has ndim {a.ndim} > 2")
        a = np.atleast_2d(a)
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        for row in a:
            lines.append(" ".join(fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    """Read back (kind, tensors, meta); tensors come out 2-D."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("CKPT v1 kind="):
        raise CheckpointError(f"{path}: not a CKPT v1 file")
    kind = lines[0].split("kind=", 1)[1]
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown kind {kind!r}")
    meta = {}
    tensors = {}
    i = 1
    n = len(lines)
    while i < n and lines[i].startswith("meta "):
        parts = lines[i].split(" ", 2)
        if len(parts) != 3:
            raise CheckpointError(f"{path}:{i + 1}: malformed meta line")
        meta[parts[1]] = parts[2]
        i += 1
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        if len(header) != 3:
            raise CheckpointError(f"{path}:{i + 1}: malformed tensor header")
        name = header[0]
        try:
            rows, cols = int(header[1]), int(header[2])
        except ValueError as exc:
            raise CheckpointError(f"{path}:{i + 1}: bad tensor shape") from exc
        i += 1
        data = np.empty((rows, cols), dtype=np.float64)
        for r in range(rows):
            if i >= n:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            values = lines[i].split()
            if len(values) != cols:
                raise CheckpointError(
                    f"{path}:{i + 1}: expected {cols} values, got {len(values)}")
            try:
                data[r] = [float(v) for v in values]
            except ValueError as exc:
                raise CheckpointError(f"{path}:{i + 1}: bad value") from exc
            i += 1
        tensors[name] = data
    return kind, tensors, meta
