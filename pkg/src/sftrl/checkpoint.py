"""Checkpoint files and metrics streams.

Checkpoint layout::

    SFTRL-CHECKPOINT\\n
    <one-line JSON header: format_version, config, tensors [[name, shape], ...], meta>\\n
    <raw little-endian float32 values of every tensor, in header order>
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np

from .policy import ParameterSet, PolicyConfig, param_shapes

MAGIC = b"SFTRL-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParameterSet, config: PolicyConfig, meta: Optional[dict] = None) -> None:
    expected = param_shapes(config)
    if [(k, tuple(v.shape)) for k, v in params.items()] != expected:
        raise CheckpointError("parameter names/shapes do not match the config")
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": [[k, list(v.shape)] for k, v in params.items()],
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        return json.loads(f.readline())


def load_checkpoint(path) -> Tuple[ParameterSet, PolicyConfig, dict]:
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        header = json.loads(f.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        raw = f.read()
    config = PolicyConfig(**header["config"])
    params: ParameterSet = {}
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        params[name] = chunk.reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, config, header.get("meta", {})


class MetricsWriter:
    """Append-only JSON-lines stream, one record per optimizer step."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")

    def __call__(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(path, records: Iterable[dict]) -> None:
    with MetricsWriter(path) as w:
        for r in records:
            w(r)


def read_metrics(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
