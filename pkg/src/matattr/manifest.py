"""Atomic stage outputs with digest-chained run manifests.

Every CLI stage writes its outputs via write-temp-then-rename and records
a manifest JSON holding the config hash, seed, input digests, output
digests, and wall time, so a pipeline can be audited stage by stage.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

from .errors import InputError


def sha256_file(path: str | Path) -> str:
    if not Path(path).is_file():
        raise InputError(f"input file not found: {path}")
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


@contextmanager
def atomic_write(path: str | Path, mode: str = "w"):
    """Write to a sibling temp file, rename into place on success."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    kwargs = {} if "b" in mode else {"encoding": "utf-8"}
    fh = open(tmp, mode, **kwargs)
    try:
        yield fh
        fh.close()
        os.replace(tmp, path)
    except BaseException:
        fh.close()
        tmp.unlink(missing_ok=True)
        raise


def atomic_move(tmp_writer, path: str | Path) -> None:
    """Run tmp_writer(tmp_path) then rename tmp_path into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp_writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


class StageRun:
    """Collects inputs/outputs for one stage and writes its manifest."""

    def __init__(self, stage: str, config: dict, seed: int | None):
        self.stage = stage
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._start = time.monotonic()
        self._wall_start = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def add_input(self, path: str | Path) -> None:
        path = Path(path)
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        path = Path(path)
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path: str | Path) -> None:
        manifest = {
            "stage": self.stage,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self._wall_start,
            "wall_seconds": round(time.monotonic() - self._start, 3),
        }
        with atomic_write(path) as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
