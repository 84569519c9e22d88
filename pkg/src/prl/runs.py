"""Run bookkeeping: canonical config hashing, manifests, run directories.

A run directory is named by the hash of its fully resolved config plus
the seed, so any result can be traced back to exactly what produced it.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

__version__ = "0.1.0"

__all__ = ["config_hash", "RunManifest", "resolve_run_root", "run_dir_name", "file_checksum"]


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config; key order irrelevant."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_run_root(explicit: str | None = None) -> Path:
    """Output root: explicit argument, then PRL_RUN_DIR, then ./runs."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("PRL_RUN_DIR")
    return Path(env) if env else Path("runs")


def run_dir_name(config: dict, seed: int) -> str:
    return f"{config_hash(config)[:12]}-s{seed}"


@dataclass
class RunManifest:
    """Written before training starts; finished_at filled in afterwards."""

    config: dict
    seed: int
    tool_version: str = __version__
    corpus_checksum: str | None = None
    valid_corpus_checksum: str | None = None
    started_at: float = field(default_factory=time.time)
    finished_at: float | None = None

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "corpus_checksum": self.corpus_checksum,
            "valid_corpus_checksum": self.valid_corpus_checksum,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
