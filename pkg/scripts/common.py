#!/usr/bin/env python3
"""
common.py - Shared plumbing for the bp-int8-encoder scripts

Logging, the error hierarchy (each error carries its CLI exit code), environment
configuration, atomic file writes and run manifests.

Usage::

    from common import ConfigError, atomic_write_bytes, log

    log("Wrote container", path=out, bytes=size)

Environment Variables:
    LOG_FORMAT         - Log output format: "text" (default) or "json" (JSONL to stderr)
    BPQ_THREADS        - Cap on BLAS/OpenMP threads (default: 1, keeps results bit-reproducible)
    BPQ_DEBUG_NUMERICS - Check every tensor op for NaN/Inf and raise (default: false)
"""

import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional

TOOL_VERSION = "0.1.0"

# Log format: "text" (default, plain text to stderr) or "json" (JSONL to stderr)
LOG_FORMAT = os.environ.get("LOG_FORMAT", "text").lower()

BPQ_THREADS = int(os.environ.get("BPQ_THREADS", "1"))
DEBUG_NUMERICS = os.environ.get("BPQ_DEBUG_NUMERICS", "false").lower() == "true"

# Must run before numpy is first imported anywhere in the process.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, str(BPQ_THREADS))


def _log_json(level: str, msg: str, **kwargs) -> None:
    """Emit a single JSON log line to stderr.

    Always includes: ts (ISO 8601 UTC), level, msg.
    Additional structured fields are passed via kwargs.
    """
    entry = {
        "ts": datetime.now(timezone.utc).isoformat(),
        "level": level,
        "msg": msg,
    }
    entry.update(kwargs)
    print(json.dumps(entry, separators=(",", ":"), default=str), file=sys.stderr, flush=True)


def log(msg: str, level: str = "info", **kwargs) -> None:
    """Log a message to stderr.

    When LOG_FORMAT=json, outputs a JSON object per line (JSONL) with
    structured fields.  Otherwise, prints plain text with a [bpq] prefix.
    """
    if LOG_FORMAT == "json":
        _log_json(level, msg, **kwargs)
    else:
        print(f"[bpq] {msg}", file=sys.stderr, flush=True)


# --- Errors ---


class BPQError(Exception):
    """Base error; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class UsageError(BPQError):
    exit_code = 2


class ConfigError(UsageError):
    """Invalid configuration or option combination."""


class DataError(BPQError):
    exit_code = 3


class EmptyDatasetError(DataError):
    pass


class ContainerError(DataError):
    """Malformed segment container."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class NonFiniteSampleError(ContainerError):
    pass


class InvalidLabelError(ContainerError):
    pass


class ModelFileError(DataError):
    """Corrupt, truncated or unrecognized model file."""


class DatasetMismatchError(DataError):
    pass


class MetricError(DataError):
    pass


class UndefinedR2Error(MetricError):
    pass


class NumericError(BPQError):
    exit_code = 4


class ShapeError(NumericError):
    pass


class RangeError(NumericError):
    """Non-finite values where a finite range is required."""


class DivergenceError(NumericError):
    pass


class ContractError(NumericError):
    pass


class ObserverStateError(NumericError):
    pass


# --- Files ---


def atomic_write_bytes(file_path: str, payload: bytes) -> int:
    """
    Write bytes to file atomically using temp file + rename.

    Writes to a temporary file in the same directory, then renames it
    to the target path, so readers never see a half-written artifact.

    Returns:
        Number of bytes written.
    """
    dir_path = os.path.dirname(os.path.abspath(file_path))
    os.makedirs(dir_path, exist_ok=True)

    fd, tmp_path = tempfile.mkstemp(dir=dir_path, prefix=".bpq_", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, file_path)
    except Exception:
        # Clean up temp file on failure
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise
    return len(payload)


def atomic_write_text(file_path: str, text: str) -> int:
    """Atomic UTF-8 text write; see atomic_write_bytes."""
    return atomic_write_bytes(file_path, text.encode("utf-8"))


def sha256_file(file_path: str) -> str:
    """Hex SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# --- Run manifests ---


@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI invocation."""

    command: str
    flags: dict[str, Any]
    seeds: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    data_sha256: Optional[str] = None
    tool_version: str = TOOL_VERSION
    start_time: float = field(default_factory=time.time)
    duration_seconds: float = 0.0

    def finish(self) -> None:
        self.duration_seconds = round(time.time() - self.start_time, 3)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("start_time")
        return d

    def write(self, out_path: str) -> str:
        """Write ``<out_path>.manifest.json`` and return its path."""
        path = manifest_path(out_path)
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def manifest_path(out_path: str) -> str:
    return out_path + ".manifest.json"


def read_manifest(out_path: str) -> Optional[dict[str, Any]]:
    """Return the manifest written next to ``out_path``, or None if there is none."""
    path = manifest_path(out_path)
    if not os.path.exists(path):
        return None
    with open(path, "r") as f:
        return json.load(f)
