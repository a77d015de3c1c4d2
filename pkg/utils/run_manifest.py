#!/usr/bin/env python3
"""
Run Manifests and Artifact Writing
Atomic file output, versioned CSV tables and the manifest that sits beside
every artifact so a run can be replayed.
"""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from pydantic import BaseModel, Field

from utils import __version__
from utils.errors import TraceIoError

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def format_number(value: Any) -> str:
    """Full-precision decimal for floats, plain text for everything else."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target."""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(
            prefix=f".{target.name}.", suffix=".tmp", dir=str(target.parent)
        )
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp_name, target)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    except OSError as e:
        raise TraceIoError(f"Cannot write {path}: {e}")


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def render_csv(schema: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """CSV text with a `# schema=` line, the header row, then data rows."""
    buffer = io.StringIO()
    buffer.write(f"# schema={schema}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(v) for v in row])
    return buffer.getvalue()


def write_csv(
    path: str, schema: str, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> None:
    atomic_write_text(path, render_csv(schema, header, rows))
    logger.info(f"📄 Wrote {path}")


def read_csv_rows(path: str) -> List[Dict[str, str]]:
    """Rows of a CSV written by write_csv (schema comment skipped)."""
    try:
        with open(path, newline="") as f:
            lines = [line for line in f if not line.startswith("#")]
    except OSError as e:
        raise TraceIoError(f"Cannot read {path}: {e}")
    return list(csv.DictReader(lines))


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                digest.update(chunk)
    except OSError as e:
        raise TraceIoError(f"Cannot hash {path}: {e}")
    return digest.hexdigest()


class RunManifest(BaseModel):
    """Everything needed to reproduce one command's outputs."""

    command: str
    config: Dict[str, Any]
    seeds: Dict[str, Optional[int]] = Field(default_factory=dict)
    tool_version: str = __version__
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    environment: Dict[str, Any] = Field(default_factory=dict)
    created_at: str = Field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )

    @classmethod
    def for_inputs(
        cls,
        command: str,
        config: Dict[str, Any],
        inputs: Iterable[str] = (),
        seeds: Optional[Dict[str, Optional[int]]] = None,
        environment: Optional[Dict[str, Any]] = None,
    ) -> "RunManifest":
        return cls(
            command=command,
            config=config,
            seeds=seeds or {},
            input_hashes={p: file_sha256(p) for p in inputs},
            environment=environment or {},
        )


def manifest_path_for(output_path: str) -> str:
    return f"{output_path}{MANIFEST_SUFFIX}"


def write_manifest(manifest: RunManifest, output_paths: Sequence[str]) -> List[str]:
    """Write the manifest beside every output artifact; returns manifest paths."""
    manifest.outputs = list(output_paths)
    payload = manifest.model_dump_json(indent=2)
    written = []
    for output in output_paths:
        path = manifest_path_for(output)
        atomic_write_text(path, payload)
        written.append(path)
    return written


def load_manifest(path: str) -> RunManifest:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise TraceIoError(f"Cannot read manifest {path}: {e}")
    return RunManifest.model_validate(json.loads(text))
