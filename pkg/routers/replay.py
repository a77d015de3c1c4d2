#!/usr/bin/env python3
"""
Replay Command
Re-runs a recorded command from its manifest and optionally checks that every
output comes back byte-identical.
"""

import logging
from pathlib import Path

from pydantic import BaseModel

from routers.common import CommandResult
from utils.errors import ValidationError
from utils.run_manifest import file_sha256, load_manifest

logger = logging.getLogger(__name__)


class ReplayRequest(BaseModel):
    manifest: str
    verify: bool = False


def replay(request: ReplayRequest) -> CommandResult:
    from routers import run_command

    manifest = load_manifest(request.manifest)
    if manifest.command == "replay":
        raise ValidationError("a replay manifest cannot be replayed")

    before = {
        path: file_sha256(path) for path in manifest.outputs if Path(path).exists()
    }
    result = run_command(manifest.command, manifest.config)

    summary = {"command": manifest.command, "outputs": result.outputs}
    lines = [f"🔁 Replayed {manifest.command} ({len(result.outputs)} outputs)"]
    if request.verify:
        changed = [
            path for path in result.outputs if before.get(path) != file_sha256(path)
        ]
        summary["identical"] = not changed
        summary["changed"] = changed
        if changed:
            raise ValidationError(f"replay produced different outputs: {', '.join(changed)}")
        lines.append("✅ All outputs byte-identical")
    return CommandResult(
        command="replay",
        outputs=[],
        inputs=[request.manifest],
        summary=summary,
        lines=lines,
    )
