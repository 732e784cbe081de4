"""Reproducibility records written next to every command output."""

import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config import TOOL_VERSION

PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write via a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_json(path: PathLike, obj: Any) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2) + '\n')


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def manifest_path_for(output: PathLike) -> Path:
    output = Path(output)
    return output.with_name(output.name + '.manifest.json')


@dataclass
class RunManifest:
    """Everything needed to re-run a command bit-identically."""

    command: List[str]
    config: Dict[str, Any]
    pool_hashes: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    @classmethod
    def start(cls, config: Dict[str, Any], seed: Optional[int] = None,
              command: Optional[List[str]] = None) -> 'RunManifest':
        return cls(command=list(command if command is not None else sys.argv), config=config, seed=seed)

    def write(self, output: PathLike) -> Path:
        """Record ``output`` and write the manifest next to it."""
        self.finished_at = _now()
        self.outputs.append(str(output))
        return atomic_write_json(manifest_path_for(output), asdict(self))
