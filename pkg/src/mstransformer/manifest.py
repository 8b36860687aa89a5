"""Run manifests: what was run, with which settings, and what it produced."""

from __future__ import annotations

import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__

MANIFEST_FORMAT = "mstransformer-run/1"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, Any]
    seed: Optional[int]
    cwd: str = ""
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    outputs: list[str] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)
    timings: dict[str, Any] = field(default_factory=dict)
    environment: dict[str, str] = field(default_factory=lambda: {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
    })
    format: str = MANIFEST_FORMAT

    def add_output(self, path) -> None:
        p = str(path)
        if p not in self.outputs:
            self.outputs.append(p)

    def write(self, path) -> Path:
        self.finished = _now()
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.add_output(p)
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return p

    @classmethod
    def read(cls, path) -> "RunManifest":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"{p}: manifest not found")
        data = json.loads(p.read_text())
        if data.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{p}: not a run manifest")
        return cls(**data)
