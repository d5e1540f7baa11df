"""JSON configuration for solver settings, problems, and result summaries."""
from __future__ import annotations

import json
from pathlib import Path

from .problems import OcpSpec
from .shlsp import SolverSettings


def read_config(path) -> dict:
    """Load a JSON document; the same reader ingests result summaries."""
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def settings_from_config(doc: dict, overrides: dict | None = None) -> SolverSettings:
    """Build solver settings from the ``settings`` section plus CLI overrides."""
    merged = dict(doc.get("settings", {}))
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return SolverSettings.from_dict(merged)


def ocp_spec_from_config(doc: dict) -> OcpSpec | None:
    if "ocp" not in doc:
        return None
    return OcpSpec.from_dict(doc["ocp"])
