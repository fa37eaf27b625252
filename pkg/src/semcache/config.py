"""Config file discovery and parsing (TOML or JSON).

Resolution order: explicit ``--config`` path, then ``$SEMCACHE_CONFIG``, then
built-in defaults.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

ENV_VAR = "SEMCACHE_CONFIG"


def resolve_path(explicit: str | None = None) -> Path | None:
    if explicit:
        return Path(explicit)
    env = os.environ.get(ENV_VAR)
    return Path(env) if env else None


def read_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a table/object")
    return data


def load_config(explicit: str | None = None) -> tuple[dict[str, Any], Path | None]:
    path = resolve_path(explicit)
    if path is None:
        return {}, None
    return read_config(path), path


def section(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"config section [{name}] must be a table")
    return dict(value)
