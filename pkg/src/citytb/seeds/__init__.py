"""Bundled topology seeds and scenario scripts."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def seed_path(name: str) -> Path:
    """Filesystem path of a bundled seed (e.g. ``santander.topo``)."""
    candidate = resources.files(__package__) / name
    path = Path(str(candidate))
    if not path.exists():
        raise FileNotFoundError(f"no bundled seed named {name!r}")
    return path


def list_seeds() -> list[str]:
    return sorted(
        entry.name
        for entry in Path(str(resources.files(__package__))).iterdir()
        if entry.suffix in (".topo", ".scn")
    )
