"""Access to data files shipped inside the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def fixture_dir() -> Path:
    """Directory of the shipped fixture corpus (roster, API pages, articles)."""
    return Path(str(resources.files("artcontext") / "fixtures"))
