"""pianotune package initialization."""

from __future__ import annotations

from pianotune.version import __version__

__all__: list[str] = ["__version__"]
