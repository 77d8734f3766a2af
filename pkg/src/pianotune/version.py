import subprocess
from importlib import metadata
from pathlib import Path


def _get_git_commit() -> str | None:
    """Get the current git commit hash."""
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            check=True,
        )
        return result.stdout.strip()
    except (subprocess.CalledProcessError, FileNotFoundError):
        return None


def _get_package_version() -> str:
    try:
        return metadata.version("pianotune")
    except metadata.PackageNotFoundError:
        return "0.0.0+unknown"


# Capture at import time so run provenance records the code that was loaded
_COMMIT_HASH = _get_git_commit()
__version__ = _get_package_version()


def get_version_info() -> dict:
    """Return version information recorded with every run's outputs."""
    return {
        "version": __version__,
        "commit": _COMMIT_HASH,
        "commit_short": _COMMIT_HASH[:8] if _COMMIT_HASH else None,
    }
