import hashlib
import json
import logging
import os
import socket
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Tuple

from pianotune.errors import LockError

LOCK_FILE_NAME = ".pianotune.lock"

logger = logging.getLogger(__name__)


def configure_logging(debug: bool = False) -> None:
    """Send pianotune logs to stderr, at DEBUG when `debug` is set."""
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def get_random_port() -> Tuple[socket.socket, int]:
    """Get a random available port and return the socket and port number.

    Returns the socket to avoid timing issues where the port might be taken
    between checking and using it. The caller should close the socket when done.
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    sock.listen(1)
    port = sock.getsockname()[1]
    return sock, port


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write `data` to `path` through a temporary file in the same directory.

    Readers see either the old file or the complete new one.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def atomic_write_json(path: Path, payload: Any) -> None:
    atomic_write_bytes(path, json.dumps(payload, indent=2, sort_keys=True).encode("utf-8"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


@contextmanager
def output_lock(directory: Path) -> Iterator[Path]:
    """Hold an exclusive lock file in `directory` for the duration of a command.

    Raises:
        LockError: If another process already holds the lock.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_FILE_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"Output directory {directory} is locked by another run ({lock_path})")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        logger.debug("Acquired lock %s", lock_path)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)
