from __future__ import annotations

import logging
import os
import time
from pathlib import Path

log = logging.getLogger(__name__)


def safe_replace(src_tmp: str | Path, dst_final: str | Path, retries: int = 5, wait_sec: float = 0.6) -> None:
    """Atomic swap with retries, for destinations briefly locked by a reader."""
    for _ in range(retries - 1):
        try:
            os.replace(src_tmp, dst_final)
            return
        except PermissionError:
            log.warning("replace of %s blocked, retrying in %.1fs", dst_final, wait_sec)
            time.sleep(wait_sec)
    os.replace(src_tmp, dst_final)


def write_bytes(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    safe_replace(tmp, path)
    return path


def write_text(path: str | Path, text: str) -> Path:
    return write_bytes(path, text.encode("utf-8"))
