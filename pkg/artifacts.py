"""
Output files of the command-line tools. Every file is written to a
temporary sibling first and renamed into place, so a failed run never
leaves a partial artifact behind.
"""

import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

from sim.system import STATS_COLUMNS
from sim.vm import ChannelProgramImage

logger = logging.getLogger(__name__)


def atomic_write(path: str | Path, payload: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("wrote %s (%d bytes)", path, len(data))
    return path


def stats_csv(rows: Iterable[dict[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=STATS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({column: row[column] for column in STATS_COLUMNS})
    return buffer.getvalue()


def write_stats(path: str | Path, rows: Iterable[dict[str, Any]]) -> Path:
    return atomic_write(path, stats_csv(rows))


def write_trace(path: str | Path, lines: Iterable[str]) -> Path:
    return atomic_write(path, "".join(f"{line}\n" for line in lines))


def write_image(path: str | Path, image: ChannelProgramImage) -> Path:
    return atomic_write(path, image.to_bytes())


def read_stats(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))
