"""Per-round metrics as CSV.

One header line, then one comma-separated row per round. Floats are written
with ``repr`` so a file parses back to the exact values; ``nan`` stays
``nan``. Every row is flushed as it is written, so an interrupted run keeps
the rounds it finished.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import IO, Iterable

from .federation import RoundMetrics

FIELDS = ("round", "codec", "train_loss", "eval_accuracy", "uplink_bytes", "elapsed_ms")


class MetricsWriter:
    def __init__(self, stream: IO[str]):
        self.stream = stream
        self._last_round = 0
        stream.write(",".join(FIELDS) + "\n")
        stream.flush()

    def emit(self, m: RoundMetrics) -> None:
        if m.round <= self._last_round:
            raise ValueError(f"round {m.round} does not follow round {self._last_round}")
        self._last_round = m.round
        emit_metrics(self.stream, m)


def emit_metrics(stream: IO[str], record: RoundMetrics) -> None:
    """Append one row to a stream that already has its header."""
    row = (str(record.round), record.codec, repr(float(record.train_loss)),
           repr(float(record.eval_accuracy)), str(int(record.uplink_bytes)), str(int(record.elapsed_ms)))
    stream.write(",".join(row) + "\n")
    stream.flush()


def write_metrics(path: str | Path, records: Iterable[RoundMetrics]) -> None:
    with open(path, "w", newline="") as f:
        writer = MetricsWriter(f)
        for m in records:
            writer.emit(m)


def read_metrics(path: str | Path) -> list[RoundMetrics]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != FIELDS:
            raise ValueError(f"{path}: expected header {','.join(FIELDS)}")
        out = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(FIELDS):
                raise ValueError(f"{path}:{line}: expected {len(FIELDS)} fields, got {len(row)}")
            out.append(RoundMetrics(int(row[0]), row[1], float(row[2]), float(row[3]),
                                    int(row[4]), int(row[5])))
    return out
