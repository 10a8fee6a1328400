"""CSV and JSON plumbing for the command-line layer.

All readers validate shape and values before handing anything to the
numerical code, so a malformed file surfaces as a clear error (exit 3)
instead of a traceback. Writers and readers round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import sys
from contextlib import contextmanager

import numpy as np

from .errors import ArgumentError
from .simulator import SfsVector


class FileFormatError(ArgumentError):
    """An input file does not match its documented layout."""


@contextmanager
def open_out(path: str | None):
    """Writable handle for a path, or stdout when the path is None or '-'."""
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _read_rows(path: str, expected_header: list[str]) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise FileFormatError(f"{path}: empty file, expected header {expected_header}")
    header = [c.strip() for c in rows[0]]
    if header != expected_header:
        raise FileFormatError(
            f"{path}: expected header {','.join(expected_header)}, got {','.join(header)}"
        )
    return [r for r in rows[1:] if any(c.strip() for c in r)]


def _int_cell(path: str, row, idx: int, name: str) -> int:
    try:
        text = row[idx].strip()
    except IndexError:
        raise FileFormatError(f"{path}: row {row} lacks a {name} column") from None
    try:
        value = int(text)
    except ValueError:
        raise FileFormatError(f"{path}: {name} must be an integer, got {text!r}") from None
    return value


def read_sfs_csv(path: str, n: int | None = None, folded: bool = False):
    """Read one spectrum; returns (SfsVector | counts, n, folded).

    Unfolded files have header ``i,count`` and rows for i = 1..n-1 (missing
    rows count as zero); n defaults to the largest i plus one. Folded files
    use ``i,folded_count`` and need an explicit n. Duplicate i, negative or
    non-integer counts are rejected.
    """
    header = ["i", "folded_count" if folded else "count"]
    rows = _read_rows(path, header)
    seen: dict[int, int] = {}
    for row in rows:
        i = _int_cell(path, row, 0, "i")
        c = _int_cell(path, row, 1, header[1])
        if i < 1:
            raise FileFormatError(f"{path}: class index must be >= 1, got {i}")
        if c < 0:
            raise FileFormatError(f"{path}: counts must be >= 0, got {c}")
        if i in seen:
            raise FileFormatError(f"{path}: duplicate class index {i}")
        seen[i] = c
    if folded:
        if n is None:
            raise ArgumentError("folded spectra need an explicit sample size (--n)")
        length = n // 2
    else:
        if n is None:
            if not seen:
                raise ArgumentError("empty spectrum file needs an explicit sample size (--n)")
            n = max(seen) + 1
        length = n - 1
    if seen and max(seen) > length:
        raise FileFormatError(
            f"{path}: class index {max(seen)} exceeds the spectrum length {length}"
        )
    counts = np.zeros(length, dtype=np.int64)
    for i, c in seen.items():
        counts[i - 1] = c
    if folded:
        return counts, int(n), True
    return SfsVector(counts=counts), int(n), False


def write_sfs_csv(fh, values, header: list[str]) -> None:
    w = csv.writer(fh)
    w.writerow(header)
    for i, v in enumerate(values, start=1):
        w.writerow([i, v])


def read_locus_sfs_csv(path: str):
    """Read per-locus spectra; returns (list of SfsVector, n, locus count).

    Accepts ``locus,i,count`` rows or the simulator's ``rep,locus,i,count``
    output restricted to a single replicate. Loci are numbered from 0; gaps
    are rejected, missing class rows count as zero.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise FileFormatError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if header == ["locus", "i", "count"]:
        offset = 0
    elif header == ["rep", "locus", "i", "count"]:
        offset = 1
    else:
        raise FileFormatError(
            f"{path}: expected header locus,i,count or rep,locus,i,count, got {','.join(header)}"
        )
    cells: dict[tuple[int, int], int] = {}
    reps = set()
    for row in rows[1:]:
        if not any(c.strip() for c in row):
            continue
        if offset:
            reps.add(_int_cell(path, row, 0, "rep"))
            if len(reps) > 1:
                raise FileFormatError(f"{path}: holds several replicates; pass exactly one")
        l = _int_cell(path, row, offset, "locus")
        i = _int_cell(path, row, offset + 1, "i")
        c = _int_cell(path, row, offset + 2, "count")
        if l < 0 or i < 1 or c < 0:
            raise FileFormatError(f"{path}: bad row {row}")
        if (l, i) in cells:
            raise FileFormatError(f"{path}: duplicate (locus, class) = ({l}, {i})")
        cells[(l, i)] = c
    if not cells:
        raise FileFormatError(f"{path}: no data rows")
    loci = sorted({l for l, _ in cells})
    if loci != list(range(len(loci))):
        raise FileFormatError(f"{path}: locus numbers must be 0..L-1, got {loci}")
    n = max(i for _, i in cells) + 1
    out = []
    for l in range(len(loci)):
        counts = np.zeros(n - 1, dtype=np.int64)
        for (ll, i), c in cells.items():
            if ll == l:
                counts[i - 1] = c
        out.append(SfsVector(counts=counts))
    return out, n, len(loci)


def write_locus_sfs_rows(fh, write_header: bool) -> csv.writer:
    w = csv.writer(fh)
    if write_header:
        w.writerow(["rep", "locus", "i", "count"])
    return w


def read_summaries_csv(path: str) -> np.ndarray:
    """Read two-column summary points with header ``zeta1,zetabar_k``."""
    rows = _read_rows(path, ["zeta1", "zetabar_k"])
    if not rows:
        raise FileFormatError(f"{path}: no data rows")
    out = np.empty((len(rows), 2))
    for j, row in enumerate(rows):
        try:
            out[j] = [float(row[0]), float(row[1])]
        except (ValueError, IndexError):
            raise FileFormatError(f"{path}: bad row {row}") from None
    if not np.all(np.isfinite(out)):
        raise FileFormatError(f"{path}: summaries must be finite")
    return out


def dump_json(obj, path: str | None) -> None:
    with open_out(path) as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise FileFormatError(f"{path}: config must be a JSON object")
    return data


def jsonable(value):
    """Recursively convert numpy scalars/arrays for json.dump."""
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value
