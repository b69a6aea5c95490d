"""Small deterministic CSV helpers shared by the solvers and the CLI.

All floating-point output uses ``repr`` (shortest round-trip form), so files
are byte-identical across runs given identical inputs.
"""

from __future__ import annotations

import csv
import math


def fmt(x) -> str:
    """Format one cell: shortest round-trip float, NaN as empty, int as-is."""
    if x is None:
        return ""
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    v = float(x)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def parse(cell: str):
    """Inverse of :func:`fmt` for float cells ('' -> NaN)."""
    if cell == "":
        return float("nan")
    return float(cell)


def write_rows(path, header, rows):
    """Write a CSV file with '\\n' line endings regardless of platform."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])


def read_rows(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]
