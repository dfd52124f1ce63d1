"""Text formatting helpers: 17-significant-digit floats, CSV and JSON emission.

Floats are written with %.17g so that every IEEE-754 double round-trips
exactly through text.  CSV files use '.' as the decimal separator and LF
line endings on every platform.
"""
from __future__ import annotations

import io
from typing import Iterable, Sequence


def f17(x: float) -> str:
    return format(float(x), ".17g")


def cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f17(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], provenance: str | None = None) -> None:
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {provenance}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(cell(v) for v in row) + "\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def json_float_list(values) -> str:
    return "[" + ", ".join(f17(v) for v in values) + "]"


def json_float_matrix(rows) -> str:
    return "[" + ", ".join(json_float_list(r) for r in rows) + "]"
