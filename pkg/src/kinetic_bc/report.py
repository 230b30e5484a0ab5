"""Report bundles and their deterministic serialisation.

Floats are written with 17 significant digits (``format(x, ".17g")``),
which round-trips every IEEE double exactly; non-finite values become the
strings ``"nan"``, ``"inf"`` and ``"-inf"`` so the JSON stays standard.
Field order is the insertion order of the producing code, and nothing
time- or host-dependent is recorded, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import KineticError

FORMATS = ("json", "csv", "text")


class IoError(KineticError, OSError):
    pass


@dataclass
class ReportBundle:
    """Results of one subcommand.

    ``rows`` are flat records (one per sample, time or ``k``), ``summary``
    holds scalar results, ``checks`` lists named pass/fail invariants and
    ``provenance`` carries the config hash, seed and code version.
    """

    command: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add_check(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append({"name": name, "passed": bool(passed), "detail": detail})

    @property
    def failed_checks(self) -> list:
        return [c for c in self.checks if not c["passed"]]

    def as_dict(self) -> dict:
        return {"command": self.command, "provenance": self.provenance, "summary": self.summary,
                "checks": self.checks, "rows": self.rows}


def format_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def _plain(obj: Any) -> Any:
    """numpy scalars/arrays, tuples and enums -> plain Python containers."""
    if isinstance(obj, np.ndarray):
        return [_plain(x) for x in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


def _encode(obj: Any, out: list, indent: int, level: int) -> None:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            out.append(("," if i else "") + pad + json.dumps(str(k)) + ": ")
            _encode(v, out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, list):
        # short lists of scalars stay on one line
        if all(not isinstance(x, (list, dict)) for x in obj):
            out.append("[")
            for i, x in enumerate(obj):
                out.append(", " if i else "")
                _encode(x, out, indent, level + 1)
            out.append("]")
            return
        out.append("[")
        for i, x in enumerate(obj):
            out.append(("," if i else "") + pad)
            _encode(x, out, indent, level + 1)
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def to_json(bundle: ReportBundle, indent: int = 2) -> str:
    out: list = []
    _encode(_plain(bundle.as_dict()), out, indent, 0)
    return "".join(out) + "\n"


def _cell(x: Any) -> str:
    x = _plain(x)
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, float):
        return format_float(x).strip('"')
    if isinstance(x, (list, dict)):
        buf: list = []
        _encode(x, buf, 0, 0)
        return "".join(buf).replace("\n", "")
    return str(x)


def csv_columns(rows: list) -> list:
    """Header: keys in first-seen order across all rows."""
    cols: list = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def to_csv(bundle: ReportBundle) -> str:
    buf = io.StringIO()
    cols = csv_columns(bundle.rows)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in bundle.rows:
        writer.writerow([_cell(r.get(c, "")) if c in r else "" for c in cols])
    return buf.getvalue()


def to_text(bundle: ReportBundle) -> str:
    lines = [f"{bundle.command}", "=" * len(bundle.command)]
    for k, v in bundle.provenance.items():
        lines.append(f"{k:>14}: {_cell(v)}")
    lines.append("")
    for k, v in _plain(bundle.summary).items():
        lines.append(f"{k:>22}: {_cell(v)}")
    if bundle.checks:
        lines.append("")
        for c in bundle.checks:
            lines.append(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}" + (f" -- {c['detail']}" if c["detail"] else ""))
    if bundle.rows:
        cols = csv_columns(bundle.rows)
        table = [[str(c) for c in cols]] + [[_cell(r.get(c, "")) for c in cols] for r in bundle.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
        lines.append("")
        for row in table:
            lines.append("  ".join(s.rjust(w) for s, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


RENDERERS = {"json": to_json, "csv": to_csv, "text": to_text}
SUFFIX = {"json": "json", "csv": "csv", "text": "txt"}


def render(bundle: ReportBundle, fmt: str) -> str:
    if fmt not in RENDERERS:
        raise ValueError(f"format must be one of {FORMATS}")
    return RENDERERS[fmt](bundle)


def emit_report(bundle: ReportBundle, fmt: str = "json", out_dir: Optional[str | Path] = None) -> Optional[Path]:
    """Write ``<out_dir>/<command>.<ext>``; with no ``out_dir`` nothing is written and ``None`` is returned."""
    text = render(bundle, fmt)
    if out_dir is None:
        return None
    path = Path(out_dir) / f"{bundle.command}.{SUFFIX[fmt]}"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc
    return path
