"""Merge report cells into per-dataset tables (CSV + plain text).

Rows are generators, columns are (task, setting, strategy, mask, variant,
metric) combinations. In each column the best mean is marked ``**x**`` and
the second best ``_x_``; direction follows ``metrics.LOWER_IS_BETTER``.
Missing cells render as an em-dash placeholder. The output is a pure
function of the report files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..errors import DataError
from ..metrics import LOWER_IS_BETTER
from ..profiles.types import GENERATORS
from .runner import CELL_LABELS

MISSING = "—"
COLUMN_LABELS = CELL_LABELS[1:]  # dataset picks the table; generator picks the row


def load_reports(out_dir) -> list[dict]:
    root = Path(out_dir) / "reports"
    paths = sorted(root.rglob("*.json")) if root.exists() else []
    if not paths:
        raise DataError(f"no reports found under {root}")
    return [json.loads(p.read_text(encoding="utf-8")) for p in paths]


def _column(rec: dict) -> tuple[str, ...]:
    labels = rec["labels"]
    return tuple(labels.get(k, "") for k in COLUMN_LABELS if k != "generator") + (rec["metric"],)


def _column_title(col: tuple[str, ...]) -> str:
    return " ".join(part for part in col if part)


def _row_order(generator: str):
    return (GENERATORS.index(generator), "") if generator in GENERATORS else (len(GENERATORS), generator)


def rank_flags(values: dict[str, float | None], metric: str) -> dict[str, str]:
    """``best``/``second`` per row key; ties share the flag."""
    present = sorted({v for v in values.values() if v is not None}, reverse=metric not in LOWER_IS_BETTER)
    flags = {}
    for row, v in values.items():
        if v is None:
            continue
        if v == present[0]:
            flags[row] = "best"
        elif len(present) > 1 and v == present[1]:
            flags[row] = "second"
    return flags


def build_tables(records: list[dict]) -> dict[tuple[str, str], dict]:
    """(dataset, group) -> {"rows": [...], "columns": [...], "cells": {(row, col): rec}}."""
    tables: dict[tuple[str, str], dict] = {}
    for rec in records:
        ds = (rec["labels"]["dataset"], rec.get("group", ""))
        t = tables.setdefault(ds, {"rows": set(), "columns": set(), "cells": {}})
        row, col = rec["labels"]["generator"], _column(rec)
        t["rows"].add(row)
        t["columns"].add(col)
        t["cells"][(row, col)] = rec
    for t in tables.values():
        t["rows"] = sorted(t["rows"], key=_row_order)
        t["columns"] = sorted(t["columns"])
    return tables


def _fmt_cell(rec: dict | None, flag: str | None) -> str:
    if rec is None or rec.get("mean") is None:
        return MISSING
    text = f"{rec['mean']:.4f}"
    if flag == "best":
        return f"**{text}**"
    if flag == "second":
        return f"_{text}_"
    return text


def render(records: list[dict]) -> tuple[str, str]:
    """Return (plain text, CSV) renderings."""
    tables = build_tables(records)
    text_parts = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "group", "generator", *COLUMN_LABELS[1:], "metric", "mean", "std", "n_runs", "flag",
                     "attempted", "scored", "skipped", "errors"])
    for ds, group in sorted(tables):
        t = tables[(ds, group)]
        flags = {
            col: rank_flags({row: (t["cells"].get((row, col)) or {}).get("mean") for row in t["rows"]}, col[-1])
            for col in t["columns"]
        }
        header = ["generator"] + [_column_title(c) for c in t["columns"]]
        body = [
            [row] + [_fmt_cell(t["cells"].get((row, col)), flags[col].get(row)) for col in t["columns"]]
            for row in t["rows"]
        ]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = [f"dataset: {ds} | {group}", ""]
        lines.append("| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |")
        lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
        for r in body:
            lines.append("| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |")
        text_parts.append("\n".join(lines))

        for row in t["rows"]:
            for col in t["columns"]:
                rec = t["cells"].get((row, col))
                acc = (rec or {}).get("accounting", {})
                mean = (rec or {}).get("mean")
                writer.writerow(
                    [ds, group, row, *col[:-1], col[-1],
                     MISSING if mean is None else repr(mean),
                     MISSING if mean is None else repr(rec["std"]),
                     (rec or {}).get("n_runs", 0),
                     flags[col].get(row, ""),
                     acc.get("attempted", ""), acc.get("scored", ""), acc.get("skipped", ""), acc.get("errors", "")]
                )
    legend = "**x** best, _x_ second best per column; " + MISSING + " no result"
    jsd_modes = sorted({r["jsd_mode"] for r in records if r.get("jsd_mode")})
    if jsd_modes:
        legend += "; macro JSD mode: " + ", ".join(jsd_modes)
    return "\n\n".join(text_parts) + "\n\n" + legend + "\n", buf.getvalue()


def write_report(out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    text, table = render(load_reports(out_dir))
    summary = out_dir / "summary"
    summary.mkdir(parents=True, exist_ok=True)
    txt, csv_path = summary / "report.txt", summary / "report.csv"
    txt.write_text(text, encoding="utf-8")
    csv_path.write_text(table, encoding="utf-8")
    return txt, csv_path
