"""Plain-text tables and JSONL records for the command-line reports."""

from __future__ import annotations

import json
from pathlib import Path


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(headers, rows, title: str | None = None) -> str:
    """Column-aligned text table. Floats render with four decimals."""
    grid = [[_cell(h) for h in headers]] + [[_cell(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in grid) for i in range(len(headers))]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(w) for h, w in zip(grid[0], widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in grid[1:]:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def fold_table(per_fold: dict, title: str = "mIoU by fold") -> str:
    """One row of per-fold scores plus their mean."""
    folds = sorted(per_fold)
    headers = ["metric"] + [f"fold{f}" for f in folds] + ["mean"]
    scores = [per_fold[f] for f in folds]
    mean = sum(scores) / len(scores) if scores else 0.0
    return format_table(headers, [["mIoU"] + scores + [mean]], title=title)


def write_jsonl(path: Path | str, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, default=str) + "\n")
    return path


def read_jsonl(path: Path | str) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
