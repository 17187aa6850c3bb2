"""CSV/JSON export with stable column order and 9-significant-digit floats."""

from __future__ import annotations

import json
from pathlib import Path


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def write_csv(path, columns: list[str], rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise ValueError(f"write_csv: row missing columns {missing}")
        lines.append(",".join(format_value(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> tuple[list[str], list[dict]]:
    text = Path(path).read_text(encoding="utf-8").rstrip("\n")
    lines = text.split("\n") if text else []
    if not lines:
        return [], []
    columns = lines[0].split(",")
    rows = [dict(zip(columns, line.split(","))) for line in lines[1:]]
    return columns, rows


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_round_floats(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")
