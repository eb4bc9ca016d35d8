"""Report emission: every analysis writes one CSV and one JSON file with a
fixed column schema, and every row carries the manifest hash of the run
that produced it."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping

SCHEMAS = {
    "eval": ["manifest_hash", "task", "metric", "value"],
    "cross_matrix": ["manifest_hash", "encoder_task", "head_task", "accuracy"],
    "cross_merge": ["manifest_hash", "row_type", "encoder_task", "head_task",
                    "cross_accuracy", "merge_accuracy", "spearman_rho"],
    "transfer": ["manifest_hash", "heads", "merged_score", "cross_score"],
    "correlation": ["manifest_hash", "task", "proxy", "stage", "spearman_rho", "status"],
    "discrepancy": ["manifest_hash", "task", "fails", "gains", "net", "n"],
    "sparsity": ["manifest_hash", "scope", "threshold", "fraction"],
    "prop1": ["manifest_hash", "instance", "family", "loss", "ctl_residual_max",
              "ctl_residual_mean", "loss_pre", "loss_i", "loss_j", "loss_merge",
              "jensen_bound", "jensen_slack", "jensen_holds", "eps",
              "bound_disentangled", "bound_synergy", "classification"],
    "pilot": ["manifest_hash", "coeff", "encoder_task", "head_task", "gain"],
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(out_dir, analysis: str, rows: Iterable[Mapping], manifest_hash: str) -> list:
    """Write <analysis>.csv and <analysis>.json under out_dir; returns the paths."""
    columns = SCHEMAS[analysis]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [dict(r, manifest_hash=manifest_hash) for r in rows]
    for row in rows:
        missing = set(columns) - set(row)
        if missing:
            raise ValueError(f"report row for '{analysis}' missing fields {sorted(missing)}")

    csv_path = out_dir / f"{analysis}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])

    json_path = out_dir / f"{analysis}.json"
    doc = {"analysis": analysis, "columns": columns,
           "rows": [{c: row[c] for c in columns} for row in rows]}
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")
    return [csv_path, json_path]


def aggregate_reports(root) -> dict:
    """Collect all <analysis>.json files under root, grouped by analysis."""
    combined = {}
    for path in sorted(Path(root).rglob("*.json")):
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError):
            continue
        if not isinstance(doc, dict) or "analysis" not in doc or "rows" not in doc:
            continue
        name = doc["analysis"]
        if name not in SCHEMAS:
            continue
        combined.setdefault(name, []).extend(doc["rows"])
    return combined


def write_combined(out_dir, combined: Mapping[str, list]) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for analysis in sorted(combined):
        columns = SCHEMAS[analysis]
        csv_path = out_dir / f"combined_{analysis}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in combined[analysis]:
                writer.writerow([_fmt(row.get(c)) for c in columns])
        json_path = out_dir / f"combined_{analysis}.json"
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({"analysis": analysis, "columns": columns, "rows": combined[analysis]},
                      f, sort_keys=True, indent=2, ensure_ascii=False)
            f.write("\n")
        paths.extend([csv_path, json_path])
    return paths
