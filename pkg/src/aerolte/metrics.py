"""Metrics report: a JSON summary, CSV time series, the core trace and the final plan."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOAT_DIGITS = 6

SERIES_COLUMNS = {
    "lambda": ("t_s", "label", "lambda", "total_routed_bps", "active_links", "relays", "suspended_demands"),
    "demands": ("t_s", "label", "src", "dst", "demand_bps", "routed_bps", "satisfied"),
    "ue": ("t_s", "ue", "serving_uav", "snr_db", "rate_bps", "x", "y"),
    "energy": ("t_s", "uav", "energy_j"),
    "uav": ("t_s", "uav", "role", "x", "y", "z"),
}


def clean(obj):
    """Plain JSON-ready values with floats rounded, so output bytes are stable."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        v = round(v, FLOAT_DIGITS)
        return 0.0 if v == 0 else v
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    return obj


@dataclass
class MetricsReport:
    summary: dict
    series: dict[str, list[tuple]] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)
    plan: dict = field(default_factory=dict)

    def check(self) -> list[str]:
        """Conservation and sign invariants every report must satisfy."""
        errors = []
        pk = self.summary["packets"]
        if pk["sent"] != pk["delivered"] + sum(pk["dropped"].values()):
            errors.append(f"packets: sent {pk['sent']} != delivered + dropped")

        def walk(obj, path):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    walk(v, f"{path}.{k}")
            elif isinstance(obj, bool):
                return
            elif isinstance(obj, int) and obj < 0:
                errors.append(f"{path} is negative")

        walk(self.summary.get("core", {}), "core")
        walk(self.summary.get("packets", {}), "packets")
        for row in self.series.get("energy", []):
            if row[2] < 0:
                errors.append(f"energy of UAV {row[1]} negative at t={row[0]}")
        return errors


def _cell(v) -> str:
    v = clean(v)
    if v is None:
        return ""
    return str(v)


def write_metrics(report: MetricsReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out / "summary.json", "plan": out / "plan.json", "trace": out / "trace.jsonl"}
    paths["summary"].write_text(json.dumps(clean(report.summary), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    paths["plan"].write_text(json.dumps(clean(report.plan), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with open(paths["trace"], "w", encoding="utf-8") as fh:
        for rec in report.trace:
            fh.write(json.dumps(clean(rec), sort_keys=True) + "\n")
    for name, columns in SERIES_COLUMNS.items():
        path = out / f"series_{name}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in report.series.get(name, []):
                w.writerow([_cell(v) for v in row])
        paths[f"series_{name}"] = path
    return paths
