"""Run metrics computed from traces, so live and replayed runs agree exactly."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass
class MetricsLog:
    duration: float = 0.0
    coverage: float = 0.0            # operator-map fraction of explorable cells
    coverage_union: float = 0.0      # union of robot maps, same denominator
    return_events: int = 0
    last_update: float = 0.0         # time the operator map last grew
    efficiency: float = 0.0          # operator-known square meters per second
    max_latency: float = 0.0
    violations: int = 0
    completed: bool = False
    mh_series: list[tuple[float, int]] = field(default_factory=list)
    union_series: list[tuple[float, int]] = field(default_factory=list)
    chi_series: list[tuple[float, float]] = field(default_factory=list)
    return_times: list[float] = field(default_factory=list)


def compute_metrics(records: list[dict], header: dict) -> MetricsLog:
    """Fold a trace into the comparison metrics.

    Latency is reconstructed from delivery stamps: between deliveries every
    robot's data age grows linearly, so the maximum over a run is attained
    just before a delivery or at the end.
    """
    info = header.get("run", {})
    n = info.get("n_robots", 1)
    target = max(info.get("target_cells", 1), 1)
    area_per_cell = info.get("cell_area", 0.25)
    bound = info.get("latency_bound", float("inf"))

    stamps = [0.0] * n
    return_stamps = [0.0] * n
    dead: set[int] = set()
    mh_cells = 0
    union_cells = 0
    out = MetricsLog()
    last_t = 0.0
    bound_now = bound

    def age_peak(t: float) -> float:
        live = [t - stamps[k] for k in range(n) if k not in dead]
        return max(live) if live else 0.0

    for rec in records:
        t = rec["t"]
        if t > last_t:
            out.max_latency = max(out.max_latency, age_peak(t))
            last_t = t
        kind = rec["kind"]
        if kind == "sense":
            union_cells += rec["new_cells"]
            out.union_series.append((t, union_cells))
        elif kind in ("return", "operator_contact"):
            new = rec.get("new_cells", 0)
            if new:
                mh_cells += new
                out.last_update = t
                out.mh_series.append((t, mh_cells))
            for k, s in enumerate(rec.get("stamps", [])):
                stamps[k] = max(stamps[k], s)
            if kind == "return":
                out.return_events += 1
                out.return_times.append(t)
                for k, s in enumerate(rec.get("stamps", [])):
                    return_stamps[k] = max(return_stamps[k], s)
                chi = min(v for k, v in enumerate(return_stamps)
                          if k not in dead) if len(dead) < n else 0.0
                out.chi_series.append((t, chi))
                bound_now = rec.get("bound", bound_now)
        elif kind == "failure":
            dead.add(rec["robot"])
        elif kind == "violation":
            out.violations += 1
        elif kind == "end":
            out.duration = t
            out.completed = rec.get("reason") == "complete"
            out.max_latency = max(out.max_latency, age_peak(t))
            out.coverage = rec.get("coverage_cells", 0) / target
            out.coverage_union = rec.get("union_cells", 0) / target
    if out.duration > 0:
        out.efficiency = mh_cells * area_per_cell / out.duration
    return out


CSV_COLUMNS = ["scene", "method", "seed", "coverage_pct", "return_events",
               "last_update_s", "efficiency_m2s", "max_latency_s",
               "violations", "completed", "duration_s", "config_hash"]


def metrics_row(scene: str, method: str, seed: int, m: MetricsLog,
                config_hash: str) -> dict:
    return {
        "scene": scene,
        "method": method,
        "seed": seed,
        "coverage_pct": round(100.0 * m.coverage, 2),
        "return_events": m.return_events,
        "last_update_s": round(m.last_update, 3),
        "efficiency_m2s": round(m.efficiency, 4),
        "max_latency_s": round(m.max_latency, 3),
        "violations": m.violations,
        "completed": m.completed,
        "duration_s": round(m.duration, 1),
        "config_hash": config_hash,
    }


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
