"""
Running scenarios and sweeps, and rendering their artifacts.

A run writes one directory::

    <output>/<scenario>-s<seed>/
        config.yaml      validated scenario echo
        summary.json     seed, summary sections, verdicts, artifact list
        events.log       one line per dispatched event (when enabled)
        <table>.csv      one file per report table, header row first
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import structlog
import yaml

from .core.application import Simulation, build_simulation
from .core.exceptions import MissingArtifacts, ScenarioError
from .core.logging import run_context
from .core.settings import Settings
from .ext.collectives import protocol_table, run_busbw_sweep
from .ext.network import Network, simulate_incast
from .ext.power import run_surge_sweep
from .ext.resilience import make_backend, simulate_step_series, steady_state_index
from .scenario import ExperimentKind, ScenarioConfig

log = structlog.stdlib.get_logger("velasim.runner")

SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.yaml"
EVENTS_FILE = "events.log"

# Tables render_report prints, in order, when the run produced them.
PLOT_TABLES = (
    "lost_time",
    "busbw_by_protocol",
    "storage_stats",
    "incast",
    "jobs",
    "queue",
    "power_trace",
)

type Table = list[dict[str, Any]]


@dataclass
class RunReport:
    run_id: str
    scenario: str
    seed: int
    summary: dict[str, Any]
    verdicts: dict[str, bool]
    tables: dict[str, Table] = field(default_factory=dict)
    output_dir: Path | None = None
    event_log: list[str] = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return all(self.verdicts.values())

    @property
    def artifacts(self) -> list[str]:
        names = [CONFIG_FILE, SUMMARY_FILE, *(f"{name}.csv" for name in sorted(self.tables))]
        if self.event_log:
            names.append(EVENTS_FILE)
        return names

    def as_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "scenario": self.scenario,
            "seed": self.seed,
            "summary": self.summary,
            "verdicts": self.verdicts,
            "safe": self.safe,
            "artifacts": self.artifacts,
        }


# === Experiments ===


def _training(sim: Simulation) -> tuple[dict[str, Any], dict[str, Table], dict[str, bool]]:
    sim.run()
    summary = sim.summaries()
    tables = sim.reports()
    verdicts = {
        "invariants": sim.check_invariants().ok,
        "power_safe": bool(summary.get("power", {}).get("safe", True)),
    }
    return summary, tables, verdicts


def _busbw(sim: Simulation) -> tuple[dict[str, Any], dict[str, Table], dict[str, bool]]:
    config = sim.scenario.busbw
    rows = run_busbw_sweep(sim.get(Network), config)
    by_protocol = protocol_table(rows, gpus=config.gpu_counts[0])
    peaks: dict[str, float] = {}
    for row in rows:
        peaks[row.protocol] = max(peaks.get(row.protocol, 0.0), row.busbw)
    summary: dict[str, Any] = {"busbw": {"points": len(rows), "peak_busbw": peaks}}
    if len(config.gpu_counts) > 1:
        largest = max(config.sizes)
        curve = [r.busbw for r in rows if r.size == largest]
        summary["busbw"]["variation_at_largest"] = (max(curve) - min(curve)) / max(curve)
    tables = {"busbw": [r.as_dict() for r in rows], "busbw_by_protocol": by_protocol}
    return summary, tables, {}


def _incast(sim: Simulation) -> tuple[dict[str, Any], dict[str, Table], dict[str, bool]]:
    scenario = sim.scenario
    port = scenario.topology.tor
    variants = [("controlled", True), ("uncontrolled", False)]
    if not scenario.incast.congestion_control:
        variants = variants[1:]
    rows: Table = []
    series: Table = []
    out: dict[str, Any] = {}
    for label, enabled in variants:
        incast = scenario.incast.model_copy(update={"congestion_control": enabled})
        result = simulate_incast(
            incast,
            scenario.network,
            sim.stream(f"incast/{label}"),
            port_bw_gbps=port.port_bw,
            buffer_per_port=port.buffer_per_port,
        )
        row = {
            "variant": label,
            "drops": result.drops,
            "marks": result.marks,
            "cnps": result.cnps,
            "max_queue": result.max_queue,
            "delivered_bytes": result.delivered_bytes,
        }
        rows.append(row)
        out[label] = {k: v for k, v in row.items() if k != "variant"}
        series.extend(
            {"variant": label, "time": t, "queue": q, "offered_gbytes_s": r}
            for (t, q), (_, r) in zip(result.queue_series, result.rate_series, strict=True)
        )
    return {"incast": out}, {"incast": rows, "incast_series": series}, {}


def _storage_steps(sim: Simulation) -> tuple[dict[str, Any], dict[str, Table], dict[str, bool]]:
    scenario = sim.scenario
    config = scenario.storage_steps
    steps: Table = []
    stats: Table = []
    means: dict[str, float] = {}
    for kind in config.backends:
        backend = make_backend(scenario.storage.model_copy(update={"backend": kind}))
        series = simulate_step_series(
            backend, config.base_step, config.steps, sim.stream(f"storage/{kind}")
        )
        steady = steady_state_index(series, config.window, config.tolerance)
        tail = series[steady:]
        median = float(np.median(tail))
        means[str(kind)] = float(tail.mean())
        stats.append(
            {
                "backend": str(kind),
                "steady_state_step": steady,
                "mean": float(tail.mean()),
                "min": float(tail.min()),
                "max": float(tail.max()),
                "spread": float((tail.max() - tail.min()) / median),
            }
        )
        steps.extend(
            {"backend": str(kind), "step": i, "step_time": float(v)} for i, v in enumerate(series)
        )
    summary: dict[str, Any] = {"storage_steps": {row["backend"]: row for row in stats}}
    if len(means) == 2:
        slow, fast = sorted(means.values(), reverse=True)
        summary["storage_steps"]["speedup"] = slow / fast - 1.0
    return summary, {"storage_stats": stats, "storage_step_times": steps}, {}


def _power_surge(sim: Simulation) -> tuple[dict[str, Any], dict[str, Table], dict[str, bool]]:
    scenario = sim.scenario
    result = run_surge_sweep(scenario.power_surge, scenario.power, sim.stream("power_surge"))
    row = {
        "samples": result.samples,
        "failures": result.failures,
        "longest_overload": result.longest_overload,
        "post_brake_kw": result.post_brake_kw,
        "pdu_rating": scenario.power.pdu_rating,
    }
    verdicts = {
        "surge_within_tolerance": result.passed,
        "post_brake_within_rating": result.post_brake_kw <= scenario.power.pdu_rating,
    }
    return {"power_surge": row}, {"power_surge": [row]}, verdicts


_EXPERIMENTS = {
    ExperimentKind.TRAINING: _training,
    ExperimentKind.BUSBW: _busbw,
    ExperimentKind.INCAST: _incast,
    ExperimentKind.STORAGE_STEPS: _storage_steps,
    ExperimentKind.POWER_SURGE: _power_surge,
}


# === Runs ===


def run_scenario(
    config: ScenarioConfig,
    seed: int | None = None,
    *,
    output_dir: Path | str | None = None,
    settings: Settings | None = None,
) -> RunReport:
    """
    Execute one scenario and, when ``output_dir`` is given, write its
    artifacts under ``output_dir/<scenario>-s<seed>``.
    """
    settings = settings or Settings()
    if seed is None:
        seed = config.seed if config.seed is not None else settings.default_seed
    run_id = f"{config.name}-s{seed}"
    with (
        run_context(run_id=run_id),
        build_simulation(config, seed, settings=settings) as sim,
    ):
        log.info("run_started", experiment=str(config.experiment), horizon=config.horizon)
        summary, tables, verdicts = _EXPERIMENTS[config.experiment](sim)
        report = RunReport(
            run_id=run_id,
            scenario=config.name,
            seed=seed,
            summary=summary,
            verdicts=verdicts,
            tables=tables,
            event_log=list(sim.engine.event_log) if settings.event_log else [],
        )
        log.info("run_finished", events=sim.engine.dispatched, safe=report.safe)
    if output_dir is not None:
        write_artifacts(report, config, Path(output_dir) / run_id)
    return report


def _csv(rows: Table) -> str:
    buffer = io.StringIO()
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def write_artifacts(report: RunReport, config: ScenarioConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(
        yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False), encoding="utf-8"
    )
    (run_dir / SUMMARY_FILE).write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )
    for name, rows in report.tables.items():
        (run_dir / f"{name}.csv").write_text(_csv(rows), encoding="utf-8")
    if report.event_log:
        (run_dir / EVENTS_FILE).write_text("\n".join(report.event_log) + "\n", encoding="utf-8")
    report.output_dir = run_dir
    log.info("artifacts_written", path=str(run_dir), files=len(report.artifacts))
    return run_dir


# === Sweeps ===


def _set_path(data: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def _numeric(section: Mapping[str, Any], prefix: str = "") -> dict[str, float]:
    out: dict[str, float] = {}
    for key, value in section.items():
        name = f"{prefix}{key}"
        if isinstance(value, bool):
            out[name] = float(value)
        elif isinstance(value, int | float):
            out[name] = float(value)
        elif isinstance(value, Mapping):
            out.update(_numeric(value, f"{name}."))
    return out


def _sweep_point(payload: tuple[dict[str, Any], int]) -> dict[str, float]:
    data, seed = payload
    config = ScenarioConfig.model_validate(data)
    report = run_scenario(config, seed, settings=Settings(event_log=False))
    return _numeric(report.summary)


def sweep(
    config: ScenarioConfig,
    grid: Mapping[str, Sequence[Any]],
    seeds: Sequence[int],
    *,
    workers: int = 1,
    metrics: Sequence[str] | None = None,
    output_dir: Path | str | None = None,
) -> Table:
    """
    Run every grid point for every seed and aggregate each numeric summary
    metric into median, min and max per point.

    ``grid`` maps dotted scenario keys (``checkpoint.interval``) to values.
    """
    if not grid or any(len(values) == 0 for values in grid.values()) or not seeds:
        raise ScenarioError(
            "sweep needs a non-empty grid and at least one seed",
            details={"grid": {k: list(v) for k, v in grid.items()}, "seeds": list(seeds)},
        )
    keys = list(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    base = config.model_dump(mode="json")
    payloads = []
    for point in points:
        data = json.loads(json.dumps(base))
        for key, value in zip(keys, point, strict=True):
            _set_path(data, key, value)
        ScenarioConfig.model_validate(data)
        payloads.extend((data, seed) for seed in seeds)

    log.info("sweep_started", points=len(points), seeds=len(seeds), workers=workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]

    rows: Table = []
    for index, point in enumerate(points):
        runs = results[index * len(seeds) : (index + 1) * len(seeds)]
        names = metrics or sorted({name for run in runs for name in run})
        for name in names:
            values = np.array([run[name] for run in runs if name in run], dtype=float)
            if values.size == 0:
                continue
            rows.append(
                {
                    **dict(zip(keys, point, strict=True)),
                    "metric": name,
                    "median": float(np.median(values)),
                    "min": float(values.min()),
                    "max": float(values.max()),
                    "runs": int(values.size),
                }
            )
    if output_dir is not None:
        path = Path(output_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "sweep.csv").write_text(_csv(rows), encoding="utf-8")
    log.info("sweep_finished", rows=len(rows))
    return rows


# === Rendering ===


def _read_csv(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


def render_report(run_dir: Path | str, max_rows: int = 50) -> str:
    """
    A text summary followed by tab-delimited tables ready for plotting.
    """
    run_dir = Path(run_dir)
    summary_path = run_dir / SUMMARY_FILE
    if not summary_path.is_file():
        raise MissingArtifacts(
            f"{run_dir} has no {SUMMARY_FILE}", details={"missing": SUMMARY_FILE}
        )
    try:
        report = json.loads(summary_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MissingArtifacts(
            f"{summary_path} is not readable", details={"missing": SUMMARY_FILE}
        ) from e
    for name in report.get("artifacts", []):
        if not (run_dir / name).is_file():
            raise MissingArtifacts(f"{run_dir} is missing {name}", details={"missing": name})

    lines = [f"run {report['run_id']} (scenario {report['scenario']}, seed {report['seed']})"]
    verdicts = report.get("verdicts", {})
    if verdicts:
        marks = (f"{k}={'pass' if v else 'FAIL'}" for k, v in verdicts.items())
        lines.append("verdicts: " + ", ".join(marks))
    for section, values in report.get("summary", {}).items():
        flat = _numeric(values) if isinstance(values, Mapping) else {}
        if flat:
            lines.append(f"[{section}]")
            lines.extend(f"  {k}: {v:.6g}" for k, v in flat.items())
    for name in PLOT_TABLES:
        path = run_dir / f"{name}.csv"
        if not path.is_file():
            continue
        rows = _read_csv(path)
        lines.append("")
        lines.append(f"# {name}")
        lines.extend("\t".join(row) for row in rows[: max_rows + 1])
        if len(rows) > max_rows + 1:
            lines.append(f"# ... {len(rows) - max_rows - 1} more rows in {path.name}")
    return "\n".join(lines) + "\n"
