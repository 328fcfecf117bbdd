"""Command line for running velasim scenarios."""

from __future__ import annotations

import json
import sys
from collections.abc import Callable
from functools import wraps
from pathlib import Path
from typing import Any

import click
import yaml

from .core.exceptions import SafetyViolation, exit_code_for
from .core.logging import configure_structlog
from .core.settings import Settings
from .ext.topology import build_topology, topology_to_yaml, validate_topology
from .runner import render_report, run_scenario, sweep
from .scenario import list_presets, parse_scenario


def _exits(fn: Callable[..., None]) -> Callable[..., None]:
    """Map simulator errors to the stable exit codes."""

    @wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except Exception as e:
            code = exit_code_for(e)
            message = getattr(e, "message", str(e))
            click.echo(f"error: {message}", err=True)
            sys.exit(code)

    return wrapper


def _seeds(value: str) -> list[int]:
    if ".." in value:
        low, high = value.split("..", 1)
        return list(range(int(low), int(high) + 1))
    return [int(s) for s in value.split(",") if s.strip()]


@click.group()
@click.option("--log-level", default=None, help="Override VELASIM_LOG_LEVEL")
@click.option("--log-json/--no-log-json", default=None, help="Emit JSON log lines")
@click.pass_context
def cli(ctx: click.Context, log_level: str | None, log_json: bool | None) -> None:
    """Deterministic simulator of GPU training clusters."""
    overrides: dict[str, Any] = {}
    if log_level is not None:
        overrides["log_level"] = log_level
    if log_json is not None:
        overrides["log_json"] = log_json
    settings = Settings(**overrides)
    configure_structlog(settings)
    ctx.ensure_object(dict)
    ctx.obj["settings"] = settings


@cli.command()
@click.argument("scenario", required=False)
@click.option("--summary", is_flag=True, help="Only print counts and validation findings")
@_exits
def describe(scenario: str | None, summary: bool) -> None:
    """Print the topology of SCENARIO (a file or preset) as YAML, or list presets."""
    if scenario is None:
        for name in list_presets():
            click.echo(name)
        return
    config = parse_scenario(scenario)
    topo = build_topology(config.topology, config.node)
    if summary:
        report = validate_topology(topo)
        out = {
            "kind": topo.kind,
            "hosts": len(topo.hosts),
            "racks": len(topo.racks),
            "switches": len(topo.switches),
            "links": len(topo.links),
            "valid": report.ok,
            "findings": [f.message for f in report.findings],
        }
        click.echo(yaml.safe_dump(out, sort_keys=False), nl=False)
        return
    click.echo(topology_to_yaml(topo), nl=False)


@cli.command()
@click.argument("scenario")
@click.option("--seed", type=int, default=None, help="Overrides the scenario seed")
@click.option("--output", "-o", type=click.Path(path_type=Path), default=None, help="Run root")
@click.option("--horizon", default=None, help="Horizon override, e.g. 12h or 30d")
@click.pass_context
@_exits
def run(
    ctx: click.Context, scenario: str, seed: int | None, output: Path | None, horizon: str | None
) -> None:
    """Run SCENARIO and write its artifacts."""
    settings: Settings = ctx.obj["settings"]
    config = parse_scenario(scenario)
    if horizon is not None:
        config = config.with_overrides(horizon=horizon)
    root = output or settings.output_root
    report = run_scenario(config, seed, output_dir=root, settings=settings)
    click.echo(json.dumps(report.as_dict(), indent=2, sort_keys=True, default=str))
    if not report.safe:
        failed = [k for k, v in report.verdicts.items() if not v]
        raise SafetyViolation(f"safety verdicts failed: {failed}", details={"failed": failed})


@cli.command(name="sweep")
@click.argument("scenario")
@click.option(
    "--param", "-p", "params", multiple=True, required=True,
    help="KEY=V1,V2,... over a dotted scenario key; repeat for a grid",
)
@click.option("--seeds", default="0", help="Comma list or inclusive range such as 0..19")
@click.option("--workers", type=int, default=None, help="Concurrent runs")
@click.option("--metric", "metrics", multiple=True, help="Limit the table to these metrics")
@click.option("--output", "-o", type=click.Path(path_type=Path), default=None)
@click.option("--horizon", default=None)
@click.pass_context
@_exits
def sweep_cmd(
    ctx: click.Context,
    scenario: str,
    params: tuple[str, ...],
    seeds: str,
    workers: int | None,
    metrics: tuple[str, ...],
    output: Path | None,
    horizon: str | None,
) -> None:
    """Run SCENARIO over a parameter grid and print aggregated metrics."""
    settings: Settings = ctx.obj["settings"]
    config = parse_scenario(scenario)
    if horizon is not None:
        config = config.with_overrides(horizon=horizon)
    grid: dict[str, list[Any]] = {}
    for param in params:
        key, _, values = param.partition("=")
        if not key or not values:
            raise click.BadParameter(f"expected KEY=V1,V2, got {param!r}", param_hint="--param")
        grid[key] = [yaml.safe_load(v) for v in values.split(",")]
    rows = sweep(
        config,
        grid,
        _seeds(seeds),
        workers=workers or settings.workers,
        metrics=list(metrics) or None,
        output_dir=(output or settings.output_root) / f"{config.name}-sweep",
    )
    if rows:
        columns = list(rows[0])
        click.echo("\t".join(columns))
        for row in rows:
            click.echo("\t".join(str(row[c]) for c in columns))


@cli.command()
@click.argument("run_dir", type=click.Path(path_type=Path))
@_exits
def render(run_dir: Path) -> None:
    """Print a run's summary and plot-ready tables."""
    click.echo(render_report(run_dir), nl=False)


main = cli


if __name__ == "__main__":
    main()
