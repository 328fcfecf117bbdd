"""
Scenario schema and loading.

A scenario is one YAML document validated into :class:`ScenarioConfig`. An
``include:`` list pulls in presets (by name) or other files (by relative
path); included documents are deep-merged in order and the including
document is merged last.

Usage:
    config = parse_scenario("vela-2023")
    config = parse_scenario("studies/month.yaml")
"""

from __future__ import annotations

from enum import StrEnum
from importlib import resources
from pathlib import Path
from typing import Any

import structlog
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError

from .core.exceptions import SchemaError, UnknownPreset
from .ext.collectives import BusbwSweepConfig
from .ext.faults import FaultsConfig
from .ext.monitoring import MonitoringConfig
from .ext.network import IncastConfig, NetworkConfig
from .ext.power import PowerConfig, PowerSurgeConfig
from .ext.resilience import CheckpointConfig, PoolConfig, StorageConfig, StorageKind
from .ext.scheduler import SchedulerConfig
from .ext.topology import NodeSpec, TopologyConfig
from .ext.workload import DAY, Duration, JobSpec, parse_duration

log = structlog.stdlib.get_logger("velasim.scenario")

PRESETS_PACKAGE = "velasim.presets"


class ExperimentKind(StrEnum):
    TRAINING = "training"
    BUSBW = "busbw"
    INCAST = "incast"
    STORAGE_STEPS = "storage_steps"
    POWER_SURGE = "power_surge"


class StorageStepsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backends: list[StorageKind] = [StorageKind.NFS_LIKE, StorageKind.SCALE_CACHE]
    steps: PositiveInt = 1000
    base_step: PositiveFloat = 5.0
    window: PositiveInt = 50
    tolerance: PositiveFloat = 0.03


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    description: str = ""
    experiment: ExperimentKind = ExperimentKind.TRAINING
    horizon: Duration = Field(default=DAY, gt=0.0)
    seed: int | None = Field(default=None, ge=0)

    topology: TopologyConfig = TopologyConfig()
    node: NodeSpec = NodeSpec()
    network: NetworkConfig = NetworkConfig()
    power: PowerConfig = PowerConfig()
    storage: StorageConfig = StorageConfig()
    checkpoint: CheckpointConfig = CheckpointConfig()
    pool: PoolConfig = PoolConfig()
    faults: FaultsConfig = FaultsConfig()
    monitoring: MonitoringConfig = MonitoringConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    jobs: list[JobSpec] = []

    busbw: BusbwSweepConfig = BusbwSweepConfig()
    incast: IncastConfig = IncastConfig()
    storage_steps: StorageStepsConfig = StorageStepsConfig()
    power_surge: PowerSurgeConfig = PowerSurgeConfig()

    def with_overrides(self, **updates: Any) -> ScenarioConfig:
        """Re-validate with top-level fields replaced (``horizon="2d"``, ``seed=3``)."""
        data = self.model_dump(mode="json")
        for key, value in updates.items():
            if value is not None:
                data[key] = parse_duration(value) if key == "horizon" else value
        return _validate(data, text=None, source="<overrides>")


# === Presets ===


def list_presets() -> list[str]:
    root = resources.files(PRESETS_PACKAGE)
    return sorted(p.name.removesuffix(".yaml") for p in root.iterdir() if p.name.endswith(".yaml"))


def _preset_text(name: str) -> str:
    resource = resources.files(PRESETS_PACKAGE) / f"{name}.yaml"
    if not resource.is_file():
        raise UnknownPreset(
            f"unknown preset {name!r}", details={"preset": name, "known": list_presets()}
        )
    return resource.read_text(encoding="utf-8")


# === Loading ===


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Merge mappings recursively; lists and scalars in ``override`` replace."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _load_yaml(text: str, source: str) -> dict[str, Any]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise SchemaError(
            f"{source}: not valid YAML" + (f" (line {line})" if line else ""),
            details={"source": source, "line": line},
        ) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SchemaError(f"{source}: top level must be a mapping", details={"source": source})
    return data


def _resolve(data: dict[str, Any], base_dir: Path | None, chain: tuple[str, ...]) -> dict[str, Any]:
    includes = data.pop("include", None) or []
    if isinstance(includes, str):
        includes = [includes]
    merged: dict[str, Any] = {}
    for item in includes:
        ref = str(item)
        if ref in chain:
            raise SchemaError(f"include cycle through {ref!r}", details={"chain": [*chain, ref]})
        if ref.endswith((".yaml", ".yml")) or "/" in ref:
            path = (base_dir or Path.cwd()) / ref
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as e:
                raise SchemaError(f"cannot read include {ref!r}", details={"include": ref}) from e
            child = _resolve(_load_yaml(text, str(path)), path.parent, (*chain, ref))
        else:
            child = _resolve(_load_yaml(_preset_text(ref), ref), None, (*chain, ref))
        merged = deep_merge(merged, child)
    return deep_merge(merged, data)


def _key_line(text: str, loc: tuple[int | str, ...]) -> int | None:
    """1-based line of the deepest key in ``loc`` that appears in ``text``."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(part)), None)
            if match is None:
                break
            key = next(k for k, v in node.value if v is match)
            line = key.start_mark.line + 1
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if part >= len(node.value):
                break
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line


def _validate(data: dict[str, Any], text: str | None, source: str) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first["loc"])
        key = ".".join(str(p) for p in loc)
        line = _key_line(text, loc) if text else None
        where = f" (line {line})" if line else ""
        raise SchemaError(
            f"{source}: {key}{where}: {first['msg']}",
            details={"key": key, "line": line, "errors": e.error_count()},
        ) from e


def parse_scenario(source: str | Path) -> ScenarioConfig:
    """
    Load a scenario from a YAML file or a preset name.

    Errors name the dotted key and, when the key is written in the file
    itself rather than in an include, its line number.
    """
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
        base_dir: Path | None = path.parent
        label = str(path)
    elif isinstance(source, str) and not source.endswith((".yaml", ".yml")) and "/" not in source:
        text = _preset_text(source)
        base_dir = None
        label = source
    else:
        raise SchemaError(f"cannot read scenario {str(source)!r}", details={"source": str(source)})
    data = _resolve(_load_yaml(text, label), base_dir, (label,))
    config = _validate(data, text, label)
    log.debug("scenario_parsed", scenario=config.name, source=label)
    return config
