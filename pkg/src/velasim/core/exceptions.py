"""
Simulator errors with stable codes and CLI exit codes.
"""

from __future__ import annotations

from typing import Any

import structlog
from pydantic import BaseModel

log = structlog.get_logger()


class ErrorDetails(BaseModel):
    exit_code: int
    code: str
    message: str
    run_id: str | None = None
    details: Any = None


class ErrorReport(BaseModel):
    error: ErrorDetails


class SimError(Exception):
    """
    Base exception for simulator errors.

    Subclass this for subsystem-specific errors.
    """

    exit_code: int = 4
    error_code: str = "runtime_error"
    message: str = "Simulation failed"

    def __init__(
        self,
        message: str | None = None,
        *,
        error_code: str | None = None,
        exit_code: int | None = None,
        details: dict[str, Any] | None = None,
    ) -> None:
        self.message = message or self.message
        self.error_code = error_code or self.error_code
        self.exit_code = exit_code or self.exit_code
        self.details = details or {}
        super().__init__(self.message)

    def to_report(self, run_id: str | None = None) -> ErrorReport:
        error_detail = ErrorDetails(
            exit_code=self.exit_code,
            code=self.error_code,
            message=self.message,
            run_id=run_id,
            details=self.details,
        )
        return ErrorReport(error=error_detail)


# === Scenario errors (exit 2) ===


class ScenarioError(SimError):
    exit_code = 2
    error_code = "scenario_error"
    message = "Invalid scenario"


class SchemaError(ScenarioError):
    error_code = "schema_error"
    message = "Scenario does not match the schema"


class UnknownPreset(ScenarioError):
    error_code = "unknown_preset"
    message = "Unknown preset"


class InvalidSpec(ScenarioError):
    error_code = "invalid_spec"
    message = "Invalid job specification"


# === Safety verdicts (exit 3) ===


class SafetyViolation(SimError):
    exit_code = 3
    error_code = "safety_violation"
    message = "A safety verdict failed"


# === Engine ===


class SchedulingInPast(SimError):
    error_code = "scheduling_in_past"
    message = "Event time is earlier than the simulation clock"


class InvalidDistribution(SimError):
    error_code = "invalid_distribution"
    message = "Invalid distribution parameters"


# === Topology and network ===


class InfeasibleRadix(SimError):
    error_code = "infeasible_radix"
    message = "Switch ports are insufficient for the requested topology"


class UnknownComponent(SimError):
    error_code = "unknown_component"
    message = "Component does not exist"


class NoPath(SimError):
    error_code = "no_path"
    message = "Endpoints are not connected"


class TPExceedsNode(SimError):
    error_code = "tp_exceeds_node"
    message = "Tensor-parallel degree exceeds GPUs per node"


# === Workload, scheduling and resilience ===


class InsufficientNodes(SimError):
    error_code = "insufficient_nodes"
    message = "Not enough healthy nodes"


class JobCrashed(SimError):
    error_code = "job_crashed"
    message = "Job has a participant node that is down"


class InvalidPhase(SimError):
    error_code = "invalid_phase"
    message = "Operation not allowed in the job's current phase"


class NonPositiveInput(SimError):
    error_code = "non_positive_input"
    message = "Input must be strictly positive"


class CacheFull(SimError):
    error_code = "cache_full"
    message = "Cache cannot hold the object"


class PoolExhausted(SimError):
    error_code = "pool_exhausted"
    message = "Buffer pool has no available nodes"


class DoubleFailure(SimError):
    error_code = "double_failure"
    message = "Both power feeds of the rack have failed"


class NodeBusy(SimError):
    error_code = "node_busy"
    message = "Intrusive check requested on a node running a job"


class MissingArtifacts(SimError):
    error_code = "missing_artifacts"
    message = "Run directory is missing artifacts"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, SimError):
        if exc.exit_code >= 3:
            log.warning("simulation_error", error_code=exc.error_code, message=exc.message)
        else:
            log.warning("scenario_error", error_code=exc.error_code, message=exc.message)
        return exc.exit_code
    log.exception("unexpected_error")
    return 4
