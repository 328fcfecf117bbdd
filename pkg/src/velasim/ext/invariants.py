"""
Run-wide invariant checks.

Every subsystem registers its service with an svcs ping that asserts the
subsystem's invariants. This module runs those pings and reports which
held at the current simulated time.
"""

from __future__ import annotations

from enum import StrEnum
from typing import TYPE_CHECKING, Any

import structlog
import svcs
from pydantic import BaseModel

from ..core.extensions import BaseExtension

if TYPE_CHECKING:
    from ..core.application import Simulation

log = structlog.stdlib.get_logger("velasim.invariants")


class InvariantStatus(StrEnum):
    OK = "ok"
    VIOLATED = "violated"


class InvariantCheck(BaseModel):
    service: str
    status: InvariantStatus
    message: str | None = None

    @property
    def label(self) -> str:
        return "ok" if self.status is InvariantStatus.OK else f"failed: {self.message}"


class InvariantReport(BaseModel):
    status: InvariantStatus
    sim_time: float
    checks: list[InvariantCheck] = []

    @property
    def ok(self) -> bool:
        return self.status is InvariantStatus.OK

    def labels(self) -> dict[str, str]:
        return {c.service: c.label for c in self.checks}


def check_invariants(container: svcs.Container, sim_time: float = 0.0) -> InvariantReport:
    """Ping every registered service; one failing ping makes the report violated."""
    checks: list[InvariantCheck] = []
    for ping in container.get_pings():
        service = ping.name.rsplit(".", 1)[-1]
        try:
            ping.ping()
        except Exception as e:
            log.warning("invariant_violated", service=service, error=str(e), sim_time=sim_time)
            checks.append(
                InvariantCheck(service=service, status=InvariantStatus.VIOLATED, message=str(e))
            )
        else:
            checks.append(InvariantCheck(service=service, status=InvariantStatus.OK))
    violated = any(c.status is InvariantStatus.VIOLATED for c in checks)
    return InvariantReport(
        status=InvariantStatus.VIOLATED if violated else InvariantStatus.OK,
        sim_time=sim_time,
        checks=sorted(checks, key=lambda c: c.service),
    )


class InvariantsExtension(BaseExtension):
    """
    Adds an ``invariants`` section to the run summary.

    Usage:
        with build_simulation(scenario) as sim:
            sim.run()
            sim.summaries()["invariants"]["status"]
    """

    def summary(self, sim: Simulation) -> dict[str, Any]:
        report = sim.check_invariants()
        return {"status": str(report.status), "checks": report.labels()}
