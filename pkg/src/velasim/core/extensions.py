from __future__ import annotations

import logging
from collections.abc import Iterator
from contextlib import AbstractContextManager, contextmanager
from typing import (
    TYPE_CHECKING,
    Any,
    Protocol,
    runtime_checkable,
)

import svcs

from .settings import Settings

if TYPE_CHECKING:
    from .application import Simulation

logger = logging.getLogger(__name__)


@runtime_checkable
class Extension(Protocol):
    """
    Protocol for extensions that hook into a simulation's lifecycle.

    Extensions can:
    - Register services with svcs (with a ping that checks invariants)
    - Register event handlers on the engine
    - Schedule their initial events
    - Return state to merge into the simulation state
    """

    def register(
        self, registry: svcs.Registry, sim: Simulation
    ) -> AbstractContextManager[dict[str, Any]]:
        """
        Context manager for lifecycle.

        - Enter: startup (register services, handlers, initial events)
        - Yield: dict of state to merge into simulation state
        - Exit: shutdown (cleanup resources)
        """
        ...


@runtime_checkable
class HasReport(Protocol):
    """Extension that contributes tables to the run artifacts."""

    def report(self, sim: Simulation) -> dict[str, list[dict[str, Any]]]: ...


@runtime_checkable
class HasSummary(Protocol):
    """Extension that contributes a section to the run summary."""

    def summary(self, sim: Simulation) -> dict[str, Any]: ...


class BaseExtension:
    """
    Base class for extensions with explicit startup/shutdown hooks.

    For simple extensions, override startup() and shutdown().
    For full control, override register() directly.
    """

    def __init__(self, settings: Settings | None = None):
        self.settings = settings or Settings()

    def startup(self, registry: svcs.Registry, sim: Simulation) -> dict[str, Any]:
        """
        Override to set up services and initial events.

        Returns a dict of state to merge into the simulation state.
        """
        return {}

    def shutdown(self, sim: Simulation) -> None:
        """Override to clean up when the simulation is torn down."""
        pass

    @contextmanager
    def register(self, registry: svcs.Registry, sim: Simulation) -> Iterator[dict[str, Any]]:
        """Wraps startup/shutdown into a context manager."""
        state = self.startup(registry, sim)
        try:
            yield state
        finally:
            self.shutdown(sim)
