from __future__ import annotations

from pathlib import Path
from typing import Any

import pytest

from velasim.core.engine import Engine, RngStream
from velasim.core.settings import Settings
from velasim.ext.network import Network, NetworkConfig
from velasim.ext.topology import ClusterTopology, NodeSpec, build_fat_tree, build_vela_topology
from velasim.scenario import ScenarioConfig


@pytest.fixture
def node() -> NodeSpec:
    return NodeSpec()


@pytest.fixture
def engine() -> Engine:
    return Engine()


@pytest.fixture
def stream() -> RngStream:
    return RngStream("test", 7)


@pytest.fixture
def vela() -> ClusterTopology:
    """Two racks of six nodes, four spines."""
    return build_vela_topology(2)


@pytest.fixture
def fat_tree() -> ClusterTopology:
    """Two scalable units of four nodes on two rails."""
    return build_fat_tree(2, nodes_per_su=4, rails=2)


@pytest.fixture
def network(vela: ClusterTopology) -> Network:
    return Network(vela, NetworkConfig(), salt=0)


@pytest.fixture
def settings(tmp_path: Path) -> Settings:
    return Settings(output_root=tmp_path / "runs", event_log=True)


def small_training(**overrides: Any) -> ScenarioConfig:
    """A one-day training scenario on a 12-node Vela cluster."""
    data: dict[str, Any] = {
        "name": "small",
        "horizon": "1d",
        "seed": 3,
        "topology": {"builder": "vela", "racks": 2, "servers_per_rack": 6},
        "jobs": [{"params": 1e9, "tp": 8, "pp": 1, "dp": 8, "target_tflops": 140}],
    }
    data.update(overrides)
    return ScenarioConfig.model_validate(data)


@pytest.fixture
def training() -> ScenarioConfig:
    return small_training()
