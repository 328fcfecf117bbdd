import pytest

from velasim.core.exceptions import SchemaError, UnknownPreset
from velasim.scenario import (
    ExperimentKind,
    ScenarioConfig,
    deep_merge,
    list_presets,
    parse_scenario,
)

PRESETS = [
    "bluevela-pod",
    "fig3-sweep",
    "fig4-sweep",
    "incast-8to1",
    "power-surge",
    "storage-compare",
    "vela-2022",
    "vela-2023",
    "vela-resilience-month",
]


def test_presets_are_listed():
    assert list_presets() == PRESETS


@pytest.mark.parametrize("name", PRESETS)
def test_every_preset_parses(name):
    config = parse_scenario(name)

    assert config.name == name
    assert config.horizon > 0


def test_vela_2023_preset():
    config = parse_scenario("vela-2023")

    assert config.topology.builder == "vela"
    assert config.topology.racks == 16
    assert config.jobs[0].gpu_count == 768
    assert config.jobs[0].params == 20e9
    assert config.experiment is ExperimentKind.TRAINING


def test_included_preset_is_overridden_by_the_including_file():
    config = parse_scenario("vela-resilience-month")

    assert config.topology.racks == 18
    assert config.topology.servers_per_rack == 6
    assert config.horizon == 30 * 86_400.0
    assert config.jobs[0].name == "granite-20b"


def test_unknown_preset():
    with pytest.raises(UnknownPreset) as info:
        parse_scenario("no-such-cluster")

    assert "vela-2023" in info.value.details["known"]
    assert info.value.exit_code == 2


def test_missing_file():
    with pytest.raises(SchemaError):
        parse_scenario("studies/missing.yaml")


def test_error_names_key_and_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: bad\nhorizon: 1d\ntopology:\n  rackz: 3\n")

    with pytest.raises(SchemaError) as info:
        parse_scenario(path)

    assert "topology.rackz (line 4)" in info.value.message
    assert info.value.details["line"] == 4


def test_error_inside_a_list(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: bad\njobs:\n  - params: 1e9\n    tp: 0\n")

    with pytest.raises(SchemaError) as info:
        parse_scenario(path)

    assert info.value.details["key"] == "jobs.0.tp"
    assert info.value.details["line"] == 4


def test_invalid_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("name: [unclosed\n")

    with pytest.raises(SchemaError, match="not valid YAML"):
        parse_scenario(path)


def test_top_level_must_be_a_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- a\n- b\n")

    with pytest.raises(SchemaError, match="mapping"):
        parse_scenario(path)


def test_file_includes_are_relative(tmp_path):
    (tmp_path / "base.yaml").write_text("horizon: 2d\ntopology:\n  racks: 3\n  spines: 2\n")
    path = tmp_path / "study.yaml"
    path.write_text("include: base.yaml\nname: study\ntopology:\n  racks: 4\n")

    config = parse_scenario(path)

    assert config.name == "study"
    assert config.horizon == 2 * 86_400.0
    assert config.topology.racks == 4
    assert config.topology.spines == 2


def test_include_cycle_is_rejected(tmp_path):
    (tmp_path / "a.yaml").write_text("include: b.yaml\n")
    (tmp_path / "b.yaml").write_text("include: a.yaml\n")

    with pytest.raises(SchemaError, match="cycle"):
        parse_scenario(tmp_path / "a.yaml")


def test_unknown_top_level_key_is_rejected(tmp_path):
    path = tmp_path / "typo.yaml"
    path.write_text("name: typo\nhorizn: 1d\n")

    with pytest.raises(SchemaError) as info:
        parse_scenario(path)

    assert info.value.details["key"] == "horizn"
    assert info.value.details["line"] == 2


def test_with_overrides():
    config = parse_scenario("vela-2022")

    updated = config.with_overrides(horizon="2h", seed=5, name=None)

    assert updated.horizon == 7200.0
    assert updated.seed == 5
    assert updated.name == config.name
    assert updated.topology == config.topology


def test_overrides_are_validated():
    with pytest.raises(SchemaError):
        ScenarioConfig().with_overrides(horizon="-1h")


def test_deep_merge_replaces_lists():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": 1}

    merged = deep_merge(base, {"a": {"c": [3]}, "e": 2})

    assert merged == {"a": {"b": 1, "c": [3]}, "d": 1, "e": 2}
    assert base["a"]["c"] == [1, 2]
