import json

import pytest

from coaghom.config import DEFAULTS, ConfigError, load_config, resolve_config


def write(tmp_path, data):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(data))
    return p


def test_minimal_config_resolves_to_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"schema_version": 1}))
    assert cfg.raw == DEFAULTS
    p = cfg.params()
    assert p.M == 2 and (p.a == 1).all()
    assert cfg.geometry().inclusion_area > 0


def test_overrides_merge_with_defaults():
    cfg = resolve_config({"schema_version": 1, "kinetics": {"M": 4, "c": [1, 2, 3, 4]}})
    assert cfg["kinetics"]["M"] == 4 and cfg["kinetics"]["D"] == 1.0
    assert list(cfg.params().c) == [1, 2, 3, 4]


def test_negative_kernel_entry_named():
    a = [[1, -1], [-1, 1]]
    with pytest.raises(ConfigError, match=r"kinetics: .*a\[1,2\]"):
        resolve_config({"schema_version": 1, "kinetics": {"a": a}})


def test_zero_kernel_needs_override():
    a = [[1, 0], [0, 1]]
    with pytest.raises(ConfigError):
        resolve_config({"schema_version": 1, "kinetics": {"a": a}})
    cfg = resolve_config({"schema_version": 1, "kinetics": {"a": a, "allow_nonpaper": True}})
    assert "zero coagulation kernel entries" in cfg.nonpaper_flags()


@pytest.mark.parametrize(
    "data, path",
    [
        ({"schema_version": 1, "bogus": 1}, "<root>: unknown key"),
        ({"schema_version": 1, "time": {"dt": 0.1, "Tmax": 2}}, "time: unknown key"),
        ({"schema_version": 1, "time": {"dt": -0.1}}, "time.dt"),
        ({"schema_version": 1, "kinetics": {"M": 1}}, "kinetics.M"),
        ({"schema_version": 2}, "schema_version"),
        ({}, "<root>"),
    ],
)
def test_schema_violations_report_path(data, path):
    with pytest.raises(ConfigError) as exc:
        resolve_config(data)
    assert str(exc.value).startswith(path)


def test_physical_checks():
    with pytest.raises(ConfigError, match="geometry.inclusion: .*touches"):
        resolve_config({"schema_version": 1, "geometry": {"inclusion": {"type": "disk", "center": [0.5, 0.5], "radius": 0.5}}})
    with pytest.raises(ConfigError, match="strictly decreasing"):
        resolve_config({"schema_version": 1, "convergence": {"epsilons": [0.25, 0.5]}})
    with pytest.raises(ConfigError, match="non-negative"):
        resolve_config({"schema_version": 1, "data": {"U1": -1.0}})


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_builders_produce_runnable_configs():
    cfg = resolve_config({"schema_version": 1, "time": {"T": 0.02}, "domain": {"epsilon": 0.5}})
    mc = cfg.micro_config()
    assert mc.epsilon == 0.5 and mc.T == 0.02
    assert mc.inclusions.n_vertices > 0
