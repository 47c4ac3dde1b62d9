import json

import pytest

from teeagg.config import ConfigError, FaultSpec, JobConfig, template, validate


def fields_of(exc):
    return {f for f, _ in exc.value.problems}


def test_json_round_trip(tmp_path):
    cfg = template("ssp")
    path = tmp_path / "c.json"
    cfg.save(path)
    assert JobConfig.load(path) == cfg


@pytest.mark.parametrize("name", ["mask", "tree", "ssp"])
def test_templates_validate(name):
    validate(template(name))


def test_unknown_template():
    with pytest.raises(ValueError):
        template("ring")


def test_unknown_fields_rejected():
    with pytest.raises(ConfigError) as info:
        JobConfig.from_dict({"n_training": 2, "colour": "red", "model": {"depth": 3}})
    assert "colour" in str(info.value)


def test_nested_unknown_field():
    with pytest.raises(ConfigError) as info:
        JobConfig.from_dict({"model": {"depth": 3}})
    assert fields_of(info) == {"model.depth"}


def test_bad_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        JobConfig.load(p)


def test_validation_lists_every_problem():
    cfg = JobConfig(n_training=0, mode="ring", domain="int8", epochs=0)
    with pytest.raises(ConfigError) as info:
        validate(cfg)
    assert {"n_training", "mode", "domain", "epochs"} <= fields_of(info)


def test_children_only_matter_in_tree_mode():
    validate(JobConfig(mode="mask", children_c=1))
    with pytest.raises(ConfigError) as info:
        validate(JobConfig(mode="tree", children_c=1))
    assert fields_of(info) == {"children_c"}


def test_overflow_contract_checked():
    with pytest.raises(ConfigError) as info:
        validate(JobConfig(frac_bits=40, clamp_abs=2.0**21, n_training=2, model={"n_samples": 2000} and JobConfig().model))
    assert "clamp_abs" in fields_of(info)


def test_fault_targets():
    with pytest.raises(ConfigError) as info:
        validate(JobConfig(faults=[FaultSpec("training:9", 0), FaultSpec("admin", 0, "delay", 1.0)]))
    assert fields_of(info) == {"faults[0].target", "faults[1].target"}


def test_pool_must_cover_iterations():
    with pytest.raises(ConfigError) as info:
        validate(JobConfig(mask_pool_size=3))
    assert fields_of(info) == {"mask_pool_size"}
    validate(JobConfig(mode="tree", mask_pool_size=3))


def test_defaults_derived_from_config():
    cfg = JobConfig()
    assert cfg.total_iterations == 200
    assert cfg.effective_straggler_timeout == 5 * cfg.costs.t_train
    assert cfg.effective_pool_size >= cfg.total_iterations
    assert json.loads(cfg.to_json())["mode"] == "mask"
