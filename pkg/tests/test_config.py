import json

import pytest
import yaml

from flexp_sfl.config import (
    config_reference,
    dump_config,
    load_config,
    parse_config,
    to_experiment,
    to_tree,
    with_override,
)
from flexp_sfl.errors import ConfigError


def test_minimal_config_is_fully_populated(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("plan:\n  target_steps: 20\n")
    cfg = load_config(path)
    tree = to_tree(cfg)
    assert tree["plan"]["target_steps"] == 20
    assert tree["model"]["num_middle_blocks"] == 10
    assert tree["federation"]["num_clients"] == 5
    assert [c.device for c in cfg.client_list()] == ["fast"] * 4 + ["slow"]
    exp = to_experiment(cfg)
    assert exp.plan.q == [0.5] * 5
    assert exp.devices[4].fwd_seconds_per_block_per_sample == 10 * exp.devices[0].fwd_seconds_per_block_per_sample


def test_q_out_of_range_names_key_path():
    clients = [{"q": 0.5}] * 4 + [{"q": 1.5}]
    with pytest.raises(ConfigError) as err:
        parse_config({"plan": {"clients": clients}})
    assert "plan.clients[4].q" in str(err.value)
    assert err.value.path == "plan.clients[4].q"


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match=r"plan\.foo"):
        parse_config({"plan": {"foo": 1}})
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config({"modle": {}})


def test_wrong_type_names_expected_type():
    with pytest.raises(ConfigError, match=r"federation\.num_clients.*int"):
        parse_config({"federation": {"num_clients": "five"}})


def test_one_stop_criterion():
    cfg = parse_config({"plan": {"time_budget_s": 10.0}})
    assert cfg.plan.target_steps is None
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config({"plan": {"time_budget_s": 10.0, "target_steps": 5}})


def test_flexp_rejects_aggregation_keys():
    with pytest.raises(ConfigError, match="aggregat"):
        parse_config({"plan": {"aggregation_period": 2}})
    parse_config({"plan": {"protocol": "sfl", "aggregation_period": 2}})


def test_client_count_and_device_names_checked():
    with pytest.raises(ConfigError, match="entries"):
        parse_config({"plan": {"clients": [{"q": 0.5}]}})
    with pytest.raises(ConfigError, match="unknown device"):
        parse_config({"federation": {"num_clients": 1}, "plan": {"clients": [{"device": "phone"}]}})


@pytest.mark.parametrize("tree", [
    {},
    {"plan": {"lam": 0.25, "clients": [{"q": q} for q in (0.1, 0.2, 0.3, 0.4, 0.5)]}},
    {"plan": {"protocol": "fedavg", "local_steps": 3}, "devices": {"fast": {"dropout_prob": 0.1}, "slow": {}}},
    {"model": {"block_kind": "attention_mlp_residual", "seq_len": 4}, "plan": {"time_budget_s": 3.5}},
])
def test_dump_load_round_trip_is_canonical(tree, tmp_path):
    cfg = parse_config(tree)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)
    # json input gives the same canonical form
    jpath = tmp_path / "c.json"
    jpath.write_text(json.dumps(tree))
    assert dump_config(load_config(jpath)) == dump_config(cfg)


def test_dump_omits_aggregation_keys_for_flexp():
    plan = yaml.safe_load(dump_config(parse_config({})))["plan"]
    assert "aggregation_period" not in plan and "local_steps" not in plan


def test_bad_yaml_and_missing_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("plan: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def test_with_override():
    cfg = parse_config({"plan": {"target_steps": 10}})
    assert all(c.q == 0.2 for c in with_override(cfg, "q", 0.2).client_list())
    assert with_override(cfg, "lambda", 0.5).plan.lam == 0.5
    assert all(d.dropout_prob == 0.1 for d in with_override(cfg, "dropout", 0.1).devices.values())
    with pytest.raises(ConfigError, match="plan.clients"):
        with_override(cfg, "q", 2.0)
    with pytest.raises(ConfigError):
        with_override(cfg, "lr", 0.1)


def test_reference_lists_every_leaf_key():
    ref = config_reference()
    for key in ("plan.lam", "plan.clients[i].q", "federation.theta_max", "devices.<name>.dropout_prob",
                "plan.optimizer.lr", "model.block_kind"):
        assert key in ref, key
