import pytest

from glioma_mtl.config import (load_config, network_spec, parse_config, phantom_spec,
                               train_config)
from glioma_mtl.errors import ConfigError

MINIMAL = """
[data]
run_dir = runs/x
[synth]
seed = 3
[train]
initial_lr = 1e-3
weight_decay = 1e-5
seed = 0
"""


def test_values_are_typed():
    cfg = parse_config(MINIMAL)
    assert cfg.get("train", "initial_lr") == 1e-3
    assert cfg.get("synth", "shape") == (32, 32, 32)
    assert cfg.get("data", "run_dir") == "runs/x"
    assert cfg.get("preprocess", "smooth_training_masks") is False


def test_missing_required_key_names_it():
    cfg = parse_config("[data]\nrun_dir = r\n")
    with pytest.raises(ConfigError, match=r"missing config key \[train\] initial_lr"):
        train_config(cfg)


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config(MINIMAL + "learning_rate = 1\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        parse_config(MINIMAL + "[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.ini")


def test_overrides_apply_in_order():
    cfg = parse_config(MINIMAL, ["train.max_epochs=3", "train.max_epochs=7",
                                 "network.filter_schedule=[4, 8, 8]"])
    assert train_config(cfg).max_epochs == 7
    spec = network_spec(cfg, (20, 20, 20, 4))
    assert spec.filter_schedule == [4, 8, 8]
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["max_epochs=3"])


def test_snapshot_round_trips_through_ini():
    cfg = parse_config(MINIMAL, ["synth.n=12", "grid.l2=(1e-5,)"])
    again = parse_config(cfg.to_ini())
    assert again.snapshot() == cfg.snapshot()
    assert phantom_spec(again) == phantom_spec(cfg)
