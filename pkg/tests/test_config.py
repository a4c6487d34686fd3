from __future__ import annotations

import json
from pathlib import Path

import pytest

import tcatseg.config as cfg
from tcatseg.errors import ValidationError
from tcatseg.network import ModelConfig
from tcatseg.train import TrainConfig


def test_parse_flat_skips_comments_and_blanks() -> None:
    text = "# model\nn_input = 256\n\nwidths = 8, 16   # two levels\n"
    assert cfg.parse_flat(text) == {"n_input": "256", "widths": "8, 16"}
    with pytest.raises(ValidationError, match="<config>:2"):
        cfg.parse_flat("n_input = 1\nbroken line\n")


def test_build_coerces_types() -> None:
    model = cfg.build(
        ModelConfig,
        {"n_input": "256", "n_levels": "2", "widths": "8,16", "radii": "0.2, 0.4", "use_sg": "off"},
    )
    assert model.n_input == 256
    assert model.widths == (8, 16)
    assert model.radii == (0.2, 0.4)
    assert model.use_sg is False
    with pytest.raises(ValidationError, match="unknown ModelConfig keys: epochs"):
        cfg.build(ModelConfig, {"epochs": "3"})
    with pytest.raises(ValidationError, match="n_input"):
        cfg.build(ModelConfig, {"n_input": "many"})


def test_split_config_routes_keys() -> None:
    model, training = cfg.split_config(
        {"seed": "4", "epochs": "12", "learning_rate": "0.01", "k_neighbors": "8"},
        ModelConfig,
        TrainConfig,
    )
    assert (model.seed, model.k_neighbors) == (4, 8)
    assert (training.epochs, training.learning_rate) == (12, 0.01)
    with pytest.raises(ValidationError, match="unknown config key: batch"):
        cfg.split_config({"batch": "2"}, ModelConfig, TrainConfig)


def test_load_config_flat_and_json(tmp_path: Path) -> None:
    flat = tmp_path / "model.cfg"
    flat.write_text("n_levels = 2\nwidths = 8,16\n", encoding="utf-8")
    assert cfg.load_config(flat) == {"n_levels": "2", "widths": "8,16"}

    js = tmp_path / "model.json"
    js.write_text(json.dumps({"widths": [8, 16], "use_laya": False, "lr_decay": 0.99}))
    assert cfg.load_config(js) == {"widths": "8,16", "use_laya": "false", "lr_decay": "0.99"}

    with pytest.raises(ValidationError, match="not found"):
        cfg.load_config(tmp_path / "absent.cfg")


def test_dump_config_round_trips() -> None:
    model = ModelConfig(n_input=512, widths=(4, 8, 16, 32), use_ga=False, tcp_loss_levels="last")
    assert cfg.build(ModelConfig, cfg.parse_flat(cfg.dump_config(model))) == model
    training = TrainConfig(epochs=5, learning_rate=0.02)
    assert cfg.build(TrainConfig, cfg.parse_flat(cfg.dump_config(training))) == training


def test_resolve_config_path(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(cfg.CONFIG_ENV, raising=False)
    assert cfg.resolve_config_path(None) is None
    monkeypatch.setenv(cfg.CONFIG_ENV, "/etc/tcat.cfg")
    assert cfg.resolve_config_path(None) == "/etc/tcat.cfg"
    assert cfg.resolve_config_path("mine.cfg") == "mine.cfg"
