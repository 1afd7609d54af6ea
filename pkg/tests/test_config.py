import pytest

from slicealign.config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config


def test_defaults():
    cfg = load_config()
    assert cfg.loss.lam == 1.0 and cfg.loss.omega == 4 and cfg.loss.tau == 0.1 and cfg.loss.s == 4
    assert cfg.pairing.t == 0.1 and cfg.pairing.n == 8
    assert cfg.pretrain.optim.lr == 1e-3 and cfg.finetune.optim.lr == 1e-4
    assert cfg.augment.output_size == (64, 64)


def test_yaml_roundtrip(tmp_path):
    cfg = load_config(overrides=["loss.lambda=5", "augment.output_size=[32, 32]", "loss.omega=2"])
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert back == cfg
    assert "lambda: 5.0" in (tmp_path / "c.yaml").read_text()


def test_override_types():
    cfg = load_config(overrides=["loss.lambda=0", "finetune.optim.lr=3e-4"])
    assert cfg.loss.lam == 0.0 and isinstance(cfg.loss.lam, float)
    assert cfg.finetune.optim.lr == 3e-4
    with pytest.raises(ConfigError, match="integer"):
        load_config(overrides=["pairing.n=2.5"])


def test_unknown_keys():
    with pytest.raises(ConfigError, match="loss.bogus"):
        load_config(overrides=["loss.bogus=1"])
    with pytest.raises(ConfigError, match="nope"):
        ExperimentConfig.from_dict({"nope": {}})
    with pytest.raises(ConfigError, match="key=value"):
        load_config(overrides=["loss.omega"])


def test_omega_must_divide_feature_grid():
    with pytest.raises(ConfigError, match=r"loss.omega=3 does not divide the 8x8 feature grid"):
        load_config(overrides=["loss.omega=3"])
    assert load_config(overrides=["loss.omega=8"]).loss.omega == 8


def test_output_size_must_match_depth():
    with pytest.raises(ConfigError, match="divisible"):
        load_config(overrides=["augment.output_size=[60, 60]"])


def test_nested_validation_is_reported_with_path():
    with pytest.raises(ConfigError, match="pairing"):
        load_config(overrides=["pairing.t=0"])
    with pytest.raises(ConfigError, match="loss"):
        load_config(overrides=["loss.tau=-1"])


def test_env_worker_count(monkeypatch):
    monkeypatch.setenv("SAL_NUM_WORKERS", "3")
    assert load_config().num_workers == 3


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "x.yaml")


def test_replace_helper():
    cfg = load_config().replace(seed=4)
    assert cfg.seed == 4
    assert apply_overrides(cfg, []) == cfg
