import pytest

from catcount.config import Config, ConfigError, apply_overrides, desk_profile, load_config


def test_defaults():
    cfg = Config()
    assert (cfg.phase1.learning_rate, cfg.phase1.epochs, cfg.phase1.batch_size) == (8e-3, 10000, 512)
    assert (cfg.phase2.learning_rate, cfg.phase2.epochs, cfg.phase2.batch_size) == (1e-6, 1500, 64)
    assert (cfg.phase3_pre.learning_rate, cfg.phase3_pre.epochs) == (1e-5, 1000)
    assert (cfg.phase3_joint.learning_rate, cfg.phase3_joint.epochs, cfg.phase3_joint.batch_size) == (1e-6, 1000, 64)
    assert cfg.loss.sigma_crowd == 3.5e4 and cfg.loss.sigma_regression_aux == 3.5e2
    assert (cfg.saddle.window, cfg.saddle.escape_lr) == (15, 5e-4)
    assert cfg.margin == 0.15 and cfg.precision == "single"


def test_toml_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seed = 4\nmargin = 0.1\n[phase2]\nepochs = 7\n[loss]\nsigma_stand = 100.0\n[kernel]\nbeta = 0.25\n')
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.margin == 0.1 and cfg.phase2.epochs == 7 and cfg.phase2.batch_size == 64
    assert cfg.loss.sigma_sit == pytest.approx(120.0)
    assert cfg.kernel.beta == 0.25


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": 1},
        {"phase1": {"epoch": 3}},
        {"phase1": {"epochs": "many"}},
        {"precision": "half"},
        {"loss": {"sigma_sit": 1.0, "sigma_stand": 2.0}},
        {"phase2": {"batch_size": 0}},
        {"phase2": 5},
    ],
)
def test_bad_overrides(data):
    with pytest.raises(ConfigError):
        apply_overrides(Config(), data)


def test_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[phase1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_desk_profile_shrinks_schedules():
    cfg = desk_profile()
    assert cfg.phase1.epochs <= 2000 and cfg.phase1.learning_rate == 8e-3
    assert cfg.phase2.epochs < Config().phase2.epochs
    assert cfg.loss == Config().loss
