# tests/test_config.py
import pytest

from config.settings_loader import load_config_file, merge_settings, normalize_key
from config.solver_config import HelmSettings
from config.train_config import TrainConfig
from utils.errors import PreconditionError


def test_key_normalization():
    assert normalize_key("N_MAX") == "n_max"
    assert normalize_key("--pade-m ") == "pade_m"


def test_config_file_keys(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# solver\nN_MAX=8\npade-m=3\nseed = 5\n")
    assert load_config_file(str(path)) == {"n_max": "8", "pade_m": "3", "seed": "5"}
    assert load_config_file(None) == {}
    with pytest.raises(PreconditionError):
        load_config_file(str(tmp_path / "absent.env"))


def test_flags_override_file_override_defaults():
    file_values = {"n_max": "8", "pade_m": "3", "unrelated": "x"}
    settings = merge_settings(HelmSettings, file_values, {"n_max": 12, "pade_m": None})
    assert settings.n_max == 12
    assert settings.pade_m == 3
    assert settings.xi_ln == -10.0


def test_invalid_order_combination():
    with pytest.raises(PreconditionError):
        merge_settings(HelmSettings, {"n_max": "4"}, {"pade_m": 3})
    with pytest.raises(PreconditionError):
        merge_settings(TrainConfig, {}, {"loss_scale": "quadratic"})


def test_config_hash_ignores_runtime_knobs():
    base = TrainConfig(steps=10, threads=1)
    assert base.config_hash() == TrainConfig(steps=50, threads=4, checkpoint_every=5).config_hash()
    assert base.config_hash() != TrainConfig(steps=10, seed=1).config_hash()
    assert base.helm().n_max == base.n_max
    assert base.policy().init_seed == base.seed
