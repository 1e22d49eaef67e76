import pytest

from core.attacks import PatchFamily
from core.config import DATA_DIR_ENV, RunConfig
from core.errors import ConfigError

from conftest import TINY_CONFIG, write_config


def test_defaults_need_a_seed():
    with pytest.raises(ConfigError):
        RunConfig()


def test_defaults_with_seed():
    cfg = RunConfig(seed=11)
    assert cfg.seed == 11
    assert cfg.bits == [32, 5, 4, 2]
    assert cfg.mode == "triqdef"
    assert cfg.loss["alpha"] == 0.5 and cfg.loss["beta"] == 1.0


def test_file_values_override_defaults(tiny_cfg):
    assert tiny_cfg.seed == 3
    assert tiny_cfg.bits == [32, 2]
    assert tiny_cfg.data["train_size"] == 16
    assert tiny_cfg.attack["train_locations"] == [(2, 2)]
    assert tiny_cfg.sweep["lambdas"] == [(0.5, 0.8)]
    # untouched keys keep their defaults
    assert tiny_cfg.optimizer["lr"] == 0.1


def test_seed_argument_overrides_file(tiny_config_path):
    assert RunConfig(str(tiny_config_path), seed=99).seed == 99


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(str(tmp_path / "absent.cfg"))


@pytest.mark.parametrize("extra", ["[bogus]\nx = 1\n", "[optimizer]\nunknown_key = 1\n"])
def test_unknown_sections_and_keys(tmp_path, extra):
    path = write_config(tmp_path, TINY_CONFIG + "\n" + extra)
    with pytest.raises(ConfigError):
        RunConfig(str(path))


@pytest.mark.parametrize("extra", ["[optimizer]\nlr = fast\n", "[curriculum]\nenabled = maybe\n",
                                   "[curriculum]\nstages = 32,x\n"])
def test_unparsable_values(tmp_path, extra):
    path = write_config(tmp_path, TINY_CONFIG + "\n" + extra)
    with pytest.raises(ConfigError):
        RunConfig(str(path))


@pytest.mark.parametrize("overrides", [
    {"run": {"mode": "bogus"}},
    {"run": {"bits": [32, 16]}},
    {"run": {"bits": [4, 4]}},
    {"run": {"epochs": 0}},
    {"attack": {"unseen_locations": [(30, 30)]}},
    {"attack": {"target_class": 9}},
    {"loss": {"alpha": -1.0}},
    {"loss": {"hog_bins": 0}},
    {"curriculum": {"stages": [[32], [4]]}},
])
def test_invalid_values(tiny_cfg, overrides):
    with pytest.raises(ConfigError):
        tiny_cfg.copy(**overrides)


def test_boolean_grammar(tmp_path):
    path = write_config(tmp_path, TINY_CONFIG.replace("[attack]\n", "[attack]\nrandom_location = yes\n", 1))
    assert RunConfig(str(path)).attack["random_location"] is True


def test_stage_groups_grammar(tmp_path):
    text = TINY_CONFIG.replace("bits = 32,2", "bits = 32,8,5,4,2").replace("epochs = 2", "epochs = 100")
    path = write_config(tmp_path, text + "\n[curriculum]\nstages = 32,8/5/4/2\n")
    cfg = RunConfig(str(path))
    assert cfg.curriculum["stages"] == [[32, 8], [5], [4], [2]]
    assert cfg.schedule().boundaries() == [0, 25, 50, 75]


def test_disabled_curriculum_starts_every_bit_at_once(tiny_cfg):
    cfg = tiny_cfg.copy(run={"bits": [32, 4, 2], "epochs": 6}, curriculum={"enabled": False})
    assert cfg.schedule().boundaries() == [0]
    assert cfg.copy(curriculum={"enabled": True}).schedule().boundaries() == [0, 3]


def test_save_and_reload_round_trip(tiny_cfg, tmp_path):
    target = tmp_path / "echo.cfg"
    tiny_cfg.save(str(target))
    assert RunConfig(str(target)).to_dict() == tiny_cfg.to_dict()


def test_dict_round_trip(tiny_cfg):
    assert RunConfig.from_dict(tiny_cfg.to_dict()).to_dict() == tiny_cfg.to_dict()


def test_from_dict_rejects_unknown_key(tiny_cfg):
    data = tiny_cfg.to_dict()
    data["run"]["colour"] = "blue"
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_copy_does_not_touch_the_original(tiny_cfg):
    other = tiny_cfg.copy(run={"mode": "standard-qat"})
    assert other.mode == "standard-qat"
    assert tiny_cfg.mode == "triqdef"


@pytest.mark.parametrize("mode,fdp,gpdp", [
    ("triqdef", 0.8, 0.5),
    ("triqdef-no-fdp", 0.0, 0.5),
    ("triqdef-no-gpdp", 0.8, 0.0),
    ("standard-qat", 0.0, 0.0),
    ("patch-augmented", 0.0, 0.0),
])
def test_loss_weights_follow_mode(tiny_cfg, mode, fdp, gpdp):
    w = tiny_cfg.copy(run={"mode": mode}).loss_weights()
    assert (w.lambda_fdp, w.lambda_gpdp) == (fdp, gpdp)


def test_uses_patches(tiny_cfg):
    assert tiny_cfg.uses_patches
    assert not tiny_cfg.copy(run={"mode": "standard-qat"}).uses_patches


def test_pool_triples(tiny_cfg):
    assert tiny_cfg.pool_triples("train") == [(5, (2, 2), 32)]
    assert tiny_cfg.pool_triples("unseen") == [(6, (20, 20), 2)]
    full = RunConfig(seed=1)
    assert len(full.pool_triples("train")) == 2 * 2 * 2


def test_attack_config_view(tiny_cfg):
    attack = tiny_cfg.attack_config(seed=5)
    assert attack.iterations == 2
    assert attack.seed == 5
    assert attack.family is PatchFamily.PER_IMAGE
    assert tiny_cfg.attack_config().seed == tiny_cfg.seed


def test_eval_bits_default_to_run_bits(tiny_cfg):
    assert tiny_cfg.eval_bits == [32, 2]
    assert tiny_cfg.copy(eval={"bits": [2]}).eval_bits == [2]


def test_data_dir_from_environment(tiny_cfg, monkeypatch, tmp_path):
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    assert tiny_cfg.data_dir() == tmp_path
    assert tiny_cfg.copy(data={"data_dir": "elsewhere"}).data_dir().name == "elsewhere"
