import pytest

from votestep.config import ConfigError, RunConfig, fp_level_sizes, load_config, parse_config


def test_defaults_validate_and_round_trip():
    cfg = RunConfig().validate()
    again = parse_config(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()


def test_parse_comments_sequences_and_trailing_underscore():
    cfg = parse_config("""
# comment
backbone.sa_points = 512 128 32   # inline
diffusion.lambda = 0.4
scene.oriented = false
""")
    assert cfg.backbone.sa_points == (512, 128, 32)
    assert cfg.diffusion.lambda_ == 0.4
    assert cfg.scene.oriented is False


@pytest.mark.parametrize("text", ["nokey", "scene.bogus = 1", "bogus.x = 1", "train.epochs = ten", "scene.oriented = maybe"])
def test_parse_errors_name_the_line(text):
    with pytest.raises(ConfigError, match="line 1"):
        parse_config(text)


@pytest.mark.parametrize("key,value", [
    ("backbone.sa_points", "64 256 32"),
    ("backbone.k", "1000"),
    ("diffusion.mode", "score"),
    ("diffusion.lambda", "0"),
    ("diffusion.time_dim", "7"),
    ("head.pos_radius", "0.9"),
    ("proposal.num_proposals", "100000"),
    ("infer.sampler", "euler"),
    ("train.dtype", "float16"),
])
def test_validation_rejects(key, value):
    with pytest.raises(ConfigError):
        load_config(None, {key: value})


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_overrides_apply_after_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.epochs = 3\ntrain.lr = 0.01\n")
    cfg = load_config(path, {"train.epochs": 7})
    assert (cfg.train.epochs, cfg.train.lr) == (7, 0.01)


def test_copy_is_independent():
    a = RunConfig()
    b = a.copy()
    b.set("train.epochs", "1")
    assert a.train.epochs == 50


def test_fp_level_sizes():
    cfg = RunConfig()
    assert fp_level_sizes(cfg) == [256, 1024]
    cfg.set("backbone.num_fp_levels", "1")
    assert fp_level_sizes(cfg) == [256]
