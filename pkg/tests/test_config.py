import pytest

from terrain_twin import config


def test_defaults_cover_every_section():
    prefixes = {k.split(".")[0] for k in config.DEFAULTS}
    assert prefixes == {"world", "sampler", "labeler", "unet", "train", "tiler"}
    assert config.DEFAULTS["train.batch_size"] == 16
    assert config.DEFAULTS["train.learning_rate"] == 1e-4
    assert config.DEFAULTS["sampler.n_patches"] == 5000


def test_precedence_file_then_flags(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\ntrain.max_epochs = 7\ntrain.seed = 3  # trailing\n")
    cfg = config.resolve(path, {"train.seed": 9, "train.batch_size": None})
    assert cfg["train.max_epochs"] == 7
    assert cfg["train.seed"] == 9
    assert cfg["train.batch_size"] == 16
    assert config.resolve(path, {"train.seed": 9}) == cfg


def test_unknown_key_names_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("train.seed = 1\n\ntrain.sead = 2\n")
    with pytest.raises(config.ConfigError, match=r"c.cfg:3: unknown key 'train.sead'"):
        config.resolve(path)


def test_bad_values(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("train.batch_size = lots\n")
    with pytest.raises(config.ConfigError, match=":1:"):
        config.resolve(path)
    path.write_text("labeler.slope_hill = 0.9\n")    # above slope_mountain
    with pytest.raises(config.ConfigError):
        config.resolve(path)
    path.write_text("no equals sign\n")
    with pytest.raises(config.ConfigError):
        config.resolve(path)


def test_typed_values():
    cfg = config.parse_config_text("tiler.normalize = off\ntrain.early_stop_patience = none\n"
                                   "labeler.tundra_lat = 70\n")
    assert cfg == {"tiler.normalize": False, "train.early_stop_patience": None,
                   "labeler.tundra_lat": 70.0}


def test_section_builders():
    cfg = config.resolve(None, {"labeler.moisture_wet": 0.7, "unet.depth": 3})
    assert config.labeler_config(cfg).thresholds.moisture_wet == 0.7
    assert config.unet_config(cfg).depth == 3
    assert config.sampler_config(cfg).base == 64


def test_format_round_trip():
    cfg = config.resolve()
    assert config.resolve(None, config.parse_config_text(config.format_config(cfg))) == cfg


def test_worker_count(monkeypatch):
    monkeypatch.setenv("TERRAIN_TWIN_THREADS", "3")
    assert config.worker_count() == 3
    monkeypatch.setenv("TERRAIN_TWIN_THREADS", "0")
    assert config.worker_count() >= 1
    monkeypatch.setenv("TERRAIN_TWIN_THREADS", "many")
    with pytest.raises(config.ConfigError):
        config.worker_count()
