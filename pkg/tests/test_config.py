import pytest

from ionlink.config import (ChannelModel, ConfigError, ExperimentConfig, config_from_dict, load_config,
                            preset_names, read_toml)


def minimal(**run):
    raw = {"run": {"duration_s": 1.0, "seed": 1, **run},
           "channels": [{"id": 1, "role": "pmt", "signal_probability": 1e-3}]}
    return raw


def test_presets_load():
    names = preset_names()
    for name in ("paper-493", "paper-780", "paper-1534", "paper-493-noiseless"):
        assert name in names
        cfg = load_config(name)
        assert cfg.name == name
        assert cfg.pulses.repetition_rate_hz == 420_000


def test_missing_key_named():
    raw = minimal()
    del raw["run"]["seed"]
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == "run.seed"


def test_missing_channel_role_named():
    raw = minimal()
    del raw["channels"][0]["role"]
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == "channels[0].role"


@pytest.mark.parametrize("section,key", [("run", "speed"), ("drift", "wobble"), ("emission", "tail_ns")])
def test_unknown_key(section, key):
    raw = minimal()
    raw.setdefault(section, {})[key] = 1
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert key in exc.value.key


@pytest.mark.parametrize("field,value", [("signal_probability", 1.5), ("flat_noise_cps", -1.0),
                                         ("role", "ccd"), ("id", 0)])
def test_channel_validation(field, value):
    raw = minimal()
    raw["channels"][0][field] = value
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert field in exc.value.key


def test_probabilities_of_one_emitter():
    raw = minimal()
    raw["channels"].append({"id": 2, "role": "apd", "signal_probability": 0.9995})
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_pulse_sequence_must_fit_cycle():
    raw = minimal()
    raw["pulse_sequence"] = {"repetition_rate_hz": 700_000}
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert "repetition_rate_hz" in exc.value.key


def test_duration_must_be_positive():
    with pytest.raises(ConfigError):
        config_from_dict(minimal(duration_s=0))


def test_digest_tracks_content():
    a = config_from_dict(minimal())
    assert a.digest() == config_from_dict(minimal()).digest()
    assert a.digest() != a.with_overrides(seed=2).digest()
    assert len(a.digest()) == 32


def test_channel_lookup():
    cfg = load_config("paper-1534")
    assert cfg.channel("snspd-1534").id == 3
    assert cfg.channel(1).role == "pmt"
    assert cfg.channel_map == {0: "trigger", 1: "pmt", 3: "snspd"}
    with pytest.raises(KeyError):
        cfg.channel(9)


def test_n_cycles():
    cfg = config_from_dict(minimal(duration_s=60.0))
    assert cfg.n_cycles == 60 * 420_000


def test_unknown_preset():
    with pytest.raises(ConfigError):
        read_toml("no-such-preset")


def test_bad_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("run = [")
    with pytest.raises(ConfigError):
        read_toml(path)


def test_experiment_config_direct():
    cfg = ExperimentConfig((ChannelModel(1, "apd", signal_probability=0.1),), 1.0, 5).validate()
    assert cfg.to_dict()["run"]["seed"] == 5
