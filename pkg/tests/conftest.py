import pytest

from ionlink.config import NO_DRIFT, ChannelModel, ExperimentConfig


def make_config(channels, duration_s=1.0, seed=11, drift=NO_DRIFT, **kw):
    return ExperimentConfig(tuple(channels), duration_s, seed, drift=drift, **kw).validate()


@pytest.fixture
def two_arm_config():
    """PMT reference plus one APD fiber arm, no drift."""
    return make_config([
        ChannelModel(1, "pmt", "pmt", 2e-3, flat_noise_cps=300, pulse_background_cps=2000, jitter_ns=0.5),
        ChannelModel(2, "apd", "apd", 1e-3, flat_noise_cps=800, jitter_ns=0.35),
    ], duration_s=2.0)
