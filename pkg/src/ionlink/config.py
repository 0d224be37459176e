"""Experiment configuration and preset loading.

Config files are TOML with the unit in every key name. Presets ship inside
the package under ``presets/`` and can be referenced by name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ROLES = ("pmt", "apd", "snspd")
PS_PER_NS = 1000
PS_PER_S = 10**12


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")


@dataclass(frozen=True)
class PulseSequence:
    """Timing of one experimental cycle, relative to its trigger.

    The trigger marks the start of the initialization pulse. Doppler cooling
    fills whatever is left of the cycle after the background pulse.
    """

    init_duration_ns: float = 781.0
    post_init_delay_ns: float = 200.0
    excitation_duration_ns: float = 200.0
    background_pulse_offset_ns: float = 380.0
    background_pulse_duration_ns: float = 200.0
    repetition_rate_hz: int = 420_000

    @property
    def excitation_start_ns(self) -> float:
        return self.init_duration_ns + self.post_init_delay_ns

    @property
    def background_start_ns(self) -> float:
        return self.excitation_start_ns + self.background_pulse_offset_ns

    @property
    def cycle_period_ns(self) -> float:
        return 1e9 / self.repetition_rate_hz

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"pulse_sequence.{f.name}", "must be positive")
        if self.background_pulse_offset_ns < self.excitation_duration_ns:
            raise ConfigError("pulse_sequence.background_pulse_offset_ns",
                              "background pulse overlaps the excitation pulse")
        end = self.background_start_ns + self.background_pulse_duration_ns
        if end > self.cycle_period_ns:
            raise ConfigError("pulse_sequence.repetition_rate_hz",
                              f"active phases ({end:.0f} ns) exceed the cycle period "
                              f"({self.cycle_period_ns:.0f} ns)")


@dataclass(frozen=True)
class EmissionProfile:
    """Photon wavepacket shape ``(1 - exp(-t/rise)) * exp(-t/decay)`` after ``onset``.

    ``onset_ns`` is counted from the start of the excitation pulse and also
    delays the pulse-correlated background (it is the light turn-on delay).
    """

    rise_ns: float = 15.0
    decay_ns: float = 1e3 / (2 * math.pi * 14.8)
    onset_ns: float = 20.0

    def validate(self) -> None:
        for name in ("rise_ns", "decay_ns", "onset_ns"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"emission.{name}", "must be non-negative")


@dataclass(frozen=True)
class ChannelModel:
    """One detector.

    ``signal_probability`` is the per-shot probability of a detected ion
    photon (all losses and the arm routing included). Channels on the same
    emitter are mutually exclusive within a cycle.
    """

    id: int
    role: str
    label: str = ""
    signal_probability: float = 0.0
    flat_noise_cps: float = 0.0
    pulse_background_cps: float = 0.0
    dead_time_ns: float = 0.0
    jitter_ns: float = 0.0
    detuning_sensitive: bool = False

    def validate(self, where: str) -> None:
        if not 1 <= self.id <= 255:
            raise ConfigError(f"{where}.id", "must be in 1..255 (0 is the trigger)")
        if self.role not in ROLES:
            raise ConfigError(f"{where}.role", f"must be one of {', '.join(ROLES)}")
        if not 0.0 <= self.signal_probability <= 1.0:
            raise ConfigError(f"{where}.signal_probability", "must lie in [0, 1]")
        for name in ("flat_noise_cps", "pulse_background_cps", "dead_time_ns", "jitter_ns"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{where}.{name}", "must be a finite non-negative number")


@dataclass(frozen=True)
class DriftModel:
    """Slow drifts over a run.

    Arrival times follow a Gaussian random walk whose spread grows by
    ``arrival_walk_ns_per_hour`` per square-root hour, updated every
    ``walk_step_s``. The second-stage pump detuning swings sinusoidally with
    amplitude ``detuning_amplitude_mhz``; detuning-sensitive channels are
    thinned by the etalon transmission at that detuning.
    """

    arrival_walk_ns_per_hour: float = 4.0
    walk_step_s: float = 10.0
    detuning_amplitude_mhz: float = 20.0
    detuning_period_s: float = 3600.0
    photon_linewidth_mhz: float = 14.8
    filter_fwhm_mhz: float = 46.1

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) >= 0:
                raise ConfigError(f"drift.{f.name}", "must be non-negative")
        for name in ("walk_step_s", "detuning_period_s", "filter_fwhm_mhz"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"drift.{name}", "must be positive")


NO_DRIFT = DriftModel(arrival_walk_ns_per_hour=0.0, detuning_amplitude_mhz=0.0)


@dataclass(frozen=True)
class ExperimentConfig:
    channels: tuple[ChannelModel, ...]
    duration_s: float
    seed: int
    pulses: PulseSequence = field(default_factory=PulseSequence)
    emission: EmissionProfile = field(default_factory=EmissionProfile)
    drift: DriftModel = field(default_factory=DriftModel)
    trigger_channel: int = 0
    name: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.duration_s is None or not self.duration_s > 0:
            raise ConfigError("run.duration_s", "must be set and positive")
        if self.seed is None:
            raise ConfigError("run.seed", "must be set")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("run.seed", "must fit in 64 unsigned bits")
        if self.trigger_channel != 0:
            raise ConfigError("run.trigger_channel", "trigger must be channel 0")
        self.pulses.validate()
        self.emission.validate()
        self.drift.validate()
        if not self.channels:
            raise ConfigError("channels", "at least one detection channel is required")
        seen = set()
        for i, ch in enumerate(self.channels):
            ch.validate(f"channels[{i}]")
            if ch.id in seen:
                raise ConfigError(f"channels[{i}].id", f"duplicate channel id {ch.id}")
            seen.add(ch.id)
        total = sum(ch.signal_probability for ch in self.channels)
        if total > 1.0:
            raise ConfigError("channels", "signal probabilities of one emitter sum above 1")
        if self.n_cycles < 1:
            raise ConfigError("run.duration_s", "shorter than one cycle")
        return self

    @property
    def n_cycles(self) -> int:
        # exact for the usual integral-second durations
        return int(round(self.duration_s * self.pulses.repetition_rate_hz, 6))

    def channel(self, ident: int | str) -> ChannelModel:
        for ch in self.channels:
            if ch.id == ident or ch.label == ident:
                return ch
        raise KeyError(f"no channel {ident!r}")

    @property
    def channel_map(self) -> dict[int, str]:
        out = {self.trigger_channel: "trigger"}
        out.update({ch.id: ch.role for ch in self.channels})
        return out

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "run": {"duration_s": self.duration_s, "seed": int(self.seed),
                    "trigger_channel": self.trigger_channel},
            "pulse_sequence": dataclasses.asdict(self.pulses),
            "emission": dataclasses.asdict(self.emission),
            "drift": dataclasses.asdict(self.drift),
            "channels": [dataclasses.asdict(ch) for ch in self.channels],
        }

    def digest(self) -> bytes:
        """SHA-256 over a canonical JSON rendering of the configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


def _section(raw: dict, name: str, cls):
    data = raw.get(name, {})
    if not isinstance(data, dict):
        raise ConfigError(name, "must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(name, str(exc)) from None


def config_from_dict(raw: dict, *, require_run: bool = True) -> ExperimentConfig:
    run = raw.get("run")
    if not isinstance(run, dict):
        raise ConfigError("run", "missing [run] table")
    for key in ("duration_s", "seed"):
        if key not in run:
            raise ConfigError(f"run.{key}", "missing required key")
    for key in run:
        if key not in ("duration_s", "seed", "trigger_channel"):
            raise ConfigError(f"run.{key}", "unknown key")
    if "channels" not in raw:
        raise ConfigError("channels", "missing required [[channels]] entries")
    channels = []
    known = {f.name for f in dataclasses.fields(ChannelModel)}
    for i, entry in enumerate(raw["channels"]):
        for key in ("id", "role"):
            if key not in entry:
                raise ConfigError(f"channels[{i}].{key}", "missing required key")
        for key in entry:
            if key not in known:
                raise ConfigError(f"channels[{i}].{key}", "unknown key")
        channels.append(ChannelModel(**entry))
    cfg = ExperimentConfig(
        channels=tuple(channels),
        duration_s=float(run["duration_s"]),
        seed=int(run["seed"]),
        pulses=_section(raw, "pulse_sequence", PulseSequence),
        emission=_section(raw, "emission", EmissionProfile),
        drift=_section(raw, "drift", DriftModel),
        trigger_channel=int(run.get("trigger_channel", 0)),
        name=str(raw.get("name", "")),
    )
    return cfg.validate()


def preset_names() -> list[str]:
    root = resources.files("ionlink") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def read_toml(name_or_path: str | Path) -> tuple[dict, str]:
    """Load a TOML document from a path or a shipped preset name.

    Returns the parsed document and the raw text it came from.
    """
    path = Path(name_or_path)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("ionlink") / "presets" / f"{name_or_path}.toml"
        if not res.is_file():
            raise ConfigError("config", f"no such file or preset: {name_or_path}")
        text = res.read_text()
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"not valid TOML: {exc}") from None


def load_config(name_or_path: str | Path) -> ExperimentConfig:
    raw, _ = read_toml(name_or_path)
    if raw.get("kind", "experiment") != "experiment":
        raise ConfigError("kind", f"expected an experiment config, got {raw.get('kind')!r}")
    return config_from_dict(raw)
