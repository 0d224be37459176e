"""End-to-end analysis of an event source and its file outputs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analysis import (ArrivalHistogram, ChannelGate, CorrelationResult, GatedCounts, GateSet,
                       _block_index, _hist_indices, _n_bins, as_source, correlate, gated_counts,
                       locate_gates, snr)
from .config import ConfigError, read_toml

DEFAULT_WIDTHS_NS = {"pmt": 60.0, "apd": 60.0, "snspd": 36.0}


@dataclass
class AnalysisConfig:
    """Software-gating and correlation settings.

    Signal widths default by detector role (60 ns, 36 ns for the SNSPD).
    The noise window sits ``noise_offset_ns`` after the signal window,
    which with the default 380 ns lands on the same phase of the
    background pulse as the signal window has on the excitation pulse.
    """

    reference_channel: int | None = None
    signal_widths_ns: dict[int, float] = field(default_factory=dict)
    noise_widths_ns: dict[int, float] = field(default_factory=dict)
    channel_delays_ns: dict[int, float] = field(default_factory=dict)
    noise_offset_ns: float = 380.0
    n_max: int = 10
    bin_width_ns: float = 1.0
    histogram_window_ns: tuple[float, float] = (0.0, 2400.0)
    block_s: float = 3600.0

    def validate(self) -> "AnalysisConfig":
        if self.n_max < 1:
            raise ConfigError("n_max", "must be at least 1")
        if not self.bin_width_ns > 0:
            raise ConfigError("bin_width_ns", "must be positive")
        if not self.block_s > 0:
            raise ConfigError("block_s", "must be positive")
        lo, hi = self.histogram_window_ns
        if not hi > lo:
            raise ConfigError("histogram_window_ns", "stop must exceed start")
        return self

    def gates_for(self, channel_map: dict[int, str]) -> tuple[int, dict[int, ChannelGate]]:
        detectors = {ch: role for ch, role in channel_map.items() if role != "trigger"}
        ref = self.reference_channel
        if ref is None:
            pmts = [ch for ch, role in detectors.items() if role == "pmt"]
            if len(pmts) != 1:
                raise ConfigError("reference_channel", "set it explicitly unless exactly one PMT is mapped")
            ref = pmts[0]
        if ref not in detectors:
            raise ConfigError("reference_channel", f"channel {ref} is not a detector in this stream")
        gates = {}
        for ch, role in sorted(detectors.items()):
            width = self.signal_widths_ns.get(ch, DEFAULT_WIDTHS_NS[role])
            gates[ch] = ChannelGate(width, self.noise_widths_ns.get(ch, width),
                                    self.channel_delays_ns.get(ch, 0.0), self.noise_offset_ns)
        return ref, gates


def _int_keys(table: dict, key: str) -> dict[int, float]:
    try:
        return {int(k): float(v) for k, v in table.items()}
    except (TypeError, ValueError):
        raise ConfigError(key, "keys must be channel ids and values numbers") from None


def load_analysis_config(name_or_path: str | Path | None) -> AnalysisConfig:
    if name_or_path is None:
        return AnalysisConfig()
    raw, _ = read_toml(name_or_path)
    if raw.get("kind") != "analysis":
        raise ConfigError("kind", "expected kind = \"analysis\"")
    raw = {k: v for k, v in raw.items() if k not in ("kind", "name")}
    known = {f.name for f in dataclasses.fields(AnalysisConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown key")
    for key in ("signal_widths_ns", "noise_widths_ns", "channel_delays_ns"):
        if key in raw:
            raw[key] = _int_keys(raw[key], key)
    if "histogram_window_ns" in raw:
        raw["histogram_window_ns"] = tuple(float(v) for v in raw["histogram_window_ns"])
    return AnalysisConfig(**raw).validate()


@dataclass
class AnalysisReport:
    histograms: dict[int, ArrivalHistogram]
    gates: GateSet
    counts: GatedCounts
    correlations: list[CorrelationResult]
    snr: dict[int, float | None]
    skipped: int

    @property
    def cycles(self) -> int:
        return self.counts.cycles

    def correlation(self, channel: int) -> CorrelationResult:
        for corr in self.correlations:
            if corr.channel_b == channel:
                return corr
        raise KeyError(channel)

    def summary(self) -> dict[str, Any]:
        def num(x):
            return None if x is None else float(x)

        return {
            "cycles_R": self.counts.cycles,
            "skipped_before_first_trigger": self.skipped,
            "reference_channel": self.gates.reference_channel,
            "block_s": self.gates.block_s,
            "reference_peak_ns": {str(k): round(v, 4) for k, v in self.gates.block_peaks_ns.items()},
            "channels": {
                str(ch): {"C_signal": self.counts.signal[ch], "C_noise": self.counts.noise[ch],
                          "signal_width_ns": g.signal_width_ns, "noise_width_ns": g.noise_width_ns,
                          "snr": num(self.snr[ch])}
                for ch, g in self.gates.channels.items()
            },
            "correlations": [
                {"channel_a": c.channel_a, "channel_b": c.channel_b, "n_max": c.n_max,
                 "G0": c.g0, "mean_G_nonzero": c.mean_nonzero,
                 "theory_G0": c.theory_zero, "theory_G_nonzero": c.theory_nonzero,
                 "z": num(c.z)}
                for c in self.correlations
            ],
        }


def _first_pass(source, cfg: AnalysisConfig, reference: int, channels: list[int]):
    window = cfg.histogram_window_ns
    n_bins = _n_bins(window, cfg.bin_width_ns)
    totals = {ch: np.zeros(n_bins, dtype=np.int64) for ch in channels}
    ref_blocks: dict[int, np.ndarray] = {}
    for b in source.batches():
        idx, ok = _hist_indices(b.offset_ps, window[0], cfg.bin_width_ns, n_bins)
        for ch in channels:
            sel = ok & (b.channel == ch)
            if np.any(sel):
                totals[ch] += np.bincount(idx[sel], minlength=n_bins)
        sel = ok & (b.channel == reference)
        if np.any(sel):
            blocks = _block_index(b.trigger_ps[sel], cfg.block_s)
            ref_idx = idx[sel]
            for blk in np.unique(blocks).tolist():
                counts = np.bincount(ref_idx[blocks == blk], minlength=n_bins)
                if blk in ref_blocks:
                    ref_blocks[blk] += counts
                else:
                    ref_blocks[blk] = counts.astype(np.int64)
    n = int(source.n_cycles or 0)
    hists = {ch: ArrivalHistogram(window[0], cfg.bin_width_ns, c, n, source.skipped)
             for ch, c in totals.items()}
    blocks = {blk: ArrivalHistogram(window[0], cfg.bin_width_ns, c, n)
              for blk, c in sorted(ref_blocks.items())}
    return hists, blocks


def analyze(source, cfg: AnalysisConfig | None = None) -> AnalysisReport:
    """Histograms, drift-tracked gates, tallies, G(n), theory and SNR for one source.

    Correlations pair the reference channel with every other detector.
    """
    cfg = (cfg or AnalysisConfig()).validate()
    source = as_source(source)
    reference, channel_gates = cfg.gates_for(source.channel_map)
    hists, ref_blocks = _first_pass(source, cfg, reference, sorted(channel_gates))
    if not ref_blocks:
        raise ValueError(f"reference channel {reference} recorded no events")
    gates = locate_gates(ref_blocks, channel_gates, reference, cfg.block_s)
    counts, table = gated_counts(source, gates)
    correlations = [correlate(table, counts, gates, reference, ch, cfg.n_max)
                    for ch in sorted(channel_gates) if ch != reference]
    return AnalysisReport(hists, gates, counts, correlations, snr(counts, gates), source.skipped)


def _fmt(x) -> str:
    if x is None:
        return "undefined"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def write_outputs(report: AnalysisReport, out_dir: str | Path) -> list[Path]:
    """Write histogram, G(n) and summary files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "histograms.csv"
    chans = sorted(report.histograms)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_start_ns"] + [f"ch{ch}" for ch in chans])
        first = report.histograms[chans[0]]
        for i, edge in enumerate(first.edges[:-1]):
            w.writerow([_fmt(float(edge))] + [_fmt(report.histograms[ch].counts[i]) for ch in chans])
    written.append(path)

    for corr in report.correlations:
        tag = f"{corr.channel_a}_{corr.channel_b}"
        path = out / f"g2_{tag}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "G", "theory"])
            for n, g in zip(corr.lags.tolist(), corr.raw.tolist()):
                w.writerow([n, g, _fmt(corr.theory_zero if n == 0 else corr.theory_nonzero)])
        written.append(path)
        path = out / f"g2_{tag}_symmetrized.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "G_symmetrized", "sigma", "theory"])
            for n, g in enumerate(corr.symmetrized.tolist()):
                # a symmetrised point averages two Poisson counts
                sigma = np.sqrt(g) if n == 0 else np.sqrt(g / 2.0)
                w.writerow([n, _fmt(g), _fmt(sigma), _fmt(corr.theory_zero if n == 0 else corr.theory_nonzero)])
        written.append(path)

    path = out / "summary.json"
    path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    config_digest: str | None
    seed: int | None
    outputs: list[str]
    inputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock_s: float = 0.0

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
