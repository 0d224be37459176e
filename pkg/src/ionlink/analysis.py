"""Trigger-relative histograms, software gating and cycle correlations.

Analysis consumes *event sources*: anything with a ``batches()`` method
yielding :class:`Batch` objects plus ``n_cycles`` and ``channel_map``
attributes. :class:`QttSource` reads ``.qtt`` files in bounded memory;
:class:`SimSource` regenerates a simulated run without ever materialising
its trigger records, which keeps hour-scale runs cheap.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .config import PS_PER_NS, PS_PER_S, ExperimentConfig
from .qtt import QttReader
from .sim import Simulator, trigger_times_ps


@dataclass
class Batch:
    """Detections with their cycle index and time since that cycle's trigger."""

    cycle: np.ndarray
    offset_ps: np.ndarray
    channel: np.ndarray
    trigger_ps: np.ndarray


class QttSource:
    """Re-iterable view of a ``.qtt`` file or byte string.

    Events seen before the first trigger are dropped and tallied in
    ``skipped``.
    """

    def __init__(self, data: str | Path | bytes, chunk_records: int = 1 << 18):
        self._data = data
        self.chunk_records = chunk_records
        with self._open() as fh:
            self.header = QttReader(fh).header
        self.channel_map = dict(self.header.channel_map)
        triggers = self.header.channels_of("trigger")
        if len(triggers) != 1:
            raise ValueError(f"stream must map exactly one trigger channel, found {triggers}")
        self.trigger_channel = triggers[0]
        self.n_cycles = None
        self.skipped = 0

    def _open(self):
        if isinstance(self._data, (bytes, bytearray)):
            return io.BytesIO(self._data)
        return open(self._data, "rb")

    def batches(self) -> Iterator[Batch]:
        count = 0
        last_t = None
        skipped = 0
        with self._open() as fh:
            reader = QttReader(fh, self.chunk_records)
            for arr in reader.chunks():
                ch = arr["channel"]
                t = arr["timestamp_ps"].astype(np.int64)
                is_trig = ch == self.trigger_channel
                pos = np.maximum.accumulate(np.where(is_trig, np.arange(t.size), -1))
                have = pos >= 0
                fallback = last_t if last_t is not None else 0
                t_trig = np.where(have, t[np.maximum(pos, 0)], fallback)
                seen = np.cumsum(is_trig)
                valid = ~is_trig & (have | (last_t is not None))
                skipped += int(np.count_nonzero(~is_trig & ~valid))
                yield Batch(count + seen[valid] - 1, t[valid] - t_trig[valid], ch[valid], t_trig[valid])
                count += int(seen[-1])
                if have[-1]:
                    last_t = int(t[pos[-1]])
        self.n_cycles = count
        self.skipped = skipped


class SimSource:
    """Event source backed directly by the simulator."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.channel_map = config.channel_map
        self.trigger_channel = config.trigger_channel
        self.n_cycles = config.n_cycles
        self.skipped = 0

    def batches(self) -> Iterator[Batch]:
        sim = Simulator(self.config)
        for chunk in sim.chunks():
            yield Batch(chunk.cycle, chunk.offset_ps, chunk.channel,
                        trigger_times_ps(chunk.cycle, sim.rate))


def as_source(obj):
    if hasattr(obj, "batches"):
        return obj
    if isinstance(obj, ExperimentConfig):
        return SimSource(obj)
    return QttSource(obj)


def _block_index(trigger_ps: np.ndarray, block_s: float) -> np.ndarray:
    return (trigger_ps // int(round(block_s * PS_PER_S))).astype(np.int64)


@dataclass
class ArrivalHistogram:
    """Counts of detection time after the most recent trigger."""

    start_ns: float
    bin_width_ns: float
    counts: np.ndarray
    cycles: int = 0
    skipped: int = 0

    def __post_init__(self):
        if not self.bin_width_ns > 0:
            raise ValueError("bin width must be positive")
        self.counts = np.asarray(self.counts)

    @property
    def edges(self) -> np.ndarray:
        return self.start_ns + self.bin_width_ns * np.arange(self.counts.size + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.start_ns + self.bin_width_ns * (np.arange(self.counts.size) + 0.5)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def crop(self, start_ns: float, stop_ns: float) -> "ArrivalHistogram":
        lo = int(round((start_ns - self.start_ns) / self.bin_width_ns))
        hi = int(round((stop_ns - self.start_ns) / self.bin_width_ns))
        lo, hi = max(lo, 0), min(hi, self.counts.size)
        return ArrivalHistogram(self.start_ns + lo * self.bin_width_ns, self.bin_width_ns,
                                self.counts[lo:hi].copy(), self.cycles, self.skipped)

    def level(self, start_ns: float, width_ns: float) -> float:
        """Mean counts per bin over ``[start_ns, start_ns + width_ns)``."""
        part = self.crop(start_ns, start_ns + width_ns)
        if part.counts.size == 0:
            raise ValueError("level window lies outside the histogram")
        return float(part.counts.mean())


def _hist_indices(offset_ps: np.ndarray, start_ns: float, bin_width_ns: float, n_bins: int):
    rel = offset_ps / PS_PER_NS - start_ns
    idx = np.floor(rel / bin_width_ns).astype(np.int64)
    ok = (rel >= 0) & (idx < n_bins)
    return idx, ok


def _n_bins(window: tuple[float, float], bin_width_ns: float) -> int:
    start, stop = window
    if not stop > start:
        raise ValueError("histogram window must have stop > start")
    return int(math.ceil((stop - start) / bin_width_ns - 1e-9))


def block_histograms(source, channel: int, bin_width_ns: float,
                     window: tuple[float, float], block_s: float | None = None
                     ) -> dict[int, ArrivalHistogram]:
    """Arrival histograms of one channel, split into time blocks.

    With ``block_s=None`` everything lands in block 0. Single pass over the
    source; memory is one histogram per block.
    """
    source = as_source(source)
    n_bins = _n_bins(window, bin_width_ns)
    acc: dict[int, np.ndarray] = {}
    for b in source.batches():
        sel = b.channel == channel
        if not np.any(sel):
            continue
        idx, ok = _hist_indices(b.offset_ps[sel], window[0], bin_width_ns, n_bins)
        if block_s is None:
            blocks = np.zeros(idx.size, dtype=np.int64)
        else:
            blocks = _block_index(b.trigger_ps[sel], block_s)
        idx, blocks = idx[ok], blocks[ok]
        for blk in np.unique(blocks):
            counts = np.bincount(idx[blocks == blk], minlength=n_bins)
            if blk in acc:
                acc[int(blk)] += counts
            else:
                acc[int(blk)] = counts.astype(np.int64)
    return {blk: ArrivalHistogram(window[0], bin_width_ns, counts, source.n_cycles or 0, source.skipped)
            for blk, counts in sorted(acc.items())}


def build_histogram(source, channel: int, bin_width_ns: float,
                    window: tuple[float, float]) -> ArrivalHistogram:
    """Histogram of detection times on ``channel`` relative to the last trigger."""
    source = as_source(source)
    blocks = block_histograms(source, channel, bin_width_ns, window)
    if not blocks:
        n_bins = _n_bins(window, bin_width_ns)
        return ArrivalHistogram(window[0], bin_width_ns, np.zeros(n_bins, dtype=np.int64),
                                source.n_cycles or 0, source.skipped)
    return blocks[0]


def find_peak(hist: ArrivalHistogram, half_width_ns: float) -> float:
    """Photon-peak position of a histogram, in ns after the trigger.

    The most populated bin (after light boxcar smoothing) locates the peak;
    the centroid of the above-baseline counts within ``half_width_ns`` of it
    gives the reported position.
    """
    counts = hist.counts.astype(float)
    if counts.sum() <= 0:
        raise ValueError("empty reference histogram")
    k = max(1, int(round(4.0 / hist.bin_width_ns)))
    smooth = np.convolve(counts, np.ones(k) / k, mode="same") if k > 1 else counts
    centers = hist.centers
    guess = centers[int(np.argmax(smooth))]
    excess = np.clip(counts - np.median(counts), 0.0, None)
    near = np.abs(centers - guess) <= half_width_ns
    if excess[near].sum() <= 0:
        return float(guess)
    return float(np.sum(centers[near] * excess[near]) / excess[near].sum())


@dataclass(frozen=True)
class ChannelGate:
    """Gate geometry of one channel relative to the reference peak.

    The signal window is centred on ``peak + delay_ns``; the noise window
    starts ``noise_offset_ns`` after the signal window start.
    """

    signal_width_ns: float
    noise_width_ns: float | None = None
    delay_ns: float = 0.0
    noise_offset_ns: float = 380.0

    def __post_init__(self):
        if self.noise_width_ns is None:
            object.__setattr__(self, "noise_width_ns", self.signal_width_ns)
        if not (self.signal_width_ns > 0 and self.noise_width_ns > 0):
            raise ValueError("gate widths must be positive")
        disjoint = (self.noise_offset_ns >= self.signal_width_ns
                    or self.noise_offset_ns + self.noise_width_ns <= 0)
        if not disjoint:
            raise ValueError("signal and noise windows overlap")


@dataclass
class GateSet:
    reference_channel: int
    block_s: float
    block_peaks_ns: dict[int, float]
    channels: dict[int, ChannelGate]

    def windows(self, channel: int, block: int) -> tuple[float, float, float, float]:
        """(signal start, signal width, noise start, noise width) in ns."""
        gate = self.channels[channel]
        peak = self.block_peaks_ns[block]
        sig = peak + gate.delay_ns - gate.signal_width_ns / 2.0
        return sig, gate.signal_width_ns, sig + gate.noise_offset_ns, gate.noise_width_ns

    def _lookup(self, blocks: np.ndarray) -> np.ndarray:
        keys = np.array(sorted(self.block_peaks_ns), dtype=np.int64)
        vals = np.array([self.block_peaks_ns[k] for k in keys.tolist()])
        pos = np.searchsorted(keys, blocks)
        pos = np.minimum(pos, keys.size - 1)
        missing = keys[pos] != blocks
        if np.any(missing):
            raise KeyError(f"no reference events in block {int(blocks[missing][0])}")
        return vals[pos]


def locate_gates(reference: Mapping[int, ArrivalHistogram] | ArrivalHistogram,
                 channels: Mapping[int, ChannelGate], reference_channel: int,
                 block_s: float = 3600.0) -> GateSet:
    """Place the gates of every channel from per-block reference histograms."""
    if isinstance(reference, ArrivalHistogram):
        reference = {0: reference}
    if reference_channel not in channels:
        raise KeyError(f"reference channel {reference_channel} has no gate")
    half = channels[reference_channel].signal_width_ns / 2.0
    peaks = {}
    for block, hist in reference.items():
        if hist.total == 0:
            raise ValueError(f"block {block} has no reference events")
        peaks[int(block)] = find_peak(hist, half)
    if not peaks:
        raise ValueError("no reference events at all")
    return GateSet(reference_channel, block_s, peaks, dict(channels))


@dataclass
class GatedCounts:
    """Signal- and noise-window tallies (with multiplicity) over ``cycles`` triggers."""

    signal: dict[int, int]
    noise: dict[int, int]
    cycles: int

    def __post_init__(self):
        if self.cycles < 0 or any(v < 0 for v in (*self.signal.values(), *self.noise.values())):
            raise ValueError("counts must be non-negative")


@dataclass
class CycleTable:
    """Sorted indices of cycles with at least one signal-window click, per channel."""

    cycles_with_signal: dict[int, np.ndarray]
    n_cycles: int


def gated_counts(source, gates: GateSet) -> tuple[GatedCounts, CycleTable]:
    """Classify every detection as signal, noise or ignored."""
    source = as_source(source)
    sig = {ch: 0 for ch in gates.channels}
    noi = {ch: 0 for ch in gates.channels}
    hit_lists: dict[int, list[np.ndarray]] = {ch: [] for ch in gates.channels}
    for b in source.batches():
        if b.cycle.size == 0:
            continue
        peaks = gates._lookup(_block_index(b.trigger_ps, gates.block_s))
        rel = b.offset_ps / PS_PER_NS
        for ch, gate in gates.channels.items():
            sel = b.channel == ch
            if not np.any(sel):
                continue
            start = peaks[sel] + gate.delay_ns - gate.signal_width_ns / 2.0
            t = rel[sel]
            in_sig = (t >= start) & (t < start + gate.signal_width_ns)
            nstart = start + gate.noise_offset_ns
            in_noise = (t >= nstart) & (t < nstart + gate.noise_width_ns)
            sig[ch] += int(np.count_nonzero(in_sig))
            noi[ch] += int(np.count_nonzero(in_noise))
            hit_lists[ch].append(b.cycle[sel][in_sig])
    n = int(source.n_cycles or 0)
    table = {ch: np.unique(np.concatenate(v)) if v else np.zeros(0, np.int64)
             for ch, v in hit_lists.items()}
    return GatedCounts(sig, noi, n), CycleTable(table, n)


def g2(table: CycleTable, a: int, b: int, n_max: int) -> np.ndarray:
    """Coincidences G(n) for n = -n_max .. n_max.

    G(n) counts cycle pairs (i, j) with a signal click on ``a`` in cycle i and
    on ``b`` in cycle j = i + n. Index ``n + n_max`` of the result holds G(n).
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    for ch in (a, b):
        if ch not in table.cycles_with_signal:
            raise KeyError(f"unknown channel {ch}")
    A = table.cycles_with_signal[a]
    B = table.cycles_with_signal[b]
    out = np.zeros(2 * n_max + 1, dtype=np.int64)
    if A.size == 0 or B.size == 0:
        return out
    for i, n in enumerate(range(-n_max, n_max + 1)):
        shifted = A + n
        pos = np.minimum(np.searchsorted(B, shifted), B.size - 1)
        out[i] = np.count_nonzero(B[pos] == shifted)
    return out


def symmetrize(G: Sequence[int]) -> np.ndarray:
    """Fold G(n) onto n >= 0: G(0) unchanged, mean of G(n) and G(-n) elsewhere."""
    G = np.asarray(G, dtype=float)
    if G.size % 2 != 1:
        raise ValueError("need a symmetric lag range")
    n_max = G.size // 2
    out = np.empty(n_max + 1)
    out[0] = G[n_max]
    out[1:] = 0.5 * (G[n_max + 1:] + G[n_max - 1::-1][: n_max])
    return out


def _pair(counts: GatedCounts, a: int, b: int):
    if counts.cycles <= 0:
        raise ZeroDivisionError("no cycles recorded (R = 0)")
    return counts.signal[a], counts.noise[a], counts.signal[b], counts.noise[b], counts.cycles


def theory_g2_zero(counts: GatedCounts, a: int, b: int) -> float:
    """Coincidences expected at n = 0 from noise alone, for a single-photon source."""
    c1s, c1n, c2s, c2n, R = _pair(counts, a, b)
    return (c1s * c2n + c1n * c2s - c1n * c2n) / R


def theory_g2_nonzero(counts: GatedCounts, a: int, b: int) -> float:
    """Coincidences expected at n != 0 for uncorrelated cycles."""
    c1s, _, c2s, _, R = _pair(counts, a, b)
    return c1s * c2s / R


def snr(counts: GatedCounts, gates: GateSet | Mapping[int, ChannelGate]) -> dict[int, float | None]:
    """Per-channel (C_signal - B) / B with B the noise tally rescaled to the signal gate.

    Channels without any noise counts get ``None``.
    """
    geometry = gates.channels if isinstance(gates, GateSet) else gates
    out = {}
    for ch, gate in geometry.items():
        if not gate.noise_width_ns > 0:
            raise ValueError("noise window width must be positive")
        background = counts.noise[ch] * gate.signal_width_ns / gate.noise_width_ns
        out[ch] = None if background == 0 else (counts.signal[ch] - background) / background
    return out


@dataclass
class CorrelationResult:
    channel_a: int
    channel_b: int
    raw: np.ndarray
    theory_zero: float
    theory_nonzero: float
    snr: dict[int, float | None] = field(default_factory=dict)
    z: float | None = None

    @property
    def n_max(self) -> int:
        return self.raw.size // 2

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1)

    @property
    def symmetrized(self) -> np.ndarray:
        return symmetrize(self.raw)

    @property
    def g0(self) -> int:
        return int(self.raw[self.n_max])

    @property
    def mean_nonzero(self) -> float:
        return float(self.symmetrized[1:].mean())


def significance(result: CorrelationResult | Sequence[int]) -> float:
    """Separation of G(0) below the mean n != 0 level, in Poisson standard errors."""
    raw = np.asarray(result.raw if isinstance(result, CorrelationResult) else result, dtype=float)
    n_max = raw.size // 2
    if n_max < 5:
        raise ValueError("significance needs n_max >= 5")
    if not np.any(raw):
        raise ValueError("all-zero correlation series")
    g0 = raw[n_max]
    sym = symmetrize(raw)
    mean = sym[1:].mean()
    # the mean over n != 0 averages 2 * n_max raw counts
    var_mean = mean / (2 * n_max)
    return float((mean - g0) / math.sqrt(g0 + var_mean))


def correlate(table: CycleTable, counts: GatedCounts, gates: GateSet, a: int, b: int,
              n_max: int) -> CorrelationResult:
    raw = g2(table, a, b, n_max)
    result = CorrelationResult(a, b, raw, theory_g2_zero(counts, a, b),
                               theory_g2_nonzero(counts, a, b))
    rates = snr(counts, gates)
    result.snr = {a: rates[a], b: rates[b]}
    if n_max >= 5 and np.any(raw):
        result.z = significance(result)
    return result


def pulse_shape_overlap(histograms: Sequence[ArrivalHistogram],
                        backgrounds: Sequence[float]) -> np.ndarray:
    """Pairwise L1 distances between background-subtracted, area-normalised shapes.

    ``backgrounds`` are flat per-bin levels (for example from
    :meth:`ArrivalHistogram.level` over a noise window).
    """
    if len(histograms) != len(backgrounds):
        raise ValueError("one background level per histogram")
    shapes = []
    ref = histograms[0]
    for hist, bg in zip(histograms, backgrounds):
        if hist.counts.size != ref.counts.size or not np.isclose(hist.bin_width_ns, ref.bin_width_ns):
            raise ValueError("histograms must share a common binning")
        net = hist.counts.astype(float) - bg
        area = net.sum()
        if not area > 0:
            raise ValueError("histogram has no area left after background subtraction")
        shapes.append(net / area)
    out = np.zeros((len(shapes), len(shapes)))
    for i, j in combinations(range(len(shapes)), 2):
        out[i, j] = out[j, i] = np.abs(shapes[i] - shapes[j]).sum()
    return out
