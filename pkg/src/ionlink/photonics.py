"""Closed-form optics models for the two-stage conversion link.

Frequencies and linewidths are in MHz, pump powers in mW, wavelengths in nm.
All efficiencies and transmissions are dimensionless fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable


def _check_fraction(value: float, name: str) -> None:
    if not math.isfinite(value) or value < 0.0 or value > 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class ConversionCurve:
    """Peak efficiency and the pump power at which it is reached."""

    eta_peak: float
    p_max: float

    def __post_init__(self):
        _check_fraction(self.eta_peak, "eta_peak")
        if not self.p_max > 0:
            raise ValueError(f"p_max must be positive, got {self.p_max!r}")


@dataclass(frozen=True)
class LorentzianLine:
    fwhm: float
    center_detuning: float = 0.0

    def __post_init__(self):
        if not self.fwhm >= 0:
            raise ValueError(f"photon linewidth must be non-negative, got {self.fwhm!r}")


@dataclass(frozen=True)
class FilterSpec:
    """Lorentzian passband; broadband filters are folded into ``peak_transmission``."""

    fwhm: float
    peak_transmission: float = 1.0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError(f"filter fwhm must be positive, got {self.fwhm!r}")
        _check_fraction(self.peak_transmission, "peak_transmission")


# Ion line and final etalon of the second conversion stage.
ION_LINE = LorentzianLine(fwhm=14.8)
ETALON = FilterSpec(fwhm=46.1, peak_transmission=0.26)

QFC1_CURVE_ETA = 0.36
QFC2_CURVE_ETA = 0.15


def conversion_efficiency(p: float, curve: ConversionCurve) -> float:
    """Efficiency of a difference-frequency stage at pump power ``p``.

    Follows ``eta_peak * sin^2((pi/2) * sqrt(p / p_max))``: zero without pump,
    ``eta_peak`` at ``p_max``, and falling again as the stage over-rotates.
    """
    if p < 0:
        raise ValueError(f"pump power must be non-negative, got {p!r}")
    phase = 0.5 * math.pi * math.sqrt(p / curve.p_max)
    return curve.eta_peak * math.sin(phase) ** 2


def filter_transmission(photon: LorentzianLine, filt: FilterSpec) -> float:
    """Fraction of a Lorentzian photon line passed by a Lorentzian filter.

    The overlap integral of two Lorentzians is itself a Lorentzian in the
    detuning with the widths summed, so no quadrature is needed.
    """
    if not filt.fwhm > 0:
        raise ValueError("filter fwhm must be positive")
    if photon.fwhm < 0:
        raise ValueError("photon linewidth must be non-negative")
    width = filt.fwhm + photon.fwhm
    x = 2.0 * photon.center_detuning / width
    return filt.peak_transmission * (filt.fwhm / width) / (1.0 + x * x)


@dataclass(frozen=True)
class NoiseScenario:
    pump_wavelength: float
    target_wavelength: float
    noise_scale: float

    def __post_init__(self):
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")


# Relative anti-Stokes Raman noise of the second stage, normalised to the
# 1589 nm pump. Endpoint factors only; there is no Raman spectrum behind them.
NOISE_SCENARIOS = {
    1589.0: NoiseScenario(1589.0, 1534.0, 1.0),
    1640.0: NoiseScenario(1640.0, 1515.0, 0.1),
    1930.0: NoiseScenario(1930.0, 1310.0, 1e-3),
}


def noise_scale_for_scenario(scenario: NoiseScenario | float) -> float:
    """Look up the tabulated noise factor for a pump wavelength.

    Accepts a :class:`NoiseScenario` or a bare pump wavelength in nm. Matching
    is to within 1 nm of a tabulated pump.
    """
    pump = scenario.pump_wavelength if isinstance(scenario, NoiseScenario) else float(scenario)
    for key, entry in NOISE_SCENARIOS.items():
        if abs(key - pump) <= 1.0:
            return entry.noise_scale
    known = ", ".join(f"{k:g}" for k in NOISE_SCENARIOS)
    raise KeyError(f"no noise scenario for a {pump:g} nm pump (known: {known})")


@dataclass
class BudgetEntry:
    label: str
    value: float
    note: str = ""


@dataclass
class LinkBudget:
    """Ordered chain of efficiency factors along one optical path."""

    entries: list[BudgetEntry] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        for entry in self.entries:
            _check_fraction(entry.value, f"factor {entry.label!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, float]], name: str = "") -> "LinkBudget":
        return cls([BudgetEntry(label, float(value)) for label, value in pairs], name=name)

    def without(self, label: str) -> "LinkBudget":
        kept = [e for e in self.entries if e.label != label]
        if len(kept) == len(self.entries):
            raise KeyError(label)
        return LinkBudget(kept, name=self.name)


@dataclass(frozen=True)
class ReportRow:
    """One structured line of a report: label, value, optional uncertainty."""

    label: str
    value: float
    uncertainty: float | None = None

    def format(self) -> str:
        if self.uncertainty is None:
            return f"{self.label}\t{self.value:.6g}"
        return f"{self.label}\t{self.value:.6g}\t{self.uncertainty:.3g}"


def budget_breakdown(budget: LinkBudget) -> list[ReportRow]:
    """Per-factor rows followed by the running product after each factor."""
    if not budget.entries:
        raise ValueError("budget has no factors")
    rows = []
    running = 1.0
    for entry in budget.entries:
        _check_fraction(entry.value, f"factor {entry.label!r}")
        running *= entry.value
        rows.append(ReportRow(entry.label, entry.value))
        rows.append(ReportRow(f"  cumulative after {entry.label}", running))
    return rows


def budget_product(budget: LinkBudget) -> float:
    if not budget.entries:
        raise ValueError("budget has no factors")
    product = 1.0
    for entry in budget.entries:
        _check_fraction(entry.value, f"factor {entry.label!r}")
        product *= entry.value
    return product


def stage_conversion_ratio(p_a: float, det_a: float, p_b: float, det_b: float,
                           polarization_factor: float = 1.0) -> float:
    """Detector-corrected photon-number ratio between two points of the chain.

    ``p_a``/``p_b`` are per-shot detection probabilities at the two points and
    ``det_a``/``det_b`` the detector efficiencies there. ``polarization_factor``
    of 2 discounts the half of the light with unconvertible polarization.
    """
    for name, value in (("p_a", p_a), ("det_a", det_a), ("p_b", p_b), ("det_b", det_b)):
        if not math.isfinite(value) or value < 0 or value > 1:
            raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    if p_a == 0 or det_a == 0 or det_b == 0:
        raise ZeroDivisionError("stage ratio needs non-zero p_a, det_a and det_b")
    if not polarization_factor > 0:
        raise ValueError("polarization_factor must be positive")
    return polarization_factor * (p_b / det_b) / (p_a / det_a)

