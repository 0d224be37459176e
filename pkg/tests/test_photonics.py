import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ionlink.photonics import (ETALON, ION_LINE, BudgetEntry, ConversionCurve, FilterSpec, LinkBudget,
                               LorentzianLine, NoiseScenario, budget_breakdown, budget_product,
                               conversion_efficiency, filter_transmission, noise_scale_for_scenario,
                               stage_conversion_ratio)


def numeric_overlap(photon_fwhm, filter_fwhm, peak, detuning=0.0):
    """Oracle: integrate a unit-area Lorentzian line against a Lorentzian passband."""
    g = photon_fwhm / 2.0

    def line(f):
        return (g / math.pi) / ((f - detuning) ** 2 + g * g)

    def passband(f):
        return peak / (1.0 + (2.0 * f / filter_fwhm) ** 2)

    val, _ = integrate.quad(lambda f: line(f) * passband(f), -np.inf, np.inf, limit=500)
    return val


class TestConversionEfficiency:
    def test_zero_power(self):
        assert conversion_efficiency(0.0, ConversionCurve(0.36, 120.0)) == 0.0

    def test_peak(self):
        assert conversion_efficiency(120.0, ConversionCurve(0.36, 120.0)) == pytest.approx(0.36, rel=1e-14)

    def test_quarter_power_is_half_peak(self):
        assert conversion_efficiency(30.0, ConversionCurve(0.36, 120.0)) == pytest.approx(0.18, rel=1e-12)

    def test_negative_power_rejected(self):
        with pytest.raises(ValueError):
            conversion_efficiency(-1.0, ConversionCurve(0.36, 120.0))

    @given(st.floats(0.0, 1.0), st.floats(1e-3, 1e4), st.floats(0.0, 1.0))
    def test_phase_symmetry(self, eta, p_max, frac):
        # phase theta and pi - theta give the same efficiency
        curve = ConversionCurve(eta, p_max)
        theta = frac * math.pi / 2
        p1 = p_max * (2 * theta / math.pi) ** 2
        p2 = p_max * (2 * (math.pi - theta) / math.pi) ** 2
        assert conversion_efficiency(p1, curve) == pytest.approx(conversion_efficiency(p2, curve), abs=1e-12)

    @given(st.floats(0.0, 1.0), st.floats(1e-3, 1e4), st.floats(0.0, 1.0))
    def test_bounded_below_p_max(self, eta, p_max, frac):
        value = conversion_efficiency(frac * p_max, ConversionCurve(eta, p_max))
        assert 0.0 <= value <= eta + 1e-15

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            ConversionCurve(1.2, 10.0)
        with pytest.raises(ValueError):
            ConversionCurve(0.3, 0.0)


class TestFilterTransmission:
    def test_laser_limit(self):
        assert filter_transmission(LorentzianLine(0.0), FilterSpec(46.1, 0.26)) == pytest.approx(0.26)

    def test_ion_photons_through_etalon(self):
        assert filter_transmission(ION_LINE, ETALON) == pytest.approx(0.197, abs=0.005)

    def test_closed_form_on_resonance(self):
        value = filter_transmission(LorentzianLine(14.8), FilterSpec(46.1, 0.26))
        assert value == pytest.approx(0.26 * 46.1 / (46.1 + 14.8), rel=1e-14)

    def test_far_detuned(self):
        assert filter_transmission(LorentzianLine(14.8, 1e6), ETALON) < 1e-7

    @pytest.mark.parametrize("photon,filt,peak,det", [
        (14.8, 46.1, 0.26, 0.0), (14.8, 46.1, 0.26, 20.0), (5.0, 100.0, 1.0, -30.0), (40.0, 10.0, 0.5, 7.0),
    ])
    def test_matches_numeric_overlap(self, photon, filt, peak, det):
        expected = numeric_overlap(photon, filt, peak, det)
        assert filter_transmission(LorentzianLine(photon, det), FilterSpec(filt, peak)) == pytest.approx(expected, rel=1e-6)

    @given(st.floats(0.0, 200.0), st.floats(0.0, 200.0), st.floats(0.1, 200.0))
    def test_monotone_in_linewidth(self, w1, w2, filt):
        lo, hi = sorted((w1, w2))
        f = FilterSpec(filt, 0.5)
        assert filter_transmission(LorentzianLine(hi), f) <= filter_transmission(LorentzianLine(lo), f) + 1e-15

    @given(st.floats(-500.0, 500.0), st.floats(-500.0, 500.0))
    def test_monotone_in_detuning(self, d1, d2):
        near, far = sorted((abs(d1), abs(d2)))
        assert (filter_transmission(LorentzianLine(14.8, far), ETALON)
                <= filter_transmission(LorentzianLine(14.8, near), ETALON) + 1e-15)

    def test_bad_filter(self):
        with pytest.raises(ValueError):
            FilterSpec(0.0)
        with pytest.raises(ValueError):
            LorentzianLine(-1.0)


class TestNoiseScenarios:
    def test_table(self):
        assert noise_scale_for_scenario(1589) == 1.0
        assert noise_scale_for_scenario(1640) == pytest.approx(0.1)
        assert noise_scale_for_scenario(1930) <= 1e-3

    def test_scenario_object(self):
        assert noise_scale_for_scenario(NoiseScenario(1640.0, 1515.0, 0.1)) == pytest.approx(0.1)

    def test_unknown(self):
        with pytest.raises(KeyError):
            noise_scale_for_scenario(1700)

    def test_positive_scale_required(self):
        with pytest.raises(ValueError):
            NoiseScenario(1589.0, 1534.0, 0.0)


class TestBudget:
    def test_identity(self):
        assert budget_product(LinkBudget.from_pairs([("a", 1.0), ("b", 1.0)])) == 1.0

    def test_removing_factor(self):
        b = LinkBudget.from_pairs([("a", 0.5), ("b", 0.39), ("c", 0.2)])
        assert budget_product(b.without("b")) == pytest.approx(budget_product(b) / 0.39)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            LinkBudget.from_pairs([("a", 1.5)])
        b = LinkBudget([BudgetEntry("a", 0.5)])
        b.entries.append(BudgetEntry("bad", -0.1))
        with pytest.raises(ValueError):
            budget_product(b)

    def test_empty(self):
        with pytest.raises(ValueError):
            budget_product(LinkBudget())

    def test_breakdown_cumulative(self):
        rows = budget_breakdown(LinkBudget.from_pairs([("a", 0.5), ("b", 0.2)]))
        assert [r.value for r in rows] == pytest.approx([0.5, 0.5, 0.2, 0.1])
        assert rows[0].format().startswith("a\t")

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        pairs = [(str(i), v) for i, v in enumerate(values)]
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        assert budget_product(LinkBudget.from_pairs(shuffled)) == pytest.approx(
            budget_product(LinkBudget.from_pairs(pairs)), rel=1e-12, abs=1e-300)


class TestStageRatio:
    def test_end_to_end(self):
        assert stage_conversion_ratio(1.04e-3, 0.43, 6.18e-6, 0.78, 2.0) == pytest.approx(0.0066, abs=0.0002)

    def test_first_stage(self):
        value = stage_conversion_ratio(1.04e-3, 0.43, 1.23e-4, 0.54, 2.0)
        assert value == pytest.approx(0.188, abs=0.001)
        assert value == pytest.approx(0.195, rel=0.05)

    def test_identity(self):
        assert stage_conversion_ratio(0.2, 0.4, 0.1, 0.2) == pytest.approx(1.0)

    def test_zero_denominator(self):
        with pytest.raises(ZeroDivisionError):
            stage_conversion_ratio(0.0, 0.4, 0.1, 0.2)
        with pytest.raises(ZeroDivisionError):
            stage_conversion_ratio(0.1, 0.4, 0.1, 0.0)

    @settings(max_examples=50)
    @given(st.floats(1e-6, 1.0), st.floats(1e-3, 1.0), st.floats(1e-6, 1.0), st.floats(1e-3, 1.0),
           st.floats(1e-3, 1.0))
    def test_scale_invariance(self, pa, da, pb, db, k):
        base = stage_conversion_ratio(pa, da, pb, db)
        assert stage_conversion_ratio(pa * k, da * k, pb, db) == pytest.approx(base, rel=1e-9)
