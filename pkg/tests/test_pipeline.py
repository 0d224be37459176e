import json

import numpy as np
import pytest

from ionlink.budget import budget_from_dict, load_budget
from ionlink.config import ConfigError, load_config
from ionlink.photonics import budget_product
from ionlink.pipeline import AnalysisConfig, RunManifest, analyze, load_analysis_config, write_outputs
from ionlink.reproduce import reproduce
from ionlink.sim import simulate_bytes


def test_noiseless_g0_is_zero():
    cfg = load_config("paper-493-noiseless").with_overrides(duration_s=5.0)
    report = analyze(cfg)
    corr = report.correlation(2)
    assert corr.g0 == 0 and corr.theory_zero == 0.0
    assert corr.mean_nonzero > 0


def test_outputs(tmp_path):
    cfg = load_config("paper-493").with_overrides(duration_s=2.0)
    report = analyze(simulate_bytes(cfg))
    paths = write_outputs(report, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["g2_1_2.csv", "g2_1_2_symmetrized.csv", "histograms.csv", "summary.json"]
    rows = (tmp_path / "g2_1_2.csv").read_text().splitlines()
    assert rows[0] == "n,G,theory" and len(rows) == 22
    corr = report.correlation(2)
    theory = {int(r.split(",")[0]): float(r.split(",")[2]) for r in rows[1:]}
    assert theory[0] == pytest.approx(corr.theory_zero)
    assert theory[3] == pytest.approx(corr.theory_nonzero)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["cycles_R"] == cfg.n_cycles
    assert summary["correlations"][0]["G0"] == corr.g0
    hist = np.loadtxt(tmp_path / "histograms.csv", delimiter=",", skiprows=1)
    assert hist[:, 1].sum() == report.histograms[1].total


def test_outputs_deterministic(tmp_path):
    data = simulate_bytes(load_config("paper-780").with_overrides(duration_s=1.0))
    for d in ("a", "b"):
        write_outputs(analyze(data), tmp_path / d)
    for name in ("histograms.csv", "g2_1_2.csv", "g2_1_2_symmetrized.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_analysis_config_file(tmp_path):
    path = tmp_path / "a.toml"
    path.write_text('kind = "analysis"\nn_max = 6\n[signal_widths_ns]\n3 = 30.0\n')
    acfg = load_analysis_config(path)
    assert acfg.n_max == 6 and acfg.signal_widths_ns == {3: 30.0}
    assert load_analysis_config("analysis-default").n_max == 10


@pytest.mark.parametrize("text,key", [
    ('kind = "analysis"\nbogus = 1\n', "bogus"),
    ('kind = "analysis"\nn_max = 0\n', "n_max"),
    ('kind = "experiment"\n', "kind"),
])
def test_analysis_config_errors(tmp_path, text, key):
    path = tmp_path / "a.toml"
    path.write_text(text)
    with pytest.raises(ConfigError) as exc:
        load_analysis_config(path)
    assert exc.value.key == key


def test_reference_channel_required_without_single_pmt():
    with pytest.raises(ConfigError):
        AnalysisConfig().gates_for({0: "trigger", 2: "apd", 3: "snspd"})
    ref, gates = AnalysisConfig(reference_channel=2).gates_for({0: "trigger", 2: "apd", 3: "snspd"})
    assert ref == 2 and gates[3].signal_width_ns == 36.0


def test_manifest_round_trip(tmp_path):
    m = RunManifest("simulate", "paper-493", "ab" * 32, 7, ["x.qtt"], wall_clock_s=0.5)
    m.write(tmp_path / "m.json")
    assert RunManifest.read(tmp_path / "m.json") == m


class TestBudgetFile:
    def test_paper_budget(self):
        b = load_budget("paper-budget")
        assert b.stage_ratio("end to end") == pytest.approx(0.0066, abs=0.0002)
        assert b.stage_ratio("first stage") == pytest.approx(0.195, rel=0.05)
        assert budget_product(b.chain("1534")) == pytest.approx(6.2e-6, rel=0.02)

    def test_butt_coupling_doubles_780(self):
        chain = load_budget("paper-budget").chain("780")
        assert budget_product(chain.without("fiber butt-coupling")) == pytest.approx(2 * budget_product(chain))

    def test_identity_budget(self):
        b = budget_from_dict({"chains": [{"label": "id", "factors": [{"label": "a", "value": 1.0}]}]})
        assert budget_product(b.chain("id")) == 1.0

    def test_out_of_range_factor(self):
        with pytest.raises(ConfigError) as exc:
            budget_from_dict({"chains": [{"label": "x", "factors": [{"label": "a", "value": 1.2}]}]})
        assert "value" in exc.value.key

    def test_unknown_tap(self):
        raw = {"taps": [{"label": "a", "per_shot": 0.1, "detector_efficiency": 0.5}],
               "stages": [{"label": "s", "from": "a", "to": "b"}]}
        with pytest.raises(ConfigError):
            budget_from_dict(raw)

    def test_report_sections(self):
        sections = load_budget("paper-budget").report()
        assert [t for t, _ in sections] == ["chain 780", "chain 1534", "stage conversion ratios"]


def test_reproduce_budget_passes():
    assert reproduce("budget").passed


def test_reproduce_unknown():
    with pytest.raises(KeyError):
        reproduce("fig9")
