"""Budget files: factor chains, detection taps and stage ratios."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, read_toml
from .photonics import (BudgetEntry, LinkBudget, ReportRow, budget_breakdown, budget_product,
                        stage_conversion_ratio)


@dataclass(frozen=True)
class Tap:
    label: str
    per_shot: float
    detector_efficiency: float


@dataclass(frozen=True)
class Stage:
    label: str
    source: str
    target: str
    polarization_factor: float = 1.0


@dataclass
class BudgetFile:
    chains: list[LinkBudget] = field(default_factory=list)
    taps: dict[str, Tap] = field(default_factory=dict)
    stages: list[Stage] = field(default_factory=list)
    name: str = ""

    def chain(self, label: str) -> LinkBudget:
        for c in self.chains:
            if c.name == label:
                return c
        raise KeyError(label)

    def stage_ratio(self, stage: Stage | str) -> float:
        if isinstance(stage, str):
            stage = next((s for s in self.stages if s.label == stage), None)
            if stage is None:
                raise KeyError(stage)
        a, b = self.taps[stage.source], self.taps[stage.target]
        return stage_conversion_ratio(a.per_shot, a.detector_efficiency, b.per_shot,
                                      b.detector_efficiency, stage.polarization_factor)

    def report(self) -> list[tuple[str, list[ReportRow]]]:
        """Titled sections: one breakdown per chain, then the stage ratios."""
        sections = []
        for c in self.chains:
            rows = budget_breakdown(c)
            rows.append(ReportRow("per-shot probability", budget_product(c)))
            sections.append((f"chain {c.name}", rows))
        if self.stages:
            sections.append(("stage conversion ratios",
                             [ReportRow(s.label, self.stage_ratio(s)) for s in self.stages]))
        return sections


def _require(entry: dict, keys: tuple[str, ...], where: str) -> None:
    for key in keys:
        if key not in entry:
            raise ConfigError(f"{where}.{key}", "missing required key")


def budget_from_dict(raw: dict) -> BudgetFile:
    out = BudgetFile(name=str(raw.get("name", "")))
    for i, c in enumerate(raw.get("chains", [])):
        _require(c, ("label", "factors"), f"chains[{i}]")
        entries = []
        for j, f in enumerate(c["factors"]):
            where = f"chains[{i}].factors[{j}]"
            _require(f, ("label", "value"), where)
            value = float(f["value"])
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{where}.value", f"factor {f['label']!r} out of range [0, 1]")
            entries.append(BudgetEntry(f["label"], value, f.get("note", "")))
        out.chains.append(LinkBudget(entries, name=c["label"]))
    for i, t in enumerate(raw.get("taps", [])):
        _require(t, ("label", "per_shot", "detector_efficiency"), f"taps[{i}]")
        for key in ("per_shot", "detector_efficiency"):
            if not 0.0 < float(t[key]) <= 1.0:
                raise ConfigError(f"taps[{i}].{key}", "must lie in (0, 1]")
        out.taps[t["label"]] = Tap(t["label"], float(t["per_shot"]), float(t["detector_efficiency"]))
    for i, s in enumerate(raw.get("stages", [])):
        _require(s, ("label", "from", "to"), f"stages[{i}]")
        for key in ("from", "to"):
            if s[key] not in out.taps:
                raise ConfigError(f"stages[{i}].{key}", f"unknown tap {s[key]!r}")
        out.stages.append(Stage(s["label"], s["from"], s["to"], float(s.get("polarization_factor", 1.0))))
    if not (out.chains or out.stages):
        raise ConfigError("chains", "budget defines neither chains nor stages")
    return out


def load_budget(name_or_path: str | Path) -> BudgetFile:
    raw, _ = read_toml(name_or_path)
    if raw.get("kind") != "budget":
        raise ConfigError("kind", "expected kind = \"budget\"")
    return budget_from_dict(raw)
