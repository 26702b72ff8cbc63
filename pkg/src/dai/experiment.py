"""End-to-end helpers: calibration runs, feature extraction per capture, splits and reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .decipher import N_POSITIONS, CalibrationSet, FieldMap, rebind
from .errors import ConfigError
from .qoe import (FEATURES, TARGETS, QoeGear, RandomForestModel, Sample, confusion_matrix, macro_f1,
                  micro_f1)
from .qos import WINDOW_US, QosWindow, extract_windows
from .streamgen import (CALIBRATION_LOSSES, PAPER_GRID, FieldLayout, GenConfig, GroundTruth,
                        NetworkCondition, derive_seed, generate_stream)
from .traffic_core import Capture, media_flow

GEARS = list(QoeGear)


@dataclass
class ExperimentConfig:
    grid: list[NetworkCondition] = field(default_factory=lambda: list(PAPER_GRID))
    per_condition_s: float = 120.0
    seed: int = 0
    out: str = "dai-out"
    window_us: int = WINDOW_US
    calibration_losses: list[float] = field(default_factory=lambda: list(CALIBRATION_LOSSES))
    calibration_s: float = 30.0
    n_positions: int = N_POSITIONS
    constant_threshold: float = 0.99

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: top level must be an object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
        if "grid" in doc:
            try:
                doc["grid"] = [NetworkCondition(**c) for c in doc["grid"]]
            except TypeError as exc:
                raise ConfigError(f"{source}: bad grid entry: {exc}") from exc
        cfg = cls(**doc)
        if not cfg.grid:
            raise ConfigError(f"{source}: grid is empty")
        return cfg

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["grid"] = [asdict(c) for c in self.grid]
        return doc


def calibration_run(seed: int, losses: Sequence[float] = CALIBRATION_LOSSES, duration_s: float = 30.0,
                    layout: FieldLayout | None = None,
                    base: GenConfig | None = None) -> tuple[CalibrationSet, list[GroundTruth], list[Capture]]:
    """Separate sessions at each induced loss rate, no bandwidth cap, starting at the top gear."""
    base = base or GenConfig(start_gear=len(GenConfig().gear_table) - 1)
    layout = layout or base.layout
    captures, truths = [], []
    for i, loss in enumerate(losses):
        cfg = replace(base, duration_s=duration_s, seed=derive_seed(seed, 1000 + i), layout=layout,
                      condition=NetworkCondition(loss_rate=loss))
        cap, truth = generate_stream(cfg)
        captures.append(cap)
        truths.append(truth)
    return CalibrationSet.of(zip(losses, captures)), truths, captures


def capture_windows(capture: Capture, field_map: FieldMap, window_us: int = WINDOW_US,
                    bind: bool = True) -> tuple[FieldMap, list[QosWindow]]:
    _, flow = media_flow(capture)
    fm = rebind(field_map, flow) if bind else field_map
    return fm, extract_windows(flow, fm, window_us)


def stratified_split(groups: Sequence[Sequence[Sample]], train_fraction: float = 0.7,
                     seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Per group (condition), shuffle and send ``train_fraction`` of the samples to training."""
    train, test = [], []
    for i, samples in enumerate(groups):
        rng = np.random.default_rng([seed, i])
        order = rng.permutation(len(samples))
        cut = int(round(train_fraction * len(samples)))
        train.extend(samples[j] for j in sorted(order[:cut]))
        test.extend(samples[j] for j in sorted(order[cut:]))
    return train, test


@dataclass
class TargetReport:
    target: str
    micro_f1: float
    macro_f1: float
    confusion: list[list[int]]
    importances: list[float]
    n: int

    def top_features(self, k: int = 2) -> list[str]:
        order = sorted(range(len(self.importances)), key=lambda i: (-self.importances[i], i))
        return [FEATURES[i] for i in order[:k]]


def evaluate(model: RandomForestModel, samples: Sequence[Sample]) -> tuple[TargetReport, list[tuple]]:
    preds = model.predict_many([s.features for s in samples])
    truth = [s.label.of(model.target) for s in samples]
    report = TargetReport(
        target=model.target,
        micro_f1=micro_f1(preds, truth),
        macro_f1=macro_f1(preds, truth),
        confusion=confusion_matrix(preds, truth, GEARS).tolist(),
        importances=list(model.feature_importances),
        n=len(samples),
    )
    rows = [(s.t_start_us, p.name, t.name) for s, p, t in zip(samples, preds, truth)]
    return report, rows


def report_header() -> list[str]:
    cm_cols = [f"cm_{t.name}_{p.name}" for t in GEARS for p in GEARS]
    return ["target", "n", "micro_f1", "macro_f1", *cm_cols, *[f"imp_{f}" for f in FEATURES]]


def write_report(reports: Sequence[TargetReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(report_header())
        for r in sorted(reports, key=lambda r: TARGETS.index(r.target)):
            flat = [v for row in r.confusion for v in row]
            w.writerow([r.target, r.n, f"{r.micro_f1:.6f}", f"{r.macro_f1:.6f}", *flat,
                        *[f"{v:.6f}" for v in r.importances]])


def write_predictions(rows: Sequence[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_start_us", "predicted", "truth"])
        w.writerows(sorted(rows))
