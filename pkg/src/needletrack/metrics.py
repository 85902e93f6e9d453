"""Tracking evaluation metrics: center-error statistics, the success curve
over a pixel-threshold grid, its area under curve, and precision at a fixed
threshold. The target is a point, so all metrics use center error rather
than box overlap; the grid and precision threshold are recorded alongside
every report.
"""

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .validation import require

DEFAULT_THRESHOLDS = tuple(range(0, 51))  # pixels, inclusive
PRECISION_THRESHOLD = 20.0  # pixels


@dataclass
class MetricSet:
    n_frames: int
    err_px: float
    err_mm: float
    sd_px: float
    sd_mm: float
    auc: float          # percent
    precision: float    # percent
    thresholds: list
    success: list       # fraction per threshold

    def as_dict(self):
        return asdict(self)


def center_errors(predictions, truth):
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    require(predictions.ndim == 2 and predictions.shape[1] == 2,
            "predictions must be (n, 2) pixel coordinates")
    require(predictions.shape == truth.shape,
            f"prediction/truth length mismatch: {predictions.shape} vs {truth.shape}")
    require(predictions.shape[0] >= 1, "need at least one frame")
    return np.linalg.norm(predictions - truth, axis=1)


def metrics_compute(predictions, truth, mm_per_px, thresholds=DEFAULT_THRESHOLDS,
                    precision_threshold=PRECISION_THRESHOLD):
    """Per-frame center errors aggregated into the full metric set.

    Err is the mean error, SD the population standard deviation, both in
    pixels and millimetres. success(theta) is the fraction of frames with
    error <= theta; AUC is the mean success over the grid times 100 and
    precision the success at the precision threshold times 100.
    """
    errors = center_errors(predictions, truth)
    thresholds = list(thresholds)
    require(len(thresholds) >= 1, "need a non-empty threshold grid")
    require(precision_threshold in thresholds,
            "precision threshold must be on the grid")
    success = [float(np.mean(errors <= theta)) for theta in thresholds]
    precision = success[thresholds.index(precision_threshold)] * 100.0
    return MetricSet(
        n_frames=int(errors.size),
        err_px=float(errors.mean()),
        err_mm=float(errors.mean() * mm_per_px),
        sd_px=float(errors.std()),
        sd_mm=float(errors.std() * mm_per_px),
        auc=float(np.mean(success) * 100.0),
        precision=precision,
        thresholds=thresholds,
        success=success,
    )


@dataclass
class EvalReport:
    split: str
    seed: int
    config_hash: str
    fps: float
    aggregate: MetricSet
    per_sequence: list = field(default_factory=list)  # [{name, metrics}]
    notes: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "split": self.split,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "fps": self.fps,
            "aggregate": self.aggregate.as_dict(),
            "per_sequence": [
                {"name": name, "metrics": m.as_dict()} for name, m in self.per_sequence
            ],
            "notes": self.notes,
        }

    def to_json(self):
        return json.dumps(self.as_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            split=d["split"], seed=d["seed"], config_hash=d["config_hash"],
            fps=d["fps"], aggregate=MetricSet(**d["aggregate"]),
            per_sequence=[(e["name"], MetricSet(**e["metrics"]))
                          for e in d["per_sequence"]],
            notes=d["notes"],
        )

    def write(self, out_dir, name="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.json").write_text(self.to_json())
        with open(out_dir / f"{name}_success.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold_px", "success"])
            for theta, s in zip(self.aggregate.thresholds, self.aggregate.success):
                writer.writerow([theta, repr(s)])
