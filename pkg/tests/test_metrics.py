import json

import numpy as np
import pytest

from needletrack import metrics as mt
from needletrack.validation import ContractViolation


def naive_metrics(predictions, truth, mm_per_px):
    """Independent loop-based reference for the full metric set."""
    errs = []
    for (px, py), (tx, ty) in zip(predictions, truth):
        errs.append(((px - tx) ** 2 + (py - ty) ** 2) ** 0.5)
    n = len(errs)
    mean = sum(errs) / n
    var = sum((e - mean) ** 2 for e in errs) / n
    success = []
    for theta in range(51):
        success.append(sum(1 for e in errs if e <= theta) / n)
    return {
        "err_px": mean,
        "err_mm": mean * mm_per_px,
        "sd_px": var ** 0.5,
        "sd_mm": (var ** 0.5) * mm_per_px,
        "auc": sum(success) / len(success) * 100.0,
        "precision": success[20] * 100.0,
        "success": success,
    }


def test_perfect_predictions():
    pts = np.random.default_rng(0).uniform(0, 200, size=(30, 2))
    m = mt.metrics_compute(pts, pts, mm_per_px=0.15)
    assert m.err_px == 0 and m.sd_px == 0 and m.auc == 100.0 and m.precision == 100.0


def test_constant_ten_px_error():
    truth = np.zeros((40, 2))
    preds = truth + np.array([10.0, 0.0])
    m = mt.metrics_compute(preds, truth, mm_per_px=0.15)
    assert abs(m.auc - (41.0 / 51.0) * 100.0) < 1e-12
    assert m.precision == 100.0
    assert all(s == 0.0 for s in m.success[:10])
    assert all(s == 1.0 for s in m.success[10:])


def test_two_frame_mm_example():
    truth = np.zeros((2, 2))
    preds = np.array([[0.0, 0.0], [30.0, 0.0]])
    m = mt.metrics_compute(preds, truth, mm_per_px=0.15)
    assert abs(m.err_mm - 2.25) < 1e-12
    assert abs(m.sd_mm - 2.25) < 1e-12


def test_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        truth = rng.uniform(0, 256, size=(n, 2))
        preds = truth + rng.normal(0, 15, size=(n, 2))
        m = mt.metrics_compute(preds, truth, mm_per_px=0.15)
        ref = naive_metrics(preds, truth, 0.15)
        for key in ("err_px", "err_mm", "sd_px", "sd_mm", "auc", "precision"):
            assert abs(getattr(m, key) - ref[key]) < 1e-12
        assert np.max(np.abs(np.array(m.success) - np.array(ref["success"]))) < 1e-12


def test_rejects_length_mismatch():
    with pytest.raises(ContractViolation):
        mt.metrics_compute(np.zeros((3, 2)), np.zeros((4, 2)), 0.15)
    with pytest.raises(ContractViolation):
        mt.metrics_compute(np.zeros((0, 2)), np.zeros((0, 2)), 0.15)


def test_report_json_roundtrip(tmp_path):
    m = mt.metrics_compute(np.zeros((5, 2)) + 3.0, np.zeros((5, 2)), 0.15)
    report = mt.EvalReport(split="test", seed=9, config_hash="abc", fps=12.5,
                           aggregate=m, per_sequence=[("seq_000", m)],
                           notes={"grid": "0..50 px step 1"})
    text = report.to_json()
    back = mt.EvalReport.from_dict(json.loads(text))
    assert back.to_json() == text

    report.write(tmp_path, "r")
    assert (tmp_path / "r.json").exists()
    lines = (tmp_path / "r_success.csv").read_text().strip().splitlines()
    assert lines[0] == "threshold_px,success"
    assert len(lines) == 52
