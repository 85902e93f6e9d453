import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from needletrack import autodiff as ad
from needletrack import cli, harness
from needletrack import synthdata as sd


def gen_config(tmp_path, **kw):
    cfg = {
        "motion": {"mm_per_px": 0.3, "target_depth": 6.0, "stroke_depth": 4.0},
        "render": {"frame_size": [128, 128], "degrade_prob": 0.0},
        "n_sequences": 5,
        "n_frames": 20,
    }
    cfg.update(kw)
    path = tmp_path / "gen.json"
    path.write_text(json.dumps(cfg))
    return path


def train_config(tmp_path, **kw):
    cfg = {
        "tracker": {"search_size": 48, "template_size": 24, "patch": 8,
                    "channels": 8, "k": 2, "capacity": 8, "backbone_depth": 1,
                    "depth": 1, "n_state": 4, "crop_factor": 2.0, "sigma": 8.0},
        "steps": 2, "batch": 1, "clip_len": 3, "seed": 0,
    }
    cfg.update(kw)
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg))
    return path


def dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# gradcheck

def test_gradcheck_all_passes_default_seed():
    results = harness.gradcheck_all(0)
    assert len(results) >= 30
    for name, err in results:
        assert err < harness.GRADCHECK_THRESHOLD, f"{name}: {err}"


def test_gradcheck_report_lists_every_op():
    ok, report = harness.gradcheck_report(0)
    assert ok
    lines = report.splitlines()
    assert all(line.startswith(("PASS", "FAIL")) and "max_rel_err=" in line
               for line in lines)
    assert any("selective_scan_seq" in line for line in lines)
    assert any("tracking_loss" in line for line in lines)


def test_gradcheck_detects_corrupted_backward(monkeypatch):
    original = ad.silu

    def broken_silu(a):
        s = 1.0 / (1.0 + np.exp(-a.data))
        data = a.data * s

        def backward(g):
            return (g * s,)  # drops the a*s' term

        return ad._node(data, (a,), backward)

    monkeypatch.setattr(ad, "silu", broken_silu)
    try:
        results = dict(harness.gradcheck_all(0))
    finally:
        monkeypatch.setattr(ad, "silu", original)
    assert results["silu"] >= harness.GRADCHECK_THRESHOLD


# ---------------------------------------------------------------------------
# bench

def test_bench_rows_and_ratios():
    rows, ratios = harness.bench_scan([64, 128], repeats=3)
    assert len(rows) == 4  # 2 lengths x 2 variants
    assert set(r[1] for r in rows) == {"seq", "chunked"}
    assert all(sec > 0 for _, _, sec in rows)
    assert set(ratios) == {(64, 128, "seq"), (64, 128, "chunked")}


def test_bench_rejects_unsorted_lengths():
    from needletrack.validation import ContractViolation
    with pytest.raises(ContractViolation):
        harness.bench_scan([128, 64])


def test_bench_csv_layout(tmp_path):
    rows, ratios = harness.bench_scan([64, 128], repeats=2)
    harness.write_bench_csv(tmp_path / "bench.csv", rows, ratios)
    text = (tmp_path / "bench.csv").read_text()
    assert text.startswith("length,variant,seconds")
    assert "doubling_ratio" in text


# ---------------------------------------------------------------------------
# CLI

def test_cli_gen_eval_train_roundtrip(tmp_path, capsys):
    data = tmp_path / "data"
    rc = cli.main(["gen", "--config", str(gen_config(tmp_path)),
                   "--out", str(data)])
    assert rc == 0
    assert (data / "train").is_dir()

    run = tmp_path / "run"
    rc = cli.main(["train", "--config", str(train_config(tmp_path)),
                   "--data", str(data), "--out", str(run)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    ckpt = out["checkpoint"]

    rc = cli.main(["eval", "--ckpt", ckpt, "--data", str(data),
                   "--split", "val", "--out", str(tmp_path / "report")])
    assert rc == 0
    report = json.loads((tmp_path / "report/report.json").read_text())
    assert 0 <= report["aggregate"]["auc"] <= 100


def test_cli_gen_deterministic(tmp_path):
    cfg = gen_config(tmp_path)
    cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_cli_eval_missing_split_exit_code(tmp_path):
    data = tmp_path / "data"
    cli.main(["gen", "--config", str(gen_config(tmp_path)), "--out", str(data)])
    run = tmp_path / "run"
    cli.main(["train", "--config", str(train_config(tmp_path)),
              "--data", str(data), "--out", str(run)])
    rc = cli.main(["eval", "--ckpt", str(run / "ckpt"), "--data", str(data),
                   "--split", "nope", "--out", str(tmp_path / "r")])
    assert rc == cli.EXIT_CONTRACT


def test_cli_missing_out_is_contract_violation(tmp_path):
    rc = cli.main(["gen", "--config", str(gen_config(tmp_path))])
    assert rc == cli.EXIT_CONTRACT


def test_cli_gradcheck_and_bench(tmp_path):
    rc = cli.main(["gradcheck", "--out", str(tmp_path / "g")])
    assert rc == 0
    assert "PASS" in (tmp_path / "g/gradcheck.txt").read_text()
    rc = cli.main(["bench", "--lengths", "64,128", "--repeats", "2",
                   "--out", str(tmp_path / "bench")])
    assert rc == 0
    assert (tmp_path / "bench/bench.csv").exists()


def test_cli_ablate(tmp_path):
    data = tmp_path / "data"
    cli.main(["gen", "--config", str(gen_config(tmp_path)), "--out", str(data)])
    rc = cli.main(["ablate", "--preset", "vRDL",
                   "--config", str(train_config(tmp_path)),
                   "--data", str(data), "--split", "val",
                   "--out", str(tmp_path / "abl")])
    assert rc == 0
    assert (tmp_path / "abl/delta.csv").exists()


# ---------------------------------------------------------------------------
# estimator wrapper

def test_estimator_fit_predict(tmp_path):
    from needletrack.estimator import NeedleTracker
    data = tmp_path / "data"
    cli.main(["gen", "--config", str(gen_config(tmp_path)), "--out", str(data)])
    est = NeedleTracker(search_size=48, template_size=24, channels=8, k=2,
                        capacity=8, steps=2, batch=1, clip_len=3, seed=0)
    params = est.get_params()
    assert params["k"] == 2 and params["steps"] == 2
    est.fit(str(data))
    seq = sd.load_split(data, "val")[0]
    preds = est.predict(seq)
    assert preds.shape == (len(seq), 2)
    assert np.all(np.isfinite(preds))
    assert est.score(seq) <= 0.0


def test_estimator_requires_fit(tmp_path):
    from needletrack.estimator import NeedleTracker
    from needletrack.validation import ContractViolation
    with pytest.raises(ContractViolation):
        NeedleTracker().predict(None)
