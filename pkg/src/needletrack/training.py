"""Clip-sampled training loop, online evaluation, and ablation presets.

Training samples short clips, initializes a fresh tracker state on the
first clip frame (teacher-forced crops around the previous frame's truth),
and optimizes the per-frame localization loss plus the register diversity
regularizer over the clip bank. Every source of randomness is derived from
(seed, step) so a resumed run is bitwise identical to an uninterrupted one.
"""

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import losses, metrics, synthdata, tracker
from .tracker import TrackerConfig, TrackerModel
from .validation import ContractViolation, require


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    steps: int = 300
    batch: int = 2            # clips accumulated per optimizer step
    clip_len: int = 8
    lr: float = 5e-4
    decay_frac: float = 2.0 / 3.0   # fraction of steps before the lr drop
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = None   # global gradient-norm bound (None = off)
    shift_aug: float = 2.0    # px jitter on the teacher-forced crop center
    scale_aug: float = 0.1    # relative jitter on the crop window size
    blur_prob: float = 0.25
    blur_sigma: float = 1.0
    stale_template: bool = False   # anchor the clip template at frame 0 (as
                                   # online tracking does) and warm the bank
                                   # on the frames preceding the clip
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tracker, dict):
            self.tracker = TrackerConfig(**self.tracker)
        require(self.clip_len >= 2, "clip length must be >= 2 (bank needs history)")
        require(self.steps >= 1 and self.batch >= 1, "steps and batch must be positive")
        require(self.lr > 0 and self.decay_factor > 0, "lr settings must be positive")
        require(self.grad_clip is None or self.grad_clip > 0,
                "grad_clip must be positive when set")

    def as_dict(self):
        return asdict(self)


def config_hash(cfg):
    text = json.dumps(cfg.as_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Decoupled weight decay Adam over a fixed, named parameter list."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                            + self.weight_decay * p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_arrays(self):
        out = {"t": np.array([float(self.t)])}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, state):
        self.t = int(state["t"][0])
        for name in self.m:
            self.m[name] = state[f"m.{name}"].reshape(self.m[name].shape)
            self.v[name] = state[f"v.{name}"].reshape(self.v[name].shape)


# ---------------------------------------------------------------------------
# clip loss

def clip_loss(model, seq, start, clip_len, run_cfg, rng):
    """Tracking loss over one teacher-forced clip plus the register
    diversity regularizer over the clip's bank."""
    cfg = model.cfg
    if run_cfg.stale_template:
        # deployment condition: the static template is as old as the clip is
        # deep into the sequence, and only the bank carries recent appearance
        state = tracker.tracker_init(model, seq.frames[0], tuple(seq.tips[0]))
        if cfg.use_register:
            for j in range(max(1, start - 3), start + 1):
                tracker.forward_search(model, state.z, state.bank,
                                       seq.frames[j], seq.tips[j - 1])
    else:
        state = tracker.tracker_init(model, seq.frames[start], tuple(seq.tips[start]))
    total = ad.asdiff(0.0)
    n_frames = 0
    for i in range(start + 1, start + clip_len):
        center = seq.tips[i - 1] + rng.uniform(-run_cfg.shift_aug,
                                               run_cfg.shift_aug, size=2)
        crop_px = cfg.crop_px
        if run_cfg.scale_aug > 0:
            crop_px = int(round(crop_px * (1.0 + rng.uniform(-run_cfg.scale_aug,
                                                             run_cfg.scale_aug))))
            crop_px = min(crop_px, min(seq.frames[i].shape))
            crop_px = max(crop_px, cfg.search_size)
        frame = seq.frames[i]
        if run_cfg.blur_prob > 0 and rng.uniform() < run_cfg.blur_prob:
            frame = ndimage.gaussian_filter(
                frame.astype(np.float64), rng.uniform(0.3, run_cfg.blur_sigma))
        score, offsets, origin, scale = tracker.forward_search(
            model, state.z, state.bank, frame, center, crop_px=crop_px)
        tip_search = ((seq.tips[i][0] - origin[0]) / scale,
                      (seq.tips[i][1] - origin[1]) / scale)
        target = losses.TrackingTarget(tip=tip_search, sigma=cfg.sigma,
                                       cell_px=float(cfg.patch))
        total = ad.add(total, losses.tracking_loss(score, offsets, target))
        n_frames += 1
    total = ad.mul(total, ad.asdiff(1.0 / n_frames))
    if cfg.use_register and (cfg.rd.alpha > 0 or cfg.rd.beta > 0):
        stacked = state.bank.stacked()
        total = ad.add(total, losses.rd_loss(stacked, stacked, cfg.rd))
    return total


def _sample_clip(sequences, clip_len, rng):
    weights = np.array([len(s) - clip_len for s in sequences], dtype=np.float64)
    require(np.all(weights >= 1), "sequences shorter than the clip length")
    idx = int(rng.integers(len(sequences)))
    start = int(rng.integers(len(sequences[idx]) - clip_len))
    return sequences[idx], start


def train(run_cfg, dataset_dir, out_dir, resume=None, stop_at=None):
    """Train a tracker on the dataset's train split and write a checkpoint
    plus a training-curve CSV into out_dir. Returns the checkpoint base path.

    With `resume`, training continues from the stored step count; because
    checkpoints quantize the live parameters on save, the remaining steps
    replay bitwise as they would have in one save-then-continue session.
    `stop_at` checkpoints early without changing the lr schedule.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sequences = synthdata.load_split(dataset_dir, "train")
    require(len(sequences) >= 1, "train split is empty")

    start_step = 0
    if resume is not None:
        model, meta, opt_state = tracker.load_checkpoint(resume)
        require(meta.get("seed") == run_cfg.seed,
                "resume seed does not match the run config")
        start_step = int(meta["step"])
        optimizer = AdamW(list(model.arrays()), weight_decay=run_cfg.weight_decay)
        optimizer.load_state_arrays(opt_state)
    else:
        model = TrackerModel.init(np.random.default_rng(run_cfg.seed), run_cfg.tracker)
        optimizer = AdamW(list(model.arrays()), weight_decay=run_cfg.weight_decay)

    end_step = run_cfg.steps if stop_at is None else min(stop_at, run_cfg.steps)
    curve_path = out_dir / "curve.csv"
    mode = "a" if resume is not None and curve_path.exists() else "w"
    with open(curve_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "lr"])
        for step in range(start_step, end_step):
            rng = np.random.default_rng((run_cfg.seed, step))
            optimizer.zero_grad()
            step_loss = 0.0
            for _ in range(run_cfg.batch):
                seq, start = _sample_clip(sequences, run_cfg.clip_len, rng)
                loss = clip_loss(model, seq, start, run_cfg.clip_len, run_cfg, rng)
                loss = ad.mul(loss, ad.asdiff(1.0 / run_cfg.batch))
                value = loss.item() * run_cfg.batch
                if not np.isfinite(value):
                    raise ContractViolation(
                        f"non-finite loss at step {step} (seed {run_cfg.seed}, "
                        f"sequence seed {seq.seed}, clip start {start})")
                loss.backward()
                step_loss += value / run_cfg.batch
            if run_cfg.grad_clip is not None:
                total_sq = sum(float(np.sum(p.grad * p.grad))
                               for _, p in optimizer.params if p.grad is not None)
                norm = np.sqrt(total_sq)
                if norm > run_cfg.grad_clip:
                    factor = run_cfg.grad_clip / norm
                    for _, p in optimizer.params:
                        if p.grad is not None:
                            p.grad = p.grad * factor
            lr = run_cfg.lr
            if step >= run_cfg.decay_frac * run_cfg.steps:
                lr *= run_cfg.decay_factor
            optimizer.step(lr)
            writer.writerow([step, repr(step_loss), repr(lr)])

    base = out_dir / "ckpt"
    tracker.save_checkpoint(
        base, model,
        meta={"step": end_step, "seed": run_cfg.seed,
              "run_config": run_cfg.as_dict(), "config_hash": config_hash(run_cfg)},
        opt=optimizer.state_arrays())
    return base


# ---------------------------------------------------------------------------
# evaluation

def track_sequence(model, seq):
    """Online tracking of one sequence from the frame-0 annotation."""
    state = tracker.tracker_init(model, seq.frames[0], tuple(seq.tips[0]))
    preds, latencies = [seq.tips[0].copy()], []
    for i in range(1, len(seq)):
        pred, state = tracker.track_step(model, state, seq.frames[i])
        preds.append(np.asarray(pred.tip))
        latencies.append(pred.latency)
    return np.stack(preds), latencies, state


def heldout_diversify(model, sequences, n_clips=40, clip_len=10, seed=0):
    """Average register-diversity term over teacher-forced clips.

    Each clip rebuilds a fresh bank along the ground-truth track, so the
    value measures descriptor diversity on held-out frames independently of
    any tracking drift."""
    rng = np.random.default_rng((seed, 99))
    clip_len = min(clip_len, min(len(s) for s in sequences) - 1)
    require(clip_len >= 2, "sequences too short for a diversity clip")
    vals = []
    with ad.no_grad():
        for _ in range(n_clips):
            seq, start = _sample_clip(sequences, clip_len, rng)
            state = tracker.tracker_init(model, seq.frames[start],
                                         tuple(seq.tips[start]))
            for i in range(start + 1, start + clip_len):
                tracker.forward_search(model, state.z, state.bank,
                                       seq.frames[i], seq.tips[i - 1])
            vals.append(losses.diversify_term(state.bank.stacked()).item())
    return float(np.mean(vals))


def evaluate(checkpoint, dataset_dir, split, seed=0):
    """Stream every sequence of a split online and aggregate the metric
    suite (frame-weighted via error pooling). Frame 0 is the annotated init
    and excluded from scoring."""
    model, meta, _ = tracker.load_checkpoint(checkpoint)
    sequences = synthdata.load_split(dataset_dir, split)
    require(len(sequences) >= 1, f"split {split!r} is empty")

    per_sequence = []
    all_pred, all_truth, asp_pred, asp_truth = [], [], [], []
    total_latency = 0.0
    n_steps = 0
    div_terms = []
    for seq in sequences:
        preds, latencies, state = track_sequence(model, seq)
        per_sequence.append((
            f"seq_{seq.seed:05d}",
            metrics.metrics_compute(preds[1:], seq.tips[1:], seq.mm_per_px)))
        all_pred.append(preds[1:])
        all_truth.append(seq.tips[1:])
        for i in range(1, len(seq)):
            if seq.phases[i] == synthdata.PHASE_ASPIRATION:
                asp_pred.append(preds[i])
                asp_truth.append(seq.tips[i])
        total_latency += sum(latencies)
        n_steps += len(latencies)
        if model.cfg.use_register and state.bank.count >= 2:
            with ad.no_grad():
                div_terms.append(losses.diversify_term(state.bank.stacked()).item())

    mm_per_px = sequences[0].mm_per_px
    aggregate = metrics.metrics_compute(
        np.concatenate(all_pred), np.concatenate(all_truth), mm_per_px)
    notes = {
        "precision_threshold_px": metrics.PRECISION_THRESHOLD,
        "threshold_grid": "0..50 px step 1 (center error; point target)",
        "latency_scope": "model step only, excludes disk I/O",
    }
    if asp_pred:
        asp = metrics.metrics_compute(np.stack(asp_pred), np.stack(asp_truth),
                                      mm_per_px)
        notes["aspiration_err_px"] = asp.err_px
        notes["aspiration_err_mm"] = asp.err_mm
        notes["aspiration_frames"] = asp.n_frames
    if div_terms:
        notes["diversify_term_online"] = float(np.mean(div_terms))
    if model.cfg.use_register:
        notes["diversify_term"] = heldout_diversify(model, sequences, seed=seed)
    return metrics.EvalReport(
        split=split, seed=seed, config_hash=meta.get("config_hash", ""),
        fps=n_steps / total_latency, aggregate=aggregate,
        per_sequence=per_sequence, notes=notes)


# ---------------------------------------------------------------------------
# ablation presets

PRESETS = {
    "baseline": {},
    "vr1": {"capacity": 100},
    "vr2": {"capacity": None},
    "vr3": {"k": 2},
    "vr4": {"k": 32},
    "vM2": {"use_register": False},
    "vRDL": {"rd": {"alpha": 0.0, "beta": 0.0}},
}


def apply_preset(run_cfg, name):
    """Return a copy of run_cfg with the named ablation overrides applied."""
    if name not in PRESETS:
        raise ContractViolation(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = run_cfg.as_dict()
    for key, value in PRESETS[name].items():
        if key == "rd":
            d["tracker"]["rd"].update(value)
        else:
            d["tracker"][key] = value
    return RunConfig(**d)


def run_ablation(preset_name, run_cfg, dataset_dir, out_dir, split="test"):
    """Train and evaluate the baseline and one preset with shared seeds and
    write a per-metric delta table."""
    out_dir = Path(out_dir)
    reports = {}
    for name in ("baseline", preset_name):
        cfg = apply_preset(run_cfg, name)
        base = train(cfg, dataset_dir, out_dir / name)
        report = evaluate(base, dataset_dir, split, seed=cfg.seed)
        report.write(out_dir / name)
        reports[name] = report

    rows = []
    for metric in ("auc", "precision", "err_px", "sd_px"):
        b = getattr(reports["baseline"].aggregate, metric)
        p = getattr(reports[preset_name].aggregate, metric)
        rows.append([metric, b, p, p - b])
    b, p = reports["baseline"].fps, reports[preset_name].fps
    rows.append(["fps", b, p, p - b])
    with open(out_dir / "delta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "baseline", preset_name, "difference"])
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return reports["baseline"], reports[preset_name]
