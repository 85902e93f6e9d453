"""Synthetic ultrasound-like needle sequences with exact ground truth.

Motion reproduces two regimes: constant-velocity insertion followed by
rapid triangular-wave reciprocation (robotic: fixed velocity and stroke;
manual: rate-driven with per-cycle jitter). Rendering is a visual stand-in,
not a physics simulation: multiplicative speckle, a bright shaft, a
Gaussian tip blob with speed-proportional motion blur, and random tip
dropout during aspiration.
"""

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .validation import ContractViolation, require

PHASE_INSERTION = "insertion"
PHASE_ASPIRATION = "aspiration"

ALLOWED_ANGLES = (30.0, 45.0, 60.0)


@dataclass
class MotionConfig:
    insertion_velocity: float = 20.0   # mm/s
    aspiration_velocity: float = 30.0  # mm/s
    stroke_depth: float = 15.0         # mm
    cycles: int = 5
    reciprocation_rate: float = 2.5    # Hz, manual regime
    insertion_angle: float = 45.0      # degrees, from the configured set
    fps: float = 30.0
    mm_per_px: float = 0.15
    target_depth: float = 20.0         # mm travelled before aspiration starts
    regime: str = "robotic"            # robotic | manual
    jitter: float = 0.2                # manual per-cycle amplitude/rate jitter
    probe_drift: bool = False          # IPM analog: slow global scene drift

    def __post_init__(self):
        for name in ("insertion_velocity", "aspiration_velocity", "stroke_depth",
                     "reciprocation_rate", "fps", "mm_per_px", "target_depth"):
            require(getattr(self, name) > 0, f"{name} must be positive")
        require(self.cycles >= 1, "cycles must be >= 1")
        require(self.insertion_angle in ALLOWED_ANGLES,
                f"insertion angle must be one of {ALLOWED_ANGLES}")
        require(self.regime in ("robotic", "manual"), "regime must be robotic or manual")


@dataclass
class RenderConfig:
    frame_size: tuple = (256, 256)     # (H, W)
    background: float = 30.0
    speckle_sigma: float = 0.35        # log-std of the multiplicative field
    speckle_smooth: int = 3            # smoothing kernel size (odd)
    needle_brightness: float = 80.0
    shaft_width: float = 1.5           # px, Gaussian cross-section
    shaft_length: float = 220.0        # px rendered behind the tip
    tip_brightness: float = 140.0
    tip_sigma: float = 2.5             # px
    blur_coeff: float = 0.6            # extra along-motion sigma per px/frame of speed
    degrade_prob: float = 0.3          # tip-intensity dropout per aspiration frame
    appearance_drift: float = 0.0      # fractional tip-blob growth per frame
                                       # (tissue deformation around the needle)
    entry_ramp_frames: int = 0         # frames over which the needle fades in
                                       # (entering the imaging plane)
    n_distractors: int = 0             # bright tissue blobs per sequence that
                                       # make pure tip detection ambiguous
    distractor_sigma: tuple = (1.5, 5.0)  # per-blob size range, px

    def __post_init__(self):
        require(self.frame_size[0] > 0 and self.frame_size[1] > 0,
                "frame size must be positive")
        require(0.0 <= self.degrade_prob <= 1.0, "degrade_prob must be in [0, 1]")
        require(self.appearance_drift >= 0.0, "appearance_drift must be >= 0")
        require(self.entry_ramp_frames >= 0, "entry_ramp_frames must be >= 0")
        require(self.n_distractors >= 0, "n_distractors must be >= 0")
        require(self.distractor_sigma[0] > 0
                and self.distractor_sigma[1] >= self.distractor_sigma[0],
                "distractor_sigma must be an increasing positive range")


@dataclass
class SequenceSample:
    frames: np.ndarray       # (n, H, W) uint8
    tips: np.ndarray         # (n, 2) sub-pixel (x, y), full-frame coordinates
    phases: list
    mm_per_px: float
    seed: int
    clamped: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def _segments(mcfg, rng):
    """Piecewise-linear (duration_s, start_mm, end_mm, phase) description."""
    segs = [(mcfg.target_depth / mcfg.insertion_velocity, 0.0, mcfg.target_depth,
             PHASE_INSERTION)]
    depth = mcfg.target_depth
    for _ in range(mcfg.cycles):
        if mcfg.regime == "robotic":
            amp = mcfg.stroke_depth
            half = amp / mcfg.aspiration_velocity
        else:
            j = mcfg.jitter
            amp = mcfg.stroke_depth * (1.0 + rng.uniform(-j, j))
            rate = mcfg.reciprocation_rate * (1.0 + rng.uniform(-j, j))
            half = 1.0 / (2.0 * rate)
        segs.append((half, depth, depth - amp, PHASE_ASPIRATION))
        segs.append((half, depth - amp, depth, PHASE_ASPIRATION))
    return segs


def motion_profile(mcfg, n_frames=None, rng=None):
    """Tip positions (mm along the insertion axis) and phase labels.

    With n_frames None the profile covers insertion plus the configured
    reciprocation cycles exactly; longer requests hold the final depth.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    segs = _segments(mcfg, rng)
    total_time = sum(s[0] for s in segs)
    if n_frames is None:
        n_frames = int(np.floor(total_time * mcfg.fps)) + 1
    require(n_frames >= 1, "need at least one frame")

    bounds = np.cumsum([s[0] for s in segs])
    positions = np.empty(n_frames)
    phases = []
    for i in range(n_frames):
        t = i / mcfg.fps
        if t >= bounds[-1]:
            positions[i] = segs[-1][2]
            phases.append(PHASE_INSERTION)
            continue
        k = int(np.searchsorted(bounds, t, side="right"))
        t0 = bounds[k - 1] if k > 0 else 0.0
        dur, a, b, phase = segs[k]
        positions[i] = a + (b - a) * (t - t0) / dur
        phases.append(phase)
    return positions, phases


def _axis_direction(angle_deg):
    rad = np.deg2rad(angle_deg)
    return np.array([np.cos(rad), np.sin(rad)])


def tip_path_px(mcfg, positions_mm, frame_size):
    """Map axial positions to sub-pixel full-frame (x, y) coordinates.

    Paths leaving the frame are clamped to a 2 px margin and flagged.
    """
    h, w = frame_size
    direction = _axis_direction(mcfg.insertion_angle)
    entry = np.array([0.12 * w, 0.12 * h])
    tips = entry[None, :] + direction[None, :] * (positions_mm / mcfg.mm_per_px)[:, None]
    lo = np.array([2.0, 2.0])
    hi = np.array([w - 3.0, h - 3.0])
    clamped = bool(np.any(tips < lo) or np.any(tips > hi))
    tips = np.clip(tips, lo, hi)
    return tips, entry, clamped


def _speckle_field(shape, rcfg, rng):
    sigma = rcfg.speckle_sigma
    if sigma <= 0:
        return np.ones(shape)
    field_ = np.exp(rng.normal(-0.5 * sigma**2, sigma, size=shape))
    if rcfg.speckle_smooth > 1:
        field_ = ndimage.uniform_filter(field_, size=rcfg.speckle_smooth)
    return field_


def render_frame(tip, tip_speed, rcfg, rng, shaft_dir=None, tip_gain=1.0,
                 field=None, tip_scale=1.0, distractors=None, shaft_gain=1.0):
    """Render one 8-bit grayscale frame around a known tip position.

    `field` optionally supplies a precomputed speckle field (used by
    `generate_sequence` for temporally coherent, slowly drifting texture);
    without it a fresh field is drawn from `rng`. `distractors` is an
    optional (n, 4) array of tissue blobs as (x, y, sigma, brightness) rows.
    """
    h, w = rcfg.frame_size
    tx, ty = float(tip[0]), float(tip[1])
    if not (0 <= tx < w and 0 <= ty < h):
        raise ContractViolation(f"tip ({tx}, {ty}) outside the {rcfg.frame_size} frame")
    if shaft_dir is None:
        shaft_dir = _axis_direction(45.0)
    d = np.asarray(shaft_dir, dtype=float)
    d = d / np.linalg.norm(d)

    ys, xs = np.mgrid[0:h, 0:w]
    if field is None:
        field = _speckle_field((h, w), rcfg, rng)
    img = rcfg.background * field

    # shaft: distance to the segment ending at the tip
    rel_x = xs - tx
    rel_y = ys - ty
    along = rel_x * d[0] + rel_y * d[1]          # > 0 is beyond the tip
    along_clip = np.clip(along, -rcfg.shaft_length, 0.0)
    perp_sq = (rel_x - along_clip * d[0]) ** 2 + (rel_y - along_clip * d[1]) ** 2
    beyond = np.clip(along, 0.0, None)
    dist_sq = perp_sq + beyond**2
    img += (rcfg.needle_brightness * shaft_gain
            * np.exp(-dist_sq / (2.0 * rcfg.shaft_width**2)))

    # tip blob, elongated along the motion axis in proportion to speed
    s_long = rcfg.tip_sigma * tip_scale + rcfg.blur_coeff * float(tip_speed)
    s_perp = rcfg.tip_sigma * tip_scale
    longit = rel_x * d[0] + rel_y * d[1]
    perp = -rel_x * d[1] + rel_y * d[0]
    img += (rcfg.tip_brightness * tip_gain
            * np.exp(-(longit**2 / (2.0 * s_long**2) + perp**2 / (2.0 * s_perp**2))))

    # bright tissue blobs: isotropic, not elongated by motion
    if distractors is not None:
        for bx, by, bs, bb in np.asarray(distractors, dtype=float):
            img += bb * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2.0 * bs**2))

    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def generate_sequence(mcfg, rcfg, seed, n_frames=None):
    """Compose the motion profile and renderer into one labelled sequence."""
    motion_rng = np.random.default_rng((seed, 0))
    render_rng = np.random.default_rng((seed, 1))
    positions, phases = motion_profile(mcfg, n_frames, rng=motion_rng)
    tips, entry, clamped = tip_path_px(mcfg, positions, rcfg.frame_size)
    direction = _axis_direction(mcfg.insertion_angle)

    n = len(positions)
    h, w = rcfg.frame_size
    frames = np.empty((n, h, w), dtype=np.uint8)
    # one persistent speckle field per sequence: the tissue texture is stable
    # across frames, and with probe_drift it slides slowly under the needle
    # (the needle stays anchored to the labelled tip path)
    drift_v = (render_rng.uniform(-0.15, 0.15, size=2) if mcfg.probe_drift
               else np.zeros(2))
    margin = int(np.ceil(np.max(np.abs(drift_v)) * n)) + 1
    base_field = _speckle_field((h + 2 * margin, w + 2 * margin), rcfg, render_rng)
    # tissue blobs are anchored to the texture (they slide with probe drift)
    # and rejection-sampled to stay clear of the labelled tip path
    distractors = None
    if rcfg.n_distractors > 0:
        steps = np.arange(n)[:, None] * drift_v[None, :]
        blobs = []
        for _ in range(1000):
            if len(blobs) >= rcfg.n_distractors:
                break
            pos = render_rng.uniform([4.0, 4.0], [w - 5.0, h - 5.0])
            gap = np.min(np.linalg.norm(tips - (pos[None, :] - steps), axis=1))
            if gap < 10.0:
                continue
            blobs.append([pos[0], pos[1],
                          render_rng.uniform(*rcfg.distractor_sigma),
                          rcfg.tip_brightness * render_rng.uniform(0.7, 1.0)])
        distractors = np.asarray(blobs)
    for i in range(n):
        speed = 0.0 if i == 0 else float(np.linalg.norm(tips[i] - tips[i - 1]))
        gain = 1.0
        if phases[i] == PHASE_ASPIRATION and render_rng.random() < rcfg.degrade_prob:
            gain = render_rng.uniform(0.2, 0.6)
        ramp = 1.0
        if rcfg.entry_ramp_frames > 0:
            ramp = min(1.0, i / rcfg.entry_ramp_frames)
        off_y = margin + drift_v[1] * i
        off_x = margin + drift_v[0] * i
        field = ndimage.shift(base_field, (-off_y, -off_x), order=1,
                              mode="nearest")[:h, :w]
        frame_blobs = None
        if distractors is not None and len(distractors):
            frame_blobs = distractors.copy()
            frame_blobs[:, :2] -= drift_v[None, :] * i
        frames[i] = render_frame(tips[i], speed, rcfg, render_rng,
                                 shaft_dir=direction, tip_gain=gain * ramp,
                                 field=field,
                                 tip_scale=1.0 + rcfg.appearance_drift * i,
                                 distractors=frame_blobs, shaft_gain=ramp)
    return SequenceSample(
        frames=frames, tips=tips, phases=phases, mm_per_px=mcfg.mm_per_px,
        seed=seed, clamped=clamped,
        meta={"motion": asdict(mcfg), "render": {**asdict(rcfg),
                                                 "frame_size": list(rcfg.frame_size)}})


# ---------------------------------------------------------------------------
# on-disk layout: one folder per sequence with PGM frames, truth.csv, meta.json

def _write_pgm(path, frame):
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(frame.tobytes())


def _read_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        require(magic == b"P5", f"{path} is not a binary PGM file")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = (int(v) for v in line.split())
        f.readline()  # maxval
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def save_sequence(seq_dir, sample):
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sample.frames):
        _write_pgm(seq_dir / f"frame_{i:06d}.pgm", frame)
    with open(seq_dir / "truth.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "tip_x_px", "tip_y_px", "phase"])
        for i, (tip, phase) in enumerate(zip(sample.tips, sample.phases)):
            writer.writerow([i, repr(float(tip[0])), repr(float(tip[1])), phase])
    meta = dict(sample.meta)
    meta.update({"seed": sample.seed, "mm_per_px": sample.mm_per_px,
                 "clamped": sample.clamped, "n_frames": len(sample)})
    with open(seq_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_sequence(seq_dir):
    seq_dir = Path(seq_dir)
    with open(seq_dir / "meta.json") as f:
        meta = json.load(f)
    frames = np.stack([_read_pgm(seq_dir / f"frame_{i:06d}.pgm")
                       for i in range(meta["n_frames"])])
    tips = np.empty((meta["n_frames"], 2))
    phases = []
    with open(seq_dir / "truth.csv", newline="") as f:
        for row in csv.DictReader(f):
            i = int(row["frame"])
            tips[i] = (float(row["tip_x_px"]), float(row["tip_y_px"]))
            phases.append(row["phase"])
    return SequenceSample(frames=frames, tips=tips, phases=phases,
                          mm_per_px=meta["mm_per_px"], seed=meta["seed"],
                          clamped=meta["clamped"], meta=meta)


def split_seeds(n_sequences, base_seed=0):
    """Disjoint train/val/test seed sets in the ratio 7:1:2."""
    seeds = [base_seed + i for i in range(n_sequences)]
    n_train = max(1, round(0.7 * n_sequences))
    n_val = max(1, round(0.1 * n_sequences))
    train = seeds[:n_train]
    val = seeds[n_train:n_train + n_val]
    test = seeds[n_train + n_val:]
    if not test:
        test = [base_seed + n_sequences]
    return {"train": train, "val": val, "test": test}


def generate_dataset(out_dir, n_sequences, mcfg=None, rcfg=None, base_seed=0,
                     n_frames=None, manual_test=True):
    """Write a full split dataset. Train and val use the robotic regime;
    the test split optionally switches to the jittered manual regime."""
    out_dir = Path(out_dir)
    mcfg = mcfg or MotionConfig()
    rcfg = rcfg or RenderConfig()
    splits = split_seeds(n_sequences, base_seed)
    angles = list(ALLOWED_ANGLES)
    for split, seeds in splits.items():
        for idx, seed in enumerate(seeds):
            cfg = MotionConfig(**{**asdict(mcfg),
                                  "insertion_angle": angles[idx % len(angles)]})
            if split == "test" and manual_test:
                cfg.regime = "manual"
            sample = generate_sequence(cfg, rcfg, seed, n_frames)
            save_sequence(out_dir / split / f"seq_{seed:05d}", sample)
    return splits


def load_split(dataset_dir, split):
    split_dir = Path(dataset_dir) / split
    if not split_dir.is_dir():
        raise ContractViolation(f"missing split directory {split_dir}")
    return [load_sequence(p) for p in sorted(split_dir.iterdir()) if p.is_dir()]
