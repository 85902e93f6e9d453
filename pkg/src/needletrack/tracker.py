"""Compact online needle-tip tracker.

Per frame: crop a search window around the last prediction, embed it with a
shallow patch backbone, distill a per-frame descriptor through the register
extractor, push it into the bank, rebuild the dynamic template through the
retriever, and localize the tip with a cross-attention head over the
re-gridded search tokens. The template embedding is frozen after init; there
is no re-detection logic.
"""

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import DiffArray
from .losses import RdLossConfig
from .registers import RegisterBank, RegisterTemplate, extract, retrieve
from .ssm import MambaBlockParams, mamba_block
from .validation import ContractViolation, require


@dataclass
class TrackerConfig:
    search_size: int = 96       # search crop is resized to this many pixels
    template_size: int = 48     # template crop size in frame pixels
    patch: int = 8
    channels: int = 64          # token width C; register tokens use 2C
    k: int = 8                  # register tokens per frame
    capacity: int = 300         # bank length L (None = unbounded)
    backbone_depth: int = 1     # self-attention blocks after patch embedding
    depth: int = 1              # gated SSM blocks in extractor and retriever
    n_state: int = 8
    crop_factor: float = 4.0    # search window extent relative to the template
    sigma: float = 16.0         # target heatmap sigma in search pixels
    use_register: bool = True   # False: plain block stacks, no bank
    head_norm: bool = True      # normalize tokens entering the prediction head
    descriptor_norm: bool = True  # layer-normalize descriptors entering the bank
    max_step_px: float = None   # motion gate: per-frame displacement bound
    rd: RdLossConfig = field(default_factory=RdLossConfig)

    def __post_init__(self):
        if isinstance(self.rd, dict):
            self.rd = RdLossConfig(**self.rd)
        require(self.patch >= 1, "patch size must be positive")
        require(self.search_size % self.patch == 0 and self.template_size % self.patch == 0,
                "search and template sizes must be divisible by the patch size")
        require(self.k >= 1 and self.k <= self.template_tokens,
                "k must be between 1 and the template token count")
        require(self.crop_factor >= 1.0, "crop factor must be >= 1")
        require(self.max_step_px is None or self.max_step_px > 0,
                "max_step_px must be positive when set")

    @property
    def search_tokens(self):
        return (self.search_size // self.patch) ** 2

    @property
    def template_tokens(self):
        return (self.template_size // self.patch) ** 2

    @property
    def width(self):
        return 2 * self.channels

    @property
    def crop_px(self):
        return int(round(self.crop_factor * self.template_size))


def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(d):
    return TrackerConfig(**d)


@dataclass
class AttentionBlockParams:
    ln_gain: DiffArray
    ln_bias: DiffArray
    wq: DiffArray
    wk: DiffArray
    wv: DiffArray
    wo: DiffArray

    @classmethod
    def init(cls, rng, dim, dtype=np.float64):
        s = 1.0 / math.sqrt(dim)

        def lin():
            return DiffArray(rng.normal(0.0, s, size=(dim, dim)),
                             requires_grad=True, dtype=dtype)

        return cls(
            ln_gain=DiffArray(np.ones(dim), requires_grad=True, dtype=dtype),
            ln_bias=DiffArray(np.zeros(dim), requires_grad=True, dtype=dtype),
            wq=lin(), wk=lin(), wv=lin(), wo=lin(),
        )

    def arrays(self):
        for name in ("ln_gain", "ln_bias", "wq", "wk", "wv", "wo"):
            yield name, getattr(self, name)


def _softmax_rows(logits):
    shift = ad.asdiff(logits.data.max(axis=1, keepdims=True))
    e = ad.exp(ad.sub(logits, shift))
    return ad.div(e, ad.sum_(e, axis=1, keepdims=True))


def attention_block(x, p):
    """Single-head self-attention with a pre-norm residual."""
    normed = ad.layer_norm(x, p.ln_gain, p.ln_bias)
    q = ad.matmul(normed, p.wq)
    k = ad.matmul(normed, p.wk)
    v = ad.matmul(normed, p.wv)
    scale = 1.0 / math.sqrt(x.shape[1])
    attn = _softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), ad.asdiff(scale)))
    return ad.add(x, ad.matmul(ad.matmul(attn, v), p.wo))


@dataclass
class TrackerModel:
    cfg: TrackerConfig
    w_patch: DiffArray
    b_patch: DiffArray
    pos: DiffArray          # (max tokens, C), sliced per crop size
    attn: list
    w_double: DiffArray     # shared C -> 2C projection
    b_double: DiffArray
    reg: RegisterTemplate
    extractor: list
    retriever: list
    head_ln_gain: DiffArray
    head_ln_bias: DiffArray
    hq: DiffArray
    hk: DiffArray
    hv: DiffArray
    ho: DiffArray
    w_hidden: DiffArray
    b_hidden: DiffArray
    w_score: DiffArray
    b_score: DiffArray
    w_offset: DiffArray
    b_offset: DiffArray

    @classmethod
    def init(cls, rng, cfg, dtype=np.float64):
        c = cfg.channels
        width = cfg.width
        p2 = cfg.patch * cfg.patch

        def lin(shape, scale):
            return DiffArray(rng.normal(0.0, scale, size=shape),
                             requires_grad=True, dtype=dtype)

        return cls(
            cfg=cfg,
            w_patch=lin((p2, c), 1.0 / math.sqrt(p2)),
            b_patch=lin((c,), 0.0),
            pos=lin((cfg.search_tokens, c), 0.02),
            attn=[AttentionBlockParams.init(rng, c, dtype)
                  for _ in range(cfg.backbone_depth)],
            w_double=lin((c, width), 1.0 / math.sqrt(c)),
            b_double=lin((width,), 0.0),
            reg=RegisterTemplate.init(rng, cfg.k, width, dtype),
            extractor=[MambaBlockParams.init(rng, width, n_state=cfg.n_state, dtype=dtype)
                       for _ in range(cfg.depth)],
            retriever=[MambaBlockParams.init(rng, width, n_state=cfg.n_state, dtype=dtype)
                       for _ in range(cfg.depth)],
            head_ln_gain=DiffArray(np.ones(width), requires_grad=True, dtype=dtype),
            head_ln_bias=DiffArray(np.zeros(width), requires_grad=True, dtype=dtype),
            hq=lin((width, width), 1.0 / math.sqrt(width)),
            hk=lin((width, width), 1.0 / math.sqrt(width)),
            hv=lin((width, width), 1.0 / math.sqrt(width)),
            ho=lin((width, width), 1.0 / math.sqrt(width)),
            w_hidden=lin((width, width), 1.0 / math.sqrt(width)),
            b_hidden=lin((width,), 0.0),
            w_score=lin((width, 1), 1.0 / math.sqrt(width)),
            b_score=lin((1,), 0.0),
            w_offset=lin((width, 2), 1.0 / math.sqrt(width)),
            b_offset=lin((2,), 0.0),
        )

    def arrays(self):
        """All learnable arrays in a fixed declaration order."""
        yield "w_patch", self.w_patch
        yield "b_patch", self.b_patch
        yield "pos", self.pos
        for i, blk in enumerate(self.attn):
            for name, arr in blk.arrays():
                yield f"attn.{i}.{name}", arr
        yield "w_double", self.w_double
        yield "b_double", self.b_double
        yield "reg.r", self.reg.r
        for stack_name, stack in (("extractor", self.extractor),
                                  ("retriever", self.retriever)):
            for i, blk in enumerate(stack):
                for name, arr in blk.arrays():
                    yield f"{stack_name}.{i}.{name}", arr
        for name in ("head_ln_gain", "head_ln_bias", "hq", "hk", "hv", "ho",
                     "w_hidden", "b_hidden", "w_score", "b_score",
                     "w_offset", "b_offset"):
            yield name, getattr(self, name)


def embed_patches(image, model):
    """Non-overlapping patch embedding + positional embedding + attention."""
    cfg = model.cfg
    p = cfg.patch
    h, w = image.shape
    if h % p or w % p:
        raise ContractViolation(f"image size {image.shape} not divisible by patch {p}")
    t_len = (h // p) * (w // p)
    require(t_len <= model.pos.shape[0],
            "crop produces more tokens than the positional embedding covers")
    patches = (np.asarray(image, dtype=np.float64)
               .reshape(h // p, p, w // p, p)
               .transpose(0, 2, 1, 3)
               .reshape(t_len, p * p) / 255.0)
    x = ad.add(ad.matmul(ad.asdiff(patches), model.w_patch), model.b_patch)
    x = ad.add(x, model.pos[:t_len])
    for blk in model.attn:
        x = attention_block(x, blk)
    return x


def cross_attention_head(z_hat, x_hat, model):
    """Search tokens query the dynamic template, then two per-token linear
    heads over the re-gridded search tokens produce a score logit map and a
    2-channel sub-cell offset map."""
    t_x = x_hat.shape[0]
    t_z = z_hat.shape[0]
    side = math.isqrt(t_x)
    if side * side != t_x or math.isqrt(t_z) ** 2 != t_z:
        raise ContractViolation("head expects square crops (perfect-square token counts)")
    if model.cfg.head_norm:
        x_hat = ad.layer_norm(x_hat, model.head_ln_gain, model.head_ln_bias)
        z_hat = ad.layer_norm(z_hat, model.head_ln_gain, model.head_ln_bias)
    q = ad.matmul(x_hat, model.hq)
    k = ad.matmul(z_hat, model.hk)
    v = ad.matmul(z_hat, model.hv)
    scale = 1.0 / math.sqrt(x_hat.shape[1])
    attn = _softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), ad.asdiff(scale)))
    fused = ad.add(x_hat, ad.matmul(ad.matmul(attn, v), model.ho))

    hidden = ad.silu(ad.add(ad.matmul(fused, model.w_hidden), model.b_hidden))
    score = ad.reshape(ad.add(ad.matmul(hidden, model.w_score), model.b_score),
                       (side, side))
    offsets = ad.reshape(ad.add(ad.matmul(hidden, model.w_offset), model.b_offset),
                         (side, side, 2))
    return score, offsets


# ---------------------------------------------------------------------------
# cropping

def crop_window(frame, center, size):
    """Square window around `center`, shifted to stay inside the frame."""
    h, w = frame.shape
    require(size <= h and size <= w, f"crop {size} exceeds frame {frame.shape}")
    ox = int(np.clip(round(float(center[0]) - size / 2.0), 0, w - size))
    oy = int(np.clip(round(float(center[1]) - size / 2.0), 0, h - size))
    return np.asarray(frame[oy:oy + size, ox:ox + size], dtype=np.float64), (ox, oy)


def resize_bilinear(img, out_size):
    if img.shape[0] == out_size and img.shape[1] == out_size:
        return img
    scale = img.shape[0] / out_size
    c = (np.arange(out_size) + 0.5) * scale - 0.5
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return ndimage.map_coordinates(img, [ys, xs], order=1, mode="nearest")


# ---------------------------------------------------------------------------
# tracker state and steps

@dataclass
class TrackerState:
    z: DiffArray            # template tokens (T_z, 2C), frozen after init
    bank: RegisterBank
    last_tip: np.ndarray    # full-frame pixels
    t: int = 0

    def nbytes(self):
        return self.z.data.nbytes + self.last_tip.nbytes + self.bank.nbytes()


@dataclass
class Prediction:
    tip: tuple
    confidence: float
    latency: float


def embed_template(model, frame, tip):
    cfg = model.cfg
    crop, _ = crop_window(frame, tip, cfg.template_size)
    z = embed_patches(crop, model)
    return ad.add(ad.matmul(z, model.w_double), model.b_double)


def _descriptor_norm(r):
    """Non-affine layer norm over the channel axis; keeps stored descriptors
    on a fixed scale so bank statistics compare across models."""
    d = r.shape[-1]
    return ad.layer_norm(r, ad.asdiff(np.ones(d)), ad.asdiff(np.zeros(d)))


def forward_search(model, z, bank, frame, center, crop_px=None):
    """One frame of the pipeline given an explicit crop center.

    Returns (score, offsets, origin, scale); score/offset cells are
    `patch`-sized in resized-search pixels, origin/scale map them back to
    full-frame coordinates. `crop_px` overrides the configured window size
    (scale augmentation during training).
    """
    cfg = model.cfg
    if crop_px is None:
        crop_px = cfg.crop_px
    win, origin = crop_window(frame, center, crop_px)
    search = resize_bilinear(win, cfg.search_size)
    scale = crop_px / cfg.search_size
    x = embed_patches(search, model)
    x = ad.add(ad.matmul(x, model.w_double), model.b_double)
    if cfg.use_register:
        x_hat, r_t = extract(x, model.reg, model.extractor)
        if cfg.descriptor_norm:
            r_t = _descriptor_norm(r_t)
        bank.push(r_t)
        z_hat = retrieve(z, bank, model.retriever)
    else:
        x_hat = x
        for blk in model.extractor:
            x_hat = mamba_block(x_hat, blk)
        z_hat = z
        for blk in model.retriever:
            z_hat = mamba_block(z_hat, blk)
    score, offsets = cross_attention_head(z_hat, x_hat, model)
    return score, offsets, origin, scale


def decode_prediction(score, offsets, origin, scale, cfg, frame_shape):
    """Argmax cell (row-major tie break) + sub-cell offset, in frame pixels."""
    s = score.data if isinstance(score, DiffArray) else score
    o = offsets.data if isinstance(offsets, DiffArray) else offsets
    row, col = np.unravel_index(int(np.argmax(s)), s.shape)
    off = np.clip(o[row, col], -1.0, 2.0)
    sx = (col + off[0]) * cfg.patch
    sy = (row + off[1]) * cfg.patch
    tip = (origin[0] + sx * scale, origin[1] + sy * scale)
    h, w = frame_shape
    clipped = np.array([np.clip(tip[0], 0.0, w - 1.0), np.clip(tip[1], 0.0, h - 1.0)])
    peak = float(s[row, col])
    confidence = 1.0 / (1.0 + np.exp(-peak))
    return tip, clipped, confidence


def tracker_init(model, frame, tip):
    """Build the frozen template at the annotated tip and seed the bank with
    one extractor pass over the initial search crop."""
    cfg = model.cfg
    h, w = frame.shape
    if not (0 <= tip[0] < w and 0 <= tip[1] < h):
        raise ContractViolation(f"init tip {tip} outside frame {frame.shape}")
    z = embed_template(model, frame, tip)
    bank = RegisterBank(cfg.capacity, cfg.k, cfg.width)
    if cfg.use_register:
        win, _ = crop_window(frame, tip, cfg.crop_px)
        search = resize_bilinear(win, cfg.search_size)
        x = embed_patches(search, model)
        x = ad.add(ad.matmul(x, model.w_double), model.b_double)
        _, r0 = extract(x, model.reg, model.extractor)
        if cfg.descriptor_norm:
            r0 = _descriptor_norm(r0)
        bank.push(r0)
    return TrackerState(z=z, bank=bank, last_tip=np.asarray(tip, dtype=np.float64))


def track_step(model, state, frame):
    """Advance one frame: predict the tip and update the state in place."""
    cfg = model.cfg
    t0 = time.perf_counter()
    with ad.no_grad():
        score, offsets, origin, scale = forward_search(
            model, state.z, state.bank, frame, state.last_tip)
        state.bank.detach_entries()
    tip, clipped, confidence = decode_prediction(
        score, offsets, origin, scale, cfg, frame.shape)
    if cfg.max_step_px is not None:
        step = clipped - state.last_tip
        norm = float(np.linalg.norm(step))
        if norm > cfg.max_step_px:
            clipped = state.last_tip + step * (cfg.max_step_px / norm)
            tip = tuple(clipped)
    latency = time.perf_counter() - t0
    state.last_tip = clipped
    state.t += 1
    return Prediction(tip=tip, confidence=confidence, latency=latency), state


# ---------------------------------------------------------------------------
# checkpoints: flat little-endian f32 binary + JSON manifest

def save_checkpoint(base, model, meta=None, opt=None):
    """Write `<base>.bin`/`<base>.json` and quantize the live arrays to the
    stored 32-bit precision so continuing equals resuming bitwise."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    names, arrs = [], []
    for name, arr in model.arrays():
        names.append([name, list(arr.shape)])
        arrs.append(arr)
    blob = b""
    for arr in arrs:
        q = arr.data.astype("<f4")
        arr.data[...] = q.astype(np.float64)
        blob += q.tobytes()
    opt_names = []
    if opt:
        for name in sorted(opt):
            q = opt[name].astype("<f4")
            opt[name][...] = q.astype(np.float64)
            opt_names.append([name, list(opt[name].shape)])
            blob += q.tobytes()
    manifest = {
        "config": config_to_dict(model.cfg),
        "params": names,
        "opt": opt_names,
        "meta": meta or {},
    }
    base.with_suffix(".bin").write_bytes(blob)
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(base):
    """Rebuild (model, meta, opt) from a checkpoint pair."""
    base = Path(base)
    manifest = json.loads(base.with_suffix(".json").read_text())
    blob = base.with_suffix(".bin").read_bytes()
    cfg = config_from_dict(manifest["config"])
    model = TrackerModel.init(np.random.default_rng(0), cfg)
    cursor = 0

    def read_into(shape):
        nonlocal cursor
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob[cursor:cursor + 4 * n], dtype="<f4")
        cursor += 4 * n
        return arr.astype(np.float64).reshape(shape)

    stored = dict((name, shape) for name, shape in manifest["params"])
    for name, arr in model.arrays():
        if name not in stored or list(arr.shape) != stored[name]:
            raise ContractViolation(f"checkpoint parameter mismatch at {name!r}")
        arr.data[...] = read_into(stored[name])
    opt = {}
    for name, shape in manifest["opt"]:
        opt[name] = read_into(shape)
    if cursor != len(blob):
        raise ContractViolation("checkpoint binary length does not match manifest")
    return model, manifest["meta"], opt
