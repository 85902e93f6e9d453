"""Register mechanism: cross-map interleaving, the fixed-capacity register
bank, and the extractor/retriever built from stacked gated SSM blocks.

The extractor distills each search map into a compact per-frame descriptor
by inserting register tokens *behind* evenly split image segments; the
retriever injects stored descriptors *before* the segments of the template
so the result becomes a dynamic template carrying temporal context.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .ssm import MambaBlockParams, mamba_block
from .validation import ContractViolation, require


@dataclass
class RegisterTemplate:
    """Trainable register tokens, shared across all frames of all sequences."""

    r: DiffArray  # (k, width)

    @classmethod
    def init(cls, rng, k, width, dtype=np.float64):
        return cls(DiffArray(rng.normal(0.0, 0.5, size=(k, width)),
                             requires_grad=True, dtype=dtype))

    @property
    def k(self):
        return self.r.shape[0]

    @property
    def width(self):
        return self.r.shape[1]


class RegisterBank:
    """Newest-first store of per-frame register descriptors with FIFO
    eviction at a fixed capacity (capacity None means unbounded)."""

    def __init__(self, capacity, k, width):
        if capacity is not None:
            require(capacity >= 1, "bank capacity must be >= 1 (or None for unbounded)")
        self.capacity = capacity
        self.k = k
        self.width = width
        self.entries = []  # [r_t, r_{t-1}, ...]

    @property
    def count(self):
        return len(self.entries)

    def push(self, r_t):
        if r_t.shape != (self.k, self.width):
            raise ContractViolation(
                f"bank push: expected shape {(self.k, self.width)}, got {r_t.shape}")
        self.entries.insert(0, r_t)
        if self.capacity is not None and len(self.entries) > self.capacity:
            self.entries.pop()
        return self

    def stacked(self):
        """All entries as one (count, k, width) array, newest first."""
        require(self.count >= 1, "bank is empty")
        flat = ad.concat(self.entries, axis=0)
        return ad.reshape(flat, (self.count, self.k, self.width))

    def detach_entries(self):
        self.entries = [e.detach() for e in self.entries]

    def nbytes(self):
        return sum(e.data.nbytes for e in self.entries)

    # -- snapshot serialization: little-endian i64 count, then entries
    #    newest-first as f32, plus a JSON sidecar with {L, k, C}.
    def to_bytes(self):
        blob = np.int64(self.count).astype("<i8").tobytes()
        for e in self.entries:
            blob += e.data.astype("<f4").tobytes()
        return blob

    def sidecar(self):
        return json.dumps({"L": self.capacity, "k": self.k, "C": self.width // 2})

    @classmethod
    def from_bytes(cls, blob, sidecar):
        meta = json.loads(sidecar)
        k, width = meta["k"], 2 * meta["C"]
        bank = cls(meta["L"], k, width)
        count = int(np.frombuffer(blob[:8], dtype="<i8")[0])
        entry_bytes = k * width * 4
        for i in range(count):
            start = 8 + i * entry_bytes
            arr = np.frombuffer(blob[start:start + entry_bytes], dtype="<f4")
            bank.entries.append(DiffArray(arr.reshape(k, width), dtype=np.float32))
        return bank


def bank_push(bank, r_t):
    """Push a descriptor as the newest entry, evicting the oldest when full."""
    return bank.push(r_t)


@dataclass
class InterleaveLayout:
    """Bookkeeping for one interleave call: the permutation applied to
    [image_tokens; extra_tokens] and where each kind ended up."""

    mode: str
    total: int
    n_image: int
    n_extra: int
    group: int
    segment_sizes: list
    perm: np.ndarray = field(repr=False)
    image_positions: np.ndarray = field(repr=False)
    extra_positions: np.ndarray = field(repr=False)


def _segment_sizes(t_len, m):
    q, r = divmod(t_len, m)
    return [q + 1] * r + [q] * (m - r)  # longer segments first


def interleave(image_tokens, extra_tokens, mode, group=1):
    """Fuse image tokens with register tokens by cross-map scanning order.

    The image tokens are split into m contiguous segments (m = number of
    extra-token groups); mode 'behind' appends group j after segment j,
    mode 'before' prepends it. Relative image-token order is preserved.
    """
    if mode not in ("behind", "before"):
        raise ContractViolation(f"unknown interleave mode {mode!r}")
    t_len = image_tokens.shape[0]
    n_extra = extra_tokens.shape[0]
    require(image_tokens.ndim == 2 and extra_tokens.ndim == 2
            and image_tokens.shape[1] == extra_tokens.shape[1],
            "image and extra tokens must be (n, dim) with matching dim")
    require(group >= 1 and n_extra % group == 0,
            "extra token count must be a multiple of the group size")
    m = n_extra // group
    require(m >= 1, "need at least one extra token")
    require(t_len >= m, f"cannot split {t_len} image tokens into {m} non-empty segments")

    sizes = _segment_sizes(t_len, m)
    order = []
    img_next = 0
    for j, size in enumerate(sizes):
        seg = list(range(img_next, img_next + size))
        grp = list(range(t_len + j * group, t_len + (j + 1) * group))
        img_next += size
        order.extend(seg + grp if mode == "behind" else grp + seg)
    perm = np.asarray(order, dtype=np.intp)

    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    layout = InterleaveLayout(
        mode=mode, total=t_len + n_extra, n_image=t_len, n_extra=n_extra,
        group=group, segment_sizes=sizes, perm=perm,
        image_positions=inverse[:t_len], extra_positions=inverse[t_len:])
    fused = ad.take(ad.concat([image_tokens, extra_tokens], axis=0), perm)
    return fused, layout


def deinterleave(fused, layout):
    """Exact inverse of :func:`interleave` for the layout that produced it."""
    if fused.shape[0] != layout.total:
        raise ContractViolation(
            f"fused length {fused.shape[0]} does not match layout total {layout.total}")
    image = ad.take(fused, layout.image_positions)
    extra = ad.take(fused, layout.extra_positions)
    return image, extra


def extract(x_t, reg, blocks, chunk=None):
    """Run the register extractor on one search map.

    Returns the enriched image tokens x_hat and the per-frame descriptor
    r_t read back from the register positions. Depends only on x_t, the
    shared register and the block weights; never on any bank state.
    """
    require(x_t.shape[0] >= reg.k, "need at least k image tokens")
    fused, layout = interleave(x_t, reg.r, "behind")
    for blk in blocks:
        fused = mamba_block(fused, blk, chunk=chunk)
    x_hat, r_t = deinterleave(fused, layout)
    return x_hat, r_t


def retrieve(z, bank, blocks, chunk=None):
    """Build the dynamic template by scanning bank descriptors into z.

    Bank entries are inserted newest-first as one k-token group before each
    image segment. When the bank holds more entries than z has tokens, the
    oldest entries beyond the cap are skipped for this frame.
    """
    if bank.count < 1:
        raise ContractViolation("retrieve requires a non-empty bank; seed it at init")
    t_z = z.shape[0]
    m = min(bank.count, t_z)
    extra = ad.concat(bank.entries[:m], axis=0)
    fused, layout = interleave(z, extra, "before", group=bank.k)
    for blk in blocks:
        fused = mamba_block(fused, blk, chunk=chunk)
    z_hat, _ = deinterleave(fused, layout)
    return z_hat


def make_extractor(rng, width, depth=2, n_state=8, dtype=np.float64):
    return [MambaBlockParams.init(rng, dim=width, n_state=n_state, dtype=dtype)
            for _ in range(depth)]
