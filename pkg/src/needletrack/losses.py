"""Register diversify loss (variance-promoting + cross-register
decorrelation terms) and the supervised tracking loss.

The variance population is taken across the k register tokens within each
register output and then batch-averaged; the cross-register term mean-pools
the k axis first so each bank entry contributes one scalar per dimension.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .validation import ContractViolation, require


@dataclass
class RdLossConfig:
    tau: float = 1.0
    eps: float = 1e-4
    alpha: float = 0.01
    beta: float = 0.01
    flatten_tokens: bool = False  # ablation: fold k into d instead of mean-pooling

    def __post_init__(self):
        require(self.tau > 0 and self.eps > 0, "tau and eps must be positive")
        require(self.alpha >= 0 and self.beta >= 0, "loss weights must be non-negative")


@dataclass
class TrackingTarget:
    """Ground truth for one frame: tip position in search-map pixels plus
    the Gaussian heatmap width."""

    tip: tuple          # (x, y) pixels within the search crop
    sigma: float = 16.0  # heatmap sigma in pixels (2 cells at the default cell size)
    cell_px: float = 8.0


def variance_term(registers, cfg):
    """Penalize register dimensions whose std (across the k tokens, batch
    averaged) falls below tau: mean_d softplus(tau - sqrt(V + eps))."""
    require(registers.ndim == 3, "registers must be (batch, k, d)")
    b, k, d = registers.shape
    require(b >= 1, "need at least one batch element")
    if k < 2:
        raise ContractViolation("variance over a single token is degenerate (k >= 2)")
    v = ad.mean(ad.variance(registers, axis=1), axis=0)           # (d,)
    std = ad.sqrt_(ad.add(v, ad.asdiff(np.full(d, cfg.eps))))
    gap = ad.sub(ad.asdiff(np.full(d, cfg.tau)), std)
    return ad.mean(ad.softplus(gap))


def diversify_term(bank_entries, flatten_tokens=False):
    """Cross-register decorrelation over bank entries.

    Entries are mean-pooled over the k axis (or flattened into d), centered
    per dimension across the L entries, and the squared products of all
    ordered pairs i != j are averaged: sum_p [(S2_p)^2 - S4_p] / (d L (L-1))
    with S2 = sum_i c_i^2, S4 = sum_i c_i^4.
    """
    require(bank_entries.ndim == 3, "bank entries must be (L, k, d)")
    l_eff, k, d = bank_entries.shape
    if l_eff < 2:
        raise ContractViolation("diversify term needs at least two bank entries")
    if flatten_tokens:
        pooled = ad.reshape(bank_entries, (l_eff, k * d))
        d_eff = k * d
    else:
        pooled = ad.mean(bank_entries, axis=1)
        d_eff = d
    centered = ad.sub(pooled, ad.mean(pooled, axis=0, keepdims=True))
    sq = ad.mul(centered, centered)
    s2 = ad.sum_(sq, axis=0)
    s4 = ad.sum_(ad.mul(sq, sq), axis=0)
    total = ad.sum_(ad.sub(ad.mul(s2, s2), s4))
    return ad.mul(total, ad.asdiff(1.0 / (d_eff * l_eff * (l_eff - 1))))


def rd_loss(registers, bank_entries, cfg):
    """alpha * variance term + beta * diversify term.

    Zero-weighted terms are skipped entirely so degenerate inputs (single
    bank entry with beta = 0) stay valid.
    """
    total = ad.asdiff(0.0)
    if cfg.alpha > 0:
        total = ad.add(total, ad.mul(variance_term(registers, cfg), ad.asdiff(cfg.alpha)))
    if cfg.beta > 0:
        total = ad.add(total, ad.mul(
            diversify_term(bank_entries, cfg.flatten_tokens), ad.asdiff(cfg.beta)))
    return total


def target_heatmap(target, shape, dtype=np.float64):
    """Peak-normalized Gaussian centered at the target tip, on the score grid."""
    h, w = shape
    cx = target.tip[0] / target.cell_px
    cy = target.tip[1] / target.cell_px
    if not (0 <= cx < w and 0 <= cy < h):
        raise ContractViolation(f"target tip {target.tip} outside the search crop")
    ys, xs = np.mgrid[0:h, 0:w]
    sigma_c = target.sigma / target.cell_px
    centers_x = xs + 0.5
    centers_y = ys + 0.5
    heat = np.exp(-((centers_x - cx) ** 2 + (centers_y - cy) ** 2) / (2.0 * sigma_c ** 2))
    return heat.astype(dtype)


def target_cell_and_offset(target, shape):
    """Grid cell containing the tip and the sub-cell offset in [0, 1)."""
    h, w = shape
    cx = target.tip[0] / target.cell_px
    cy = target.tip[1] / target.cell_px
    col = min(int(cx), w - 1)
    row = min(int(cy), h - 1)
    return (row, col), (cx - col, cy - row)


def tracking_loss(score_map, offset_map, target):
    """Gaussian-heatmap regression plus an L1 sub-cell offset penalty at
    the target cell; offset weight is 1."""
    require(score_map.ndim == 2, "score map must be (H, W)")
    h, w = score_map.shape
    if offset_map.shape != (h, w, 2):
        raise ContractViolation("offset map must be (H, W, 2) matching the score map")
    heat = ad.asdiff(target_heatmap(target, (h, w), dtype=score_map.dtype))
    diff = ad.sub(score_map, heat)
    heat_term = ad.sum_(ad.mul(diff, diff))

    (row, col), (fx, fy) = target_cell_and_offset(target, (h, w))
    pred = offset_map[row, col]
    truth = ad.asdiff(np.asarray([fx, fy], dtype=offset_map.dtype))
    off_term = ad.sum_(ad.absolute(ad.sub(pred, truth)))
    return ad.add(heat_term, off_term)
