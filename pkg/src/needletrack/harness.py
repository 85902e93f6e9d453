"""Gradient-check sweep over every differentiable operation and the scan
runtime benchmark backing the linear-complexity claim."""

import csv
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, registers, ssm, tracker
from .autodiff import DiffArray, grad_check
from .validation import require

GRADCHECK_THRESHOLD = 1e-5


def _scalarize(out):
    if isinstance(out, tuple):
        total = ad.asdiff(0.0)
        for o in out:
            total = ad.add(total, ad.sum_(ad.mul(o, o)))
        return total
    return ad.sum_(ad.mul(out, out)) if out.size > 1 else out


def _primitive_checks(rng):
    """(name, fn, probe) cases for every AD primitive and composite.

    Probe points are kept away from kinks and zero denominators so central
    differences stay well conditioned.
    """
    def pt(shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    a = pt((3, 4))
    b = pt((3, 4))
    pos = pt((3, 4), 0.5, 2.5)
    away = a + np.sign(a) * 0.5  # no coordinates near zero
    m1 = pt((3, 4))
    m2 = pt((4, 2))
    conv_x = pt((6, 4))
    conv_w = pt((3, 4))
    ln_gain = pt((4,), 0.5, 1.5)
    ln_bias = pt((4,))
    cases = [
        ("add", lambda x: ad.add(x, DiffArray(b)), a),
        ("sub", lambda x: ad.sub(x, DiffArray(b)), a),
        ("mul", lambda x: ad.mul(x, DiffArray(b)), a),
        ("div_num", lambda x: ad.div(x, DiffArray(away)), a),
        ("div_den", lambda x: ad.div(DiffArray(b), x), away),
        ("matmul_left", lambda x: ad.matmul(x, DiffArray(m2)), m1),
        ("matmul_right", lambda x: ad.matmul(DiffArray(m1), x), m2),
        ("exp", ad.exp, a),
        ("ln", ad.ln, pos),
        ("sigmoid", ad.sigmoid, a),
        ("softplus", ad.softplus, a),
        ("silu", ad.silu, a),
        ("absolute", ad.absolute, away),
        ("sum", lambda x: ad.sum_(x, axis=1), a),
        ("mean", lambda x: ad.mean(x, axis=0), a),
        ("variance", lambda x: ad.variance(x, axis=1), a),
        ("sqrt", ad.sqrt_, pos),
        ("reshape", lambda x: ad.reshape(x, (4, 3)), a),
        ("transpose", ad.transpose, a),
        ("getitem", lambda x: x[1:, ::2], a),
        ("concat", lambda x: ad.concat([x, DiffArray(b)], axis=0), a),
        ("take", lambda x: ad.take(x, [2, 0, 1, 0]), a),
        ("conv1d_depthwise_x",
         lambda x: ad.conv1d_depthwise(x, DiffArray(conv_w)), conv_x),
        ("conv1d_depthwise_w",
         lambda w: ad.conv1d_depthwise(DiffArray(conv_x), w), conv_w),
        ("layer_norm",
         lambda x: ad.layer_norm(x, DiffArray(ln_gain), DiffArray(ln_bias)), a),
    ]
    return cases


def _composite_checks(rng):
    t_len, channels, n = 5, 3, 2
    u = rng.normal(size=(t_len, channels))
    a_bar = rng.uniform(0.2, 0.9, size=(t_len, channels, n))
    b_bar = rng.normal(size=(t_len, channels, n))
    c_seq = rng.normal(size=(t_len, n))

    def scan_wrt(which):
        refs = {"u": u, "A_bar": a_bar, "B_bar": b_bar, "C_seq": c_seq}

        def f(x):
            args = {k: (x if k == which else DiffArray(v)) for k, v in refs.items()}
            return ssm.selective_scan_seq(args["u"], args["A_bar"],
                                          args["B_bar"], args["C_seq"])
        return f, refs[which]

    dim = 4
    block = ssm.MambaBlockParams.init(np.random.default_rng(0), dim, n_state=2)
    tokens = rng.normal(size=(6, dim))

    ext = registers.make_extractor(np.random.default_rng(0), width=dim,
                                   depth=1, n_state=2)
    reg = registers.RegisterTemplate.init(np.random.default_rng(1), k=2, width=dim)
    bank = registers.RegisterBank(4, 2, dim)
    bank.push(DiffArray(rng.normal(size=(2, dim))))
    bank.push(DiffArray(rng.normal(size=(2, dim))))

    rd_cfg = losses.RdLossConfig()
    reg_batch = rng.normal(size=(3, 4, 5))
    entries = rng.normal(size=(5, 3, 4))
    entries_rd = rng.normal(size=(6, 4, 5))

    head_cfg = tracker.TrackerConfig(search_size=16, template_size=16, patch=8,
                                     channels=2, k=2, capacity=4,
                                     backbone_depth=0, depth=1, n_state=2,
                                     crop_factor=1.0)
    head_model = tracker.TrackerModel.init(np.random.default_rng(2), head_cfg)
    z_tok = rng.normal(size=(4, 4))
    x_tok = rng.normal(size=(4, 4))

    target = losses.TrackingTarget(tip=(11.0, 17.0), sigma=8.0, cell_px=8.0)
    score = rng.normal(size=(4, 4))
    offs = rng.normal(size=(4, 4, 2)) + 2.0  # away from the L1 kink

    cases = []
    for which in ("u", "A_bar", "B_bar", "C_seq"):
        f, probe = scan_wrt(which)
        cases.append((f"selective_scan_seq[{which}]",
                      lambda x, f=f: _scalarize(f(x)), probe))
    cases += [
        ("mamba_block", lambda x: _scalarize(ssm.mamba_block(x, block)), tokens),
        ("extract", lambda x: _scalarize(registers.extract(x, reg, ext)), tokens),
        ("retrieve", lambda x: _scalarize(registers.retrieve(x, bank, ext)),
         rng.normal(size=(4, dim))),
        ("variance_term", lambda x: losses.variance_term(x, rd_cfg), reg_batch),
        ("diversify_term", losses.diversify_term, entries),
        ("rd_loss", lambda x: losses.rd_loss(x, DiffArray(entries_rd), rd_cfg),
         reg_batch),
        ("cross_attention_head",
         lambda x: _scalarize(tracker.cross_attention_head(
             DiffArray(z_tok), x, head_model)), x_tok),
        ("tracking_loss",
         lambda x: losses.tracking_loss(x, DiffArray(offs), target), score),
    ]
    return cases


def gradcheck_all(seed=0):
    """Finite-difference check of every primitive and composite op.

    Returns [(name, max relative error)] sorted by declaration order; an
    entry fails when its error exceeds GRADCHECK_THRESHOLD.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, f, probe in _primitive_checks(rng) + _composite_checks(rng):
        results.append((name, grad_check(lambda x, f=f: _scalarize(f(x)),
                                         DiffArray(np.asarray(probe)))))
    return results


def gradcheck_report(seed=0):
    results = gradcheck_all(seed)
    ok = all(err < GRADCHECK_THRESHOLD for _, err in results)
    lines = [f"{'PASS' if err < GRADCHECK_THRESHOLD else 'FAIL'} "
             f"{name:32s} max_rel_err={err:.3e}" for name, err in results]
    return ok, "\n".join(lines)


# ---------------------------------------------------------------------------
# scan benchmark

def bench_scan(lengths, n_state=8, channels=16, repeats=5, chunk=64, seed=0):
    """Median forward runtimes of both scan variants per sequence length.

    Returns (rows, ratios): rows are (length, variant, seconds); ratios map
    a consecutive doubling (T, 2T, variant) to time(2T)/time(T).
    """
    lengths = list(lengths)
    require(all(b > a for a, b in zip(lengths, lengths[1:])),
            "lengths must be strictly ascending")
    rng = np.random.default_rng(seed)
    rows = []
    medians = {}
    for t_len in lengths:
        u = DiffArray(rng.normal(size=(t_len, channels)))
        a_bar = DiffArray(rng.uniform(0.1, 0.95, size=(t_len, channels, n_state)))
        b_bar = DiffArray(rng.normal(size=(t_len, channels, n_state)))
        c_seq = DiffArray(rng.normal(size=(t_len, n_state)))
        for variant, fn in (
                ("seq", lambda: ssm.selective_scan_seq(u, a_bar, b_bar, c_seq)),
                ("chunked", lambda: ssm.selective_scan_chunked(
                    u, a_bar, b_bar, c_seq, chunk))):
            times = []
            with ad.no_grad():
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            medians[(t_len, variant)] = med
            rows.append((t_len, variant, med))
    ratios = {}
    for a, b in zip(lengths, lengths[1:]):
        if b == 2 * a:
            for variant in ("seq", "chunked"):
                ratios[(a, b, variant)] = medians[(b, variant)] / medians[(a, variant)]
    return rows, ratios


def write_bench_csv(path, rows, ratios):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length", "variant", "seconds"])
        for t_len, variant, sec in rows:
            writer.writerow([t_len, variant, repr(sec)])
        writer.writerow([])
        writer.writerow(["from_length", "to_length", "variant", "doubling_ratio"])
        for (a, b, variant), r in sorted(ratios.items()):
            writer.writerow([a, b, variant, repr(r)])
