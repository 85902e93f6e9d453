"""State-space kernels: ZOH discretization, the selective scan recurrence
(sequential and chunked), input-dependent parameterization, and the gated
block wrapper used by the register extractor and retriever.

The state matrix is diagonal per channel and parameterized as
A = -exp(a_log), which keeps the continuous system strictly stable and the
discrete transition |A_bar| < 1 for any positive step size.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .validation import ContractViolation, require

A_ZERO_THRESHOLD = 1e-8  # below this |A| the Taylor limit B_bar = delta*B is used


@dataclass
class SsmParams:
    """Learnable selective-scan parameters for one block.

    a_log: (channels, n_state); delta_bias: (channels,); the three
    projections map the token dimension to n_state, n_state and channels.
    """

    a_log: DiffArray
    delta_bias: DiffArray
    w_b: DiffArray
    b_b: DiffArray
    w_c: DiffArray
    b_c: DiffArray
    w_delta: DiffArray
    b_delta: DiffArray
    n_state: int

    @classmethod
    def init(cls, rng, dim, channels, n_state, dtype=np.float64):
        def lin(shape, scale):
            return DiffArray(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=dtype)

        # S4D-style spread of decay rates across the state dimension
        a_log = np.log(np.broadcast_to(np.arange(1, n_state + 1, dtype=np.float64), (channels, n_state)))
        # inverse softplus of time steps drawn in [1e-3, 1e-1]
        dt = rng.uniform(1e-3, 1e-1, size=channels)
        delta_bias = np.log(np.expm1(dt))
        s = 1.0 / math.sqrt(dim)
        return cls(
            a_log=DiffArray(a_log, requires_grad=True, dtype=dtype),
            delta_bias=DiffArray(delta_bias, requires_grad=True, dtype=dtype),
            w_b=lin((dim, n_state), s), b_b=lin((n_state,), 0.0),
            w_c=lin((dim, n_state), s), b_c=lin((n_state,), 0.0),
            w_delta=lin((dim, channels), s), b_delta=lin((channels,), 0.0),
            n_state=n_state,
        )

    def arrays(self):
        yield from (
            ("a_log", self.a_log), ("delta_bias", self.delta_bias),
            ("w_b", self.w_b), ("b_b", self.b_b),
            ("w_c", self.w_c), ("b_c", self.b_c),
            ("w_delta", self.w_delta), ("b_delta", self.b_delta),
        )


@dataclass
class MambaBlockParams:
    """Gated SSM block: norm -> projection -> causal depthwise conv ->
    selective scan -> silu gate -> output projection, plus residual."""

    ln_gain: DiffArray
    ln_bias: DiffArray
    w_in: DiffArray
    b_in: DiffArray
    conv_w: DiffArray  # (kernel, channels), causal along the token axis
    conv_b: DiffArray
    w_gate: DiffArray
    b_gate: DiffArray
    w_out: DiffArray
    b_out: DiffArray
    ssm: SsmParams

    @classmethod
    def init(cls, rng, dim, n_state=8, conv_kernel=3, dtype=np.float64):
        s = 1.0 / math.sqrt(dim)

        def lin(shape, scale=s):
            return DiffArray(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=dtype)

        return cls(
            ln_gain=DiffArray(np.ones(dim), requires_grad=True, dtype=dtype),
            ln_bias=DiffArray(np.zeros(dim), requires_grad=True, dtype=dtype),
            w_in=lin((dim, dim)), b_in=lin((dim,), 0.0),
            conv_w=lin((conv_kernel, dim), 0.5), conv_b=lin((dim,), 0.0),
            w_gate=lin((dim, dim)), b_gate=lin((dim,), 0.0),
            w_out=lin((dim, dim)), b_out=lin((dim,), 0.0),
            ssm=SsmParams.init(rng, dim, channels=dim, n_state=n_state, dtype=dtype),
        )

    def arrays(self):
        for name in ("ln_gain", "ln_bias", "w_in", "b_in", "conv_w", "conv_b",
                     "w_gate", "b_gate", "w_out", "b_out"):
            yield name, getattr(self, name)
        for name, arr in self.ssm.arrays():
            yield "ssm." + name, arr

    def make_passthrough(self):
        """Zero the output projection so the block reduces to its residual."""
        self.w_out.data[:] = 0.0
        self.b_out.data[:] = 0.0


def discretize(A, B, delta):
    """Zero-order-hold discretization, elementwise over a diagonal state.

    A_bar = exp(delta*A); B_bar = ((exp(delta*A) - 1)/A) * B, with the
    Taylor limit B_bar = delta*B taken where |A| < 1e-8. Inputs must be
    mutually broadcastable; delta must be strictly positive.
    """
    if not np.all(delta.data > 0):
        raise ContractViolation("discretize: delta must be strictly positive")
    dA = ad.mul(delta, A)
    A_bar = ad.exp(dA)

    near_zero = (np.abs(A.data) < A_ZERO_THRESHOLD).astype(A.dtype)
    mask = DiffArray(near_zero, dtype=A.dtype)
    inv_mask = DiffArray(1.0 - near_zero, dtype=A.dtype)
    A_safe = ad.add(A, mask)  # shifts only the masked-out entries
    ratio = ad.div(ad.sub(A_bar, ad.asdiff(np.ones_like(A_bar.data))), A_safe)
    exact = ad.mul(ad.mul(ratio, inv_mask), B)
    limit = ad.mul(ad.mul(delta, mask), B)
    B_bar = ad.add(exact, limit)
    return A_bar, B_bar


def input_params(tokens, params):
    """Per-token B, C and delta = softplus(delta_bias + Linear(token))."""
    require(tokens.ndim == 2 and tokens.shape[0] >= 1, "tokens must be a non-empty (T, dim) array")
    b_seq = ad.add(ad.matmul(tokens, params.w_b), params.b_b)
    c_seq = ad.add(ad.matmul(tokens, params.w_c), params.b_c)
    delta = ad.softplus(ad.add(ad.add(ad.matmul(tokens, params.w_delta), params.b_delta),
                               params.delta_bias))
    return b_seq, c_seq, delta


def _check_scan_shapes(u, A_bar, B_bar, C_seq):
    if u.ndim != 2:
        raise ContractViolation("scan input u must be (T, channels)")
    t_len, channels = u.shape
    n = A_bar.shape[-1]
    if A_bar.shape != (t_len, channels, n) or B_bar.shape != (t_len, channels, n):
        raise ContractViolation(
            f"A_bar/B_bar must be (T, channels, N); got {A_bar.shape}, {B_bar.shape}")
    if C_seq.shape != (t_len, n):
        raise ContractViolation(f"C_seq must be (T, N); got {C_seq.shape}")
    return t_len, channels, n


def _states_sequential(u, A_bar, B_bar):
    t_len, channels = u.shape
    n = A_bar.shape[-1]
    hs = np.empty((t_len, channels, n), dtype=u.dtype)
    h = np.zeros((channels, n), dtype=u.dtype)
    for t in range(t_len):
        h = A_bar[t] * h + B_bar[t] * u[t][:, None]
        hs[t] = h
    return hs


def _states_chunked(u, A_bar, B_bar, chunk):
    t_len, channels = u.shape
    n = A_bar.shape[-1]
    n_chunks = -(-t_len // chunk)
    pad = n_chunks * chunk - t_len
    if pad:
        u = np.concatenate([u, np.zeros((pad, channels), dtype=u.dtype)])
        A_bar = np.concatenate([A_bar, np.ones((pad, channels, n), dtype=A_bar.dtype)])
        B_bar = np.concatenate([B_bar, np.zeros((pad, channels, n), dtype=B_bar.dtype)])
    uc = u.reshape(n_chunks, chunk, channels)
    ac = A_bar.reshape(n_chunks, chunk, channels, n)
    bc = B_bar.reshape(n_chunks, chunk, channels, n)

    # local zero-state scan of every chunk at once, plus running A products
    h_loc = np.zeros((n_chunks, channels, n), dtype=u.dtype)
    prod = np.ones((n_chunks, channels, n), dtype=u.dtype)
    hs = np.empty((n_chunks, chunk, channels, n), dtype=u.dtype)
    prods = np.empty_like(hs)
    for s in range(chunk):
        h_loc = ac[:, s] * h_loc + bc[:, s] * uc[:, s][:, :, None]
        hs[:, s] = h_loc
        prod = prod * ac[:, s]
        prods[:, s] = prod

    # sequential cross-chunk state carry
    carry = np.zeros((channels, n), dtype=u.dtype)
    for j in range(n_chunks):
        hs[j] += prods[j] * carry
        carry = hs[j, -1]
    return hs.reshape(n_chunks * chunk, channels, n)[:t_len]


def _emit(hs, C_seq):
    return np.einsum("tcn,tn->tc", hs, C_seq)


def _scan_backward(u, A_bar, B_bar, C_seq, hs, g):
    t_len, channels = u.shape
    dC = np.einsum("tc,tcn->tn", g, hs)
    du = np.empty_like(u)
    dA = np.empty_like(A_bar)
    dB = np.empty_like(B_bar)
    dh = np.zeros((channels, A_bar.shape[-1]), dtype=u.dtype)
    for t in range(t_len - 1, -1, -1):
        dh = dh + g[t][:, None] * C_seq[t][None, :]
        h_prev = hs[t - 1] if t > 0 else 0.0
        dA[t] = dh * h_prev
        dB[t] = dh * u[t][:, None]
        du[t] = (dh * B_bar[t]).sum(axis=1)
        dh = dh * A_bar[t]
    return du, dA, dB, dC


def _scan_node(u, A_bar, B_bar, C_seq, hs):
    data = _emit(hs, C_seq.data)

    def backward(g):
        return _scan_backward(u.data, A_bar.data, B_bar.data, C_seq.data, hs, g)

    return ad._node(data, (u, A_bar, B_bar, C_seq), backward)


def selective_scan_seq(u, A_bar, B_bar, C_seq):
    """Exact unrolled recurrence h_t = A_bar_t h_{t-1} + B_bar_t u_t with
    y_t = C_t . h_t, starting from h_0 = 0. Causal in u by construction.

    The backward pass is the adjoint reverse recurrence, not a step-by-step
    tape replay, so tape size stays independent of T.
    """
    _check_scan_shapes(u, A_bar, B_bar, C_seq)
    hs = _states_sequential(u.data, A_bar.data, B_bar.data)
    return _scan_node(u, A_bar, B_bar, C_seq, hs)


def selective_scan_chunked(u, A_bar, B_bar, C_seq, chunk):
    """Chunked evaluation of the same recurrence: all chunks are scanned
    from a zero state in lockstep, then a sequential cross-chunk carry
    reconstructs the global states. Output matches selective_scan_seq up to
    floating-point reassociation."""
    if not isinstance(chunk, int) or chunk < 1:
        raise ContractViolation("chunk must be a positive integer")
    _check_scan_shapes(u, A_bar, B_bar, C_seq)
    hs = _states_chunked(u.data, A_bar.data, B_bar.data, chunk)
    return _scan_node(u, A_bar, B_bar, C_seq, hs)


def mamba_block(tokens, params, chunk=None):
    """Full gated block over a (T, dim) token sequence; output keeps the
    input shape and carries a residual connection."""
    require(tokens.ndim == 2 and tokens.shape[0] >= 1, "tokens must be (T, dim) with T >= 1")
    t_len, dim = tokens.shape
    normed = ad.layer_norm(tokens, params.ln_gain, params.ln_bias)
    a = ad.add(ad.matmul(normed, params.w_in), params.b_in)
    a = ad.add(ad.conv1d_depthwise(a, params.conv_w), params.conv_b)
    a = ad.silu(a)

    b_seq, c_seq, delta = input_params(a, params.ssm)
    channels = dim
    n = params.ssm.n_state
    A = ad.mul(ad.exp(params.ssm.a_log), ad.asdiff(np.full((), -1.0, dtype=tokens.dtype)))
    A = ad.reshape(A, (1, channels, n))
    A_bar, B_bar = discretize(
        A, ad.reshape(b_seq, (t_len, 1, n)), ad.reshape(delta, (t_len, channels, 1)))
    y = (selective_scan_seq(a, A_bar, B_bar, c_seq) if chunk is None
         else selective_scan_chunked(a, A_bar, B_bar, c_seq, chunk))

    gate = ad.silu(ad.add(ad.matmul(normed, params.w_gate), params.b_gate))
    out = ad.add(ad.matmul(ad.mul(y, gate), params.w_out), params.b_out)
    return ad.add(tokens, out)
