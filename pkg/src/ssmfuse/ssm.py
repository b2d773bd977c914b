"""Selective state-space scan and the gated sequence layer built on it.

The recurrence is the diagonal discrete-time system

    h_t = abar_t * h_{t-1} + bbar_t * u_t,      y_t = <c_t, h_t>   (per channel)

with input-dependent bbar, c and timestep, which is what makes the scan
selective. ``scan_sequential`` is the reference loop; ``scan_parallel``
evaluates the same recurrence as a prefix scan under the associative
combine (a1, b1) o (a2, b2) = (a1*a2, a2*b1 + b2), processed in fixed-size
blocks so memory stays bounded at long sequence lengths.

Discretization follows the zero-order-hold convention for the state and a
first-order simplification for the input path:

    abar = exp(delta * a),      bbar = delta * b.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .tensor import Tensor

_SCAN_BLOCK = 256


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with w stored (in_dim, out_dim)."""
    out = tn.matmul(x, w)
    if b is not None:
        out = out + b
    return out


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype, scale: float = 1.0):
    bound = scale / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class SsmCore:
    """Diagonal selective SSM parameters for ``d_inner`` channels, ``n_state`` states each.

    The state matrix is parameterized as a = -exp(a_log), which keeps the
    continuous dynamics strictly stable and the discretized abar in (0, 1)
    for any positive timestep.
    """

    def __init__(self, d_inner: int, n_state: int = 16, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.d_inner = d_inner
        self.n_state = n_state
        a_init = np.log(np.tile(np.arange(1, n_state + 1, dtype=dtype), (d_inner, 1)))
        self.a_log = Tensor(a_init, requires_grad=True)
        self.delta_w = _kaiming(rng, (d_inner, d_inner), d_inner, dtype, scale=0.5)
        lo, hi = inv_softplus(0.001), inv_softplus(0.1)
        self.delta_b = Tensor(rng.uniform(lo, hi, d_inner).astype(dtype), requires_grad=True)
        self.b_w = _kaiming(rng, (d_inner, n_state), d_inner, dtype)
        self.c_w = _kaiming(rng, (d_inner, n_state), d_inner, dtype)

    def params(self) -> dict[str, Tensor]:
        return {"a_log": self.a_log, "delta_w": self.delta_w, "delta_b": self.delta_b,
                "b_w": self.b_w, "c_w": self.c_w}


def discretize(a_diag: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of the diagonal system.

    a_diag: (D, N) per-channel diagonal, b: (T, N), delta: (T, D), all
    timesteps strictly positive. Returns abar, bbar of shape (T, D, N).
    """
    if np.any(delta.data <= 0):
        raise ValueError("discretize: timestep must be strictly positive everywhere")
    a_d, b_d, dt = a_diag.data, b.data, delta.data

    abar_val = np.exp(dt[:, :, None] * a_d[None, :, :])

    def vjp_a(g):
        ga = np.einsum("tdn,tdn,td->dn", g, abar_val, dt)
        gdt = np.einsum("tdn,tdn,dn->td", g, abar_val, a_d)
        return ga, gdt

    abar = tn.apply_op("discretize_a", abar_val, (a_diag, delta), vjp_a)

    bbar_val = dt[:, :, None] * b_d[:, None, :]

    def vjp_b(g):
        gb = np.einsum("tdn,td->tn", g, dt)
        gdt = np.einsum("tdn,tn->td", g, b_d)
        return gb, gdt

    bbar = tn.apply_op("discretize_b", bbar_val, (b, delta), vjp_b)
    return abar, bbar


def scan_combine(a1, b1, a2, b2):
    """Associative combine of two recurrence segments (apply segment 1, then 2)."""
    return a1 * a2, a2 * b1 + b2


def _check_scan_shapes(abar, bbar, c, u):
    T, D, N = abar.shape
    if bbar.shape != (T, D, N) or c.shape != (T, N) or u.shape != (T, D):
        raise tn.ShapeError(
            f"scan: inconsistent shapes abar={abar.shape} bbar={bbar.shape} "
            f"c={c.shape} u={u.shape}")
    return T, D, N


def _scan_vjp(abar_d, bbar_d, c_d, u_d, hs):
    def vjp(gy):
        T, D, N = abar_d.shape
        ga = np.empty_like(abar_d)
        gb = np.empty_like(bbar_d)
        gc = np.empty_like(c_d)
        gu = np.empty_like(u_d)
        gh = np.zeros((D, N), dtype=abar_d.dtype)
        for t in range(T - 1, -1, -1):
            gh = gh + c_d[t][None, :] * gy[t][:, None]
            ga[t] = gh * (hs[t - 1] if t > 0 else 0.0)
            gb[t] = gh * u_d[t][:, None]
            gu[t] = (gh * bbar_d[t]).sum(axis=1)
            gc[t] = (hs[t] * gy[t][:, None]).sum(axis=0)
            gh = gh * abar_d[t]
        return ga, gb, gc, gu
    return vjp


def scan_sequential(abar: Tensor, bbar: Tensor, c: Tensor, u: Tensor) -> Tensor:
    """Reference recurrence, one timestep at a time, h_0 = 0."""
    T, D, N = _check_scan_shapes(abar.data, bbar.data, c.data, u.data)
    hs = np.empty((T, D, N), dtype=abar.data.dtype)
    h = np.zeros((D, N), dtype=abar.data.dtype)
    for t in range(T):
        h = abar.data[t] * h + bbar.data[t] * u.data[t][:, None]
        hs[t] = h
    y = np.einsum("tdn,tn->td", hs, c.data)
    return tn.apply_op("scan_sequential", y, (abar, bbar, c, u),
                       _scan_vjp(abar.data, bbar.data, c.data, u.data, hs))


def _hillis_steele(a, bv, h0):
    """In-block inclusive prefix combine; mutates a and bv, returns the states."""
    stride = 1
    while stride < a.shape[0]:
        bv[stride:] = a[stride:] * bv[:-stride] + bv[stride:]
        a[stride:] = a[stride:] * a[:-stride]
        stride *= 2
    return a * h0[None] + bv


def _scan_states_blocked(abar, bu):
    """Blocked Hillis-Steele prefix scan of the pair stream (abar_t, bu_t).

    Returns the per-block state arrays; concatenated they form h: (T, D, N).
    Blocking keeps the O(T log T) reassociation confined to fixed-size
    windows, so work and memory stay linear in T.
    """
    T = abar.shape[0]
    D, N = abar.shape[1], abar.shape[2]
    h0 = np.zeros((D, N), dtype=abar.dtype)
    blocks = []
    for start in range(0, T, _SCAN_BLOCK):
        h = _hillis_steele(abar[start:start + _SCAN_BLOCK].copy(),
                           bu[start:start + _SCAN_BLOCK].copy(), h0)
        h0 = h[-1]
        blocks.append(h)
    return blocks


def scan_parallel(abar: Tensor, bbar: Tensor, c: Tensor, u: Tensor) -> Tensor:
    """Prefix-scan evaluation of the same recurrence as ``scan_sequential``."""
    T, D, N = _check_scan_shapes(abar.data, bbar.data, c.data, u.data)
    bu = bbar.data * u.data[:, :, None]
    blocks = _scan_states_blocked(abar.data, bu)
    recording = tn._active() is not None
    y = np.empty((T, D), dtype=abar.data.dtype)
    pos = 0
    for h in blocks:
        n = h.shape[0]
        y[pos:pos + n] = np.einsum("tdn,tn->td", h, c.data[pos:pos + n])
        pos += n
    if not recording:
        return Tensor(y)
    hs = np.concatenate(blocks, axis=0)
    return tn.apply_op("scan_parallel", y, (abar, bbar, c, u),
                       _scan_vjp(abar.data, bbar.data, c.data, u.data, hs))


def causal_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution: left zero-padding of width - 1.

    x: (T, D), w: (K, D), b: (D,). Output position t sees inputs t-K+1..t.
    """
    T, D = x.shape
    K = w.shape[0]
    if w.shape[1] != D:
        raise tn.ShapeError(f"causal_conv: x channels {D} != kernel channels {w.shape[1]}")
    xpad = np.concatenate([np.zeros((K - 1, D), dtype=x.data.dtype), x.data], axis=0)
    val = np.zeros((T, D), dtype=x.data.dtype)
    for k in range(K):
        val += w.data[k] * xpad[k:k + T]
    if b is not None:
        val = val + b.data

    def vjp(g):
        gx = np.zeros_like(xpad)
        gw = np.empty_like(w.data)
        for k in range(K):
            gx[k:k + T] += w.data[k] * g
            gw[k] = (g * xpad[k:k + T]).sum(axis=0)
        grads = [gx[K - 1:], gw]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return tn.apply_op("causal_conv", val, parents, vjp)


class MambaLayer:
    """Gated selective-SSM block: in-projection, causal conv, scan, gate, out-projection.

    The layer is residual: its output is x + f(x). All parameters are leaves
    on the differentiation tape.
    """

    def __init__(self, d_model: int, d_inner: int | None = None, d_conv: int = 4,
                 n_state: int = 16, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.d_model = d_model
        self.d_inner = d_inner or 2 * d_model
        self.d_conv = d_conv
        self.w_in = _kaiming(rng, (d_model, 2 * self.d_inner), d_model, dtype)
        self.b_in = Tensor(np.zeros(2 * self.d_inner, dtype=dtype), requires_grad=True)
        self.conv_w = _kaiming(rng, (d_conv, self.d_inner), d_conv, dtype)
        self.conv_b = Tensor(np.zeros(self.d_inner, dtype=dtype), requires_grad=True)
        self.core = SsmCore(self.d_inner, n_state, rng, dtype)
        self.w_out = _kaiming(rng, (self.d_inner, d_model), self.d_inner, dtype)
        self.b_out = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = {"w_in": self.w_in, "b_in": self.b_in, "conv_w": self.conv_w,
               "conv_b": self.conv_b, "w_out": self.w_out, "b_out": self.b_out}
        for name, p in self.core.params().items():
            out[f"core.{name}"] = p
        return out


def _ssm_apply_streaming(core: SsmCore, u: np.ndarray) -> np.ndarray:
    """Inference path: discretize and scan blockwise so the (T, D, N)
    operands never materialize in full; output matches the op composition."""
    dt = np.logaddexp(0.0, u @ core.delta_w.data + core.delta_b.data)
    b = u @ core.b_w.data
    c = u @ core.c_w.data
    a = -np.exp(core.a_log.data).astype(u.dtype)
    T, D = u.shape
    h0 = np.zeros((D, core.n_state), dtype=u.dtype)
    y = np.empty((T, D), dtype=u.dtype)
    for bs in range(0, T, _SCAN_BLOCK):
        be = min(bs + _SCAN_BLOCK, T)
        abar = np.exp(dt[bs:be, :, None] * a[None, :, :])
        bu = (dt[bs:be] * u[bs:be])[:, :, None] * b[bs:be, None, :]
        h = _hillis_steele(abar, bu, h0)
        h0 = h[-1]
        y[bs:be] = np.einsum("tdn,tn->td", h, c[bs:be])
    return y


def ssm_apply(core: SsmCore, u: Tensor, scan=scan_parallel) -> Tensor:
    """Run the selective scan over pre-activations u: (T, d_inner)."""
    if tn._active() is None:
        return Tensor(_ssm_apply_streaming(core, u.data))
    delta = tn.softplus(linear(u, core.delta_w, core.delta_b))
    b = linear(u, core.b_w)
    c = linear(u, core.c_w)
    a_diag = tn.neg(tn.exp(core.a_log))
    abar, bbar = discretize(a_diag, b, delta)
    return scan(abar, bbar, c, u)


def mamba_forward(layer: MambaLayer, x: Tensor, scan=scan_parallel) -> Tensor:
    """Residual gated-SSM forward pass over a (T, d_model) sequence."""
    if x.data.ndim != 2 or x.shape[1] != layer.d_model:
        raise tn.ShapeError(
            f"mamba_forward: expected (T, {layer.d_model}), got {x.shape}")
    proj = linear(x, layer.w_in, layer.b_in)
    value = proj[:, :layer.d_inner]
    gate = proj[:, layer.d_inner:]
    u = tn.silu(causal_conv(value, layer.conv_w, layer.conv_b))
    y = ssm_apply(layer.core, u, scan=scan)
    gated = y * tn.silu(gate)
    return x + linear(gated, layer.w_out, layer.b_out)
