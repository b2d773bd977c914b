"""Modality-aware sequence layer: expert projections around a shared scan core.

The standard in/out projections of the gated SSM layer are replaced by
expert sets holding one projection per modality plus one shared
projection; a token is routed to the expert of the modality it came from
(deterministic routing) and always through the shared expert, the two
outputs summed. The convolution, activation, and selective scan between
the projections stay identical for every modality.

Learnable routing (ablation) swaps the known-origin lookup for a softmax
gate: the top-1 expert's output, scaled by its gate probability, is added
to the shared expert; ties pick the lowest expert index.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .ssm import SsmCore, _kaiming, causal_conv, linear, scan_parallel, ssm_apply
from .tensor import Tensor

DETERMINISTIC = "deterministic"
LEARNABLE = "learnable"


class ModalityError(ValueError):
    """A token carries a modality id outside the configured expert range."""


class Expert:
    """One projection: weight (in_dim, out_dim) plus bias."""

    def __init__(self, in_dim, out_dim, rng, dtype, scale=1.0):
        self.w = _kaiming(rng, (in_dim, out_dim), in_dim, dtype, scale=scale)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class ExpertSet:
    """Modality-specific experts plus one shared expert, all shape-identical.

    Specific experts start at a tenth of the shared expert's scale so early
    training behaves like a single shared projection.
    """

    def __init__(self, n_modalities: int, in_dim: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.n_modalities = n_modalities
        self.specific = [Expert(in_dim, out_dim, rng, dtype, scale=0.1)
                         for _ in range(n_modalities)]
        self.shared = Expert(in_dim, out_dim, rng, dtype)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, e in enumerate(self.specific):
            out[f"specific{i}.w"] = e.w
            out[f"specific{i}.b"] = e.b
        out["shared.w"] = self.shared.w
        out["shared.b"] = self.shared.b
        return out


def _check_ids(ids: np.ndarray, n_modalities: int, T: int):
    ids = np.asarray(ids)
    if ids.shape != (T,):
        raise ModalityError(f"expected {T} modality ids, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= n_modalities):
        bad = ids[(ids < 0) | (ids >= n_modalities)][0]
        raise ModalityError(f"modality id {bad} outside configured range 0..{n_modalities - 1}")
    return ids.astype(np.int64)


def _runs(ids: np.ndarray):
    """Contiguous same-id segments as (start, stop, id) triples."""
    edges = np.flatnonzero(np.diff(ids)) + 1
    bounds = np.concatenate([[0], edges, [len(ids)]])
    return [(int(bounds[k]), int(bounds[k + 1]), int(ids[bounds[k]]))
            for k in range(len(bounds) - 1)]


def moe_project_seq(experts: ExpertSet, x: Tensor, ids: np.ndarray,
                    gate_probs: Tensor | None = None) -> Tensor:
    """Route each row of x through its modality's expert and add the shared one."""
    ids = _check_ids(ids, experts.n_modalities, x.shape[0])
    pieces = []
    for start, stop, mid in _runs(ids):
        out = experts.specific[mid](x[start:stop])
        if gate_probs is not None:
            out = tn.scale_rows(out, gate_probs[start:stop])
        pieces.append(out)
    routed = pieces[0] if len(pieces) == 1 else tn.concat(pieces, axis=0)
    return routed + experts.shared(x)


def moe_project(experts: ExpertSet, h: Tensor, m: int) -> Tensor:
    """Single-token form: specific[m](h) + shared(h)."""
    row = tn.reshape(h, (1, h.shape[-1])) if h.data.ndim == 1 else h
    out = moe_project_seq(experts, row, np.array([m]))
    return tn.reshape(out, (out.shape[-1],)) if h.data.ndim == 1 else out


class MoEMambaLayer:
    """Gated-scan layer with expert in/out projections and a shared core."""

    def __init__(self, d_model: int, n_modalities: int, d_inner: int | None = None,
                 d_conv: int = 4, n_state: int = 16, routing: str = DETERMINISTIC,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if routing not in (DETERMINISTIC, LEARNABLE):
            raise ValueError(f"unknown routing mode {routing!r}")
        rng = rng or np.random.default_rng(0)
        self.d_model = d_model
        self.d_inner = d_inner or 2 * d_model
        self.n_modalities = n_modalities
        self.routing = routing
        self.moe_in = ExpertSet(n_modalities, d_model, 2 * self.d_inner, rng, dtype)
        self.conv_w = _kaiming(rng, (d_conv, self.d_inner), d_conv, dtype)
        self.conv_b = Tensor(np.zeros(self.d_inner, dtype=dtype), requires_grad=True)
        self.core = SsmCore(self.d_inner, n_state, rng, dtype)
        self.moe_out = ExpertSet(n_modalities, self.d_inner, d_model, rng, dtype)
        self.gate_w = _kaiming(rng, (d_model, n_modalities), d_model, dtype)
        self.gate_b = Tensor(np.zeros(n_modalities, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.moe_in.params().items():
            out[f"moe_in.{name}"] = p
        out["conv_w"] = self.conv_w
        out["conv_b"] = self.conv_b
        for name, p in self.core.params().items():
            out[f"core.{name}"] = p
        for name, p in self.moe_out.params().items():
            out[f"moe_out.{name}"] = p
        if self.routing == LEARNABLE:
            out["gate_w"] = self.gate_w
            out["gate_b"] = self.gate_b
        return out


def _gather_rows(probs: Tensor, sel: np.ndarray) -> Tensor:
    """probs[t, sel[t]] as a differentiable vector; row indices are unique."""
    T = probs.shape[0]
    idx = (np.arange(T), sel)
    value = probs.data[idx].copy()
    shape = probs.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return tn.apply_op("gather_gate", value, (probs,), vjp)


def learnable_route(layer: MoEMambaLayer, x: Tensor) -> tuple[np.ndarray, Tensor]:
    """Top-1 softmax gate over specific experts; argmax breaks ties low."""
    logits = linear(x, layer.gate_w, layer.gate_b)
    probs = tn.softmax(logits, axis=1)
    sel = np.argmax(probs.data, axis=1)
    return sel, _gather_rows(probs, sel)


def moe_mamba_forward(layer: MoEMambaLayer, x: Tensor, ids, scan=scan_parallel) -> Tensor:
    """Residual forward pass over a fused (T, d_model) sequence with per-token ids."""
    if x.data.ndim != 2 or x.shape[1] != layer.d_model:
        raise tn.ShapeError(
            f"moe_mamba_forward: expected (T, {layer.d_model}), got {x.shape}")
    ids = _check_ids(np.asarray(ids), layer.n_modalities, x.shape[0])
    if layer.routing == LEARNABLE:
        route_ids, gate_probs = learnable_route(layer, x)
    else:
        route_ids, gate_probs = ids, None
    proj = moe_project_seq(layer.moe_in, x, route_ids, gate_probs)
    value = proj[:, :layer.d_inner]
    gate = proj[:, layer.d_inner:]
    u = tn.silu(causal_conv(value, layer.conv_w, layer.conv_b))
    y = ssm_apply(layer.core, u, scan=scan)
    gated = y * tn.silu(gate)
    out = moe_project_seq(layer.moe_out, gated, route_ids, gate_probs)
    return x + out
