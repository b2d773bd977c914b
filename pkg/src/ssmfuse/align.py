"""Distribution-alignment losses between token sequences.

Two complementary penalties over per-modality token representations:

* an entropic-regularized optimal-transport distance under the cosine
  token cost, solved by a log-domain Sinkhorn with geometric epsilon
  scaling, differentiated envelope-style (the converged plan is treated
  as constant, so d loss / d cost = plan);
* the squared maximum mean discrepancy under a Gaussian kernel, in its
  biased V-statistic form (self-pairs included), with the bandwidth
  tied to the feature dimension by default.

Both are pure functions of their inputs and safe to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class SinkhornError(RuntimeError):
    """Sinkhorn failed to reach the marginal tolerance within the iteration budget."""

    def __init__(self, violation: float, iterations: int):
        super().__init__(
            f"sinkhorn did not converge: marginal violation {violation:.3e} "
            f"after {iterations} iterations")
        self.violation = violation
        self.iterations = iterations


@dataclass
class AlignConfig:
    """Weights and solver knobs for the combined alignment penalty."""

    lambda_ot: float = 0.001
    lambda_mmd: float = 0.01
    blur: float = 0.05
    mmd_bandwidth_rule: str = "inverse_dim"  # or "fixed"
    mmd_sigma: float | None = None
    anchor: str | None = None  # None: resolved by the caller (last modality)

    def __post_init__(self):
        if self.lambda_ot < 0 or self.lambda_mmd < 0:
            raise ValueError("alignment weights must be nonnegative")
        if self.blur <= 0:
            raise ValueError("blur must be positive")
        if self.mmd_bandwidth_rule not in ("inverse_dim", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.mmd_bandwidth_rule!r}")
        if self.mmd_bandwidth_rule == "fixed" and not self.mmd_sigma:
            raise ValueError("fixed bandwidth rule needs mmd_sigma")


def cost_matrix(h_m: Tensor, h_n: Tensor) -> Tensor:
    """Pairwise cosine distance 1 - cos(h_m[i], h_n[j]), differentiable.

    Values live in [0, 2]; rounding spill past the ends is clipped. Rows
    with zero norm are rejected rather than defining 0/0.
    """
    for side, h in (("first", h_m), ("second", h_n)):
        if h.data.ndim != 2:
            raise tn.ShapeError(f"cost_matrix: {side} argument must be (T, d), got {h.shape}")
    if h_m.shape[1] != h_n.shape[1]:
        raise tn.ShapeError(
            f"cost_matrix: feature dims differ, {h_m.shape} vs {h_n.shape}")
    for side, h in (("first", h_m), ("second", h_n)):
        norms = np.linalg.norm(h.data, axis=1)
        dead = np.flatnonzero(norms == 0.0)
        if dead.size:
            raise ValueError(f"cost_matrix: zero-norm token at row {dead[0]} of {side} argument")

    def unit_rows(h):
        norms = tn.sqrt(tn.sum(h * h, axes=1))
        return tn.scale_rows(h, tn.div(tn.ones(norms.shape, dtype=h.data.dtype), norms))

    cos = tn.matmul(unit_rows(h_m), tn.transpose(unit_rows(h_n)))
    c = 1.0 - cos
    # keep the value inside [0, 2]; active only in the last-ulp rounding band
    np.clip(c.data, 0.0, 2.0, out=c.data)
    return c


class SinkhornResult(NamedTuple):
    distance: float
    plan: np.ndarray
    iterations: int
    violation: float


def sinkhorn_ot(c, blur: float, tol: float = 1e-6, max_iterations: int = 1000,
                stage_sweeps: int = 4) -> SinkhornResult:
    """Entropic OT between uniform marginals over the rows/columns of ``c``.

    Runs log-domain Sinkhorn sweeps while annealing the regularization
    geometrically (halving) from max(c) down to ``blur``; the final stage
    iterates until the worst marginal violation drops below ``tol``, then
    the plan is rounded to exact feasibility. Returns the transport cost
    <P, C> at that plan.
    """
    c_arr = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if c_arr.ndim != 2:
        raise tn.ShapeError(f"sinkhorn_ot: cost must be a matrix, got shape {c_arr.shape}")
    if not np.all(np.isfinite(c_arr)):
        raise ValueError("sinkhorn_ot: cost matrix must be finite")
    if np.any(c_arr < 0):
        raise ValueError("sinkhorn_ot: cost matrix must be nonnegative")
    n, m = c_arr.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    log_a = np.log(a)
    log_b = np.log(b)

    eps_stages = []
    eps = float(c_arr.max())
    while eps > blur:
        eps_stages.append(eps)
        eps /= 2.0
    eps_stages.append(blur)

    f = np.zeros(n)
    g = np.zeros(m)
    iterations = 0
    violation = np.inf

    def lse(x, axis):
        mx = x.max(axis=axis, keepdims=True)
        return np.squeeze(mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True)), axis)

    for stage, eps in enumerate(eps_stages):
        final = stage == len(eps_stages) - 1
        budget = max_iterations - iterations if final else min(
            stage_sweeps, max_iterations - iterations)
        # Overrelaxation ramps up only when the final stage stalls; a
        # violation increase backs it off again (safeguarded SOR).
        omega = 1.0
        prev_violation = np.inf
        for _ in range(budget):
            f_prop = eps * log_a - eps * lse((g[None, :] - c_arr) / eps, axis=1)
            f = f + omega * (f_prop - f)
            g_prop = eps * log_b - eps * lse((f[:, None] - c_arr) / eps, axis=0)
            g = g + omega * (g_prop - g)
            iterations += 1
            plan = np.exp((f[:, None] + g[None, :] - c_arr) / eps)
            violation = max(np.abs(plan.sum(axis=1) - a).max(),
                            np.abs(plan.sum(axis=0) - b).max())
            if violation < tol:
                break
            if final:
                if violation > prev_violation:
                    omega = max(1.0, 0.7 * omega)
                elif violation > 0.95 * prev_violation:
                    omega = min(1.9, omega + 0.1)
                prev_violation = violation
        if final and violation >= tol:
            raise SinkhornError(violation, iterations)

    # Round the converged iterate onto the marginal polytope: scale rows and
    # columns down to their targets, then spread the residual mass as a rank-1
    # correction. The returned plan is exactly feasible, so its cost can never
    # undercut the unregularized optimum.
    plan = plan * np.minimum(a / plan.sum(axis=1), 1.0)[:, None]
    plan = plan * np.minimum(b / plan.sum(axis=0), 1.0)[None, :]
    res_a = np.maximum(a - plan.sum(axis=1), 0.0)
    res_b = np.maximum(b - plan.sum(axis=0), 0.0)
    deficit = res_a.sum()
    if deficit > 0:
        plan = plan + np.outer(res_a, res_b) / deficit

    distance = float((plan * c_arr).sum())
    return SinkhornResult(distance, plan, iterations, violation)


def ot_loss(h_m: Tensor, h_n: Tensor, blur: float = 0.05, tol: float = 1e-6,
            max_iterations: int = 1000) -> Tensor:
    """Transport cost between token clouds, differentiable through the cost.

    The plan from the converged solve enters as a constant, so the
    gradient with respect to each cost entry is the matching plan entry.
    """
    c = cost_matrix(h_m, h_n)
    result = sinkhorn_ot(c.data, blur, tol=tol, max_iterations=max_iterations)
    plan = Tensor(result.plan.astype(c.data.dtype))
    return tn.sum(c * plan)


def _pairwise_sqdist(x: Tensor, y: Tensor) -> Tensor:
    """Squared Euclidean distances d_ij = |x_i - y_j|^2 with a custom backward."""
    xd, yd = x.data, y.data
    sq = (xd * xd).sum(axis=1)[:, None] + (yd * yd).sum(axis=1)[None, :] - 2.0 * xd @ yd.T
    np.maximum(sq, 0.0, out=sq)  # rounding can dip a hair below zero

    def vjp(g):
        gx = 2.0 * (xd * g.sum(axis=1)[:, None] - g @ yd)
        gy = 2.0 * (yd * g.sum(axis=0)[:, None] - g.T @ xd)
        return gx, gy

    return tn.apply_op("pairwise_sqdist", sq, (x, y), vjp)


def _kernel_gamma(d: int, rule: str, sigma: float | None) -> float:
    if rule == "inverse_dim":
        return 1.0 / d
    return 1.0 / (2.0 * sigma * sigma)


def mmd_loss(h_m: Tensor, h_n: Tensor, bandwidth_rule: str = "inverse_dim",
             sigma: float | None = None, biased: bool = True) -> Tensor:
    """Squared MMD between the two token clouds under a Gaussian kernel.

    Biased V-statistic by default (all pairs, self-pairs included); the
    unbiased U-statistic drops self-pairs and divides by T(T-1). The
    inverse_dim rule uses k(x, y) = exp(-|x - y|^2 / d).
    """
    if h_m.shape[1] != h_n.shape[1]:
        raise tn.ShapeError(f"mmd_loss: feature dims differ, {h_m.shape} vs {h_n.shape}")
    gamma = _kernel_gamma(h_m.shape[1], bandwidth_rule, sigma)
    k_mm = tn.exp(_pairwise_sqdist(h_m, h_m) * (-gamma))
    k_nn = tn.exp(_pairwise_sqdist(h_n, h_n) * (-gamma))
    k_mn = tn.exp(_pairwise_sqdist(h_m, h_n) * (-gamma))
    if biased:
        value = tn.mean(k_mm) - 2.0 * tn.mean(k_mn) + tn.mean(k_nn)
        raw = float(value.data)
        if raw < 0.0:
            if raw < -1e-12:
                raise ArithmeticError(f"MMD^2 evaluated to {raw:.3e}; estimator is broken")
            # last-ulp rounding below zero: shift the value, keep the gradient
            value = value - raw
        return value
    # The unbiased U-statistic may legitimately go negative.
    tm, tnn = h_m.shape[0], h_n.shape[0]
    if tm < 2 or tnn < 2:
        raise ValueError("unbiased MMD needs at least two tokens per side")
    sum_mm = (tn.sum(k_mm) - float(tm)) / float(tm * (tm - 1))
    sum_nn = (tn.sum(k_nn) - float(tnn)) / float(tnn * (tnn - 1))
    return sum_mm - 2.0 * tn.mean(k_mn) + sum_nn


def alignment_loss(reps: dict, cfg: AlignConfig, *, max_iterations: int = 1000) -> Tensor:
    """Sum of weighted OT + MMD penalties from every modality to the anchor.

    ``max_iterations`` widens the Sinkhorn budget for callers (training
    loops) that must survive the slow-converging instances produced when
    representations have already moved close together.
    """
    if len(reps) < 2:
        raise ValueError("alignment_loss needs at least two modalities")
    anchor = cfg.anchor if cfg.anchor is not None else list(reps)[-1]
    if anchor not in reps:
        raise ValueError(f"anchor modality {anchor!r} missing from representations "
                         f"(have {sorted(reps)})")
    h_anchor = reps[anchor]
    dtype = h_anchor.data.dtype
    total = tn.zeros((), dtype=dtype)
    for name, h in reps.items():
        if name == anchor:
            continue
        if cfg.lambda_ot > 0:
            total = total + cfg.lambda_ot * ot_loss(
                h, h_anchor, cfg.blur, max_iterations=max_iterations)
        if cfg.lambda_mmd > 0:
            total = total + cfg.lambda_mmd * mmd_loss(
                h, h_anchor, cfg.mmd_bandwidth_rule, cfg.mmd_sigma)
    return total
