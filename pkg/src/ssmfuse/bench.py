"""Forward-pass scaling benchmarks: fused-scan kernels against naive attention.

Wall time comes from a monotonic clock around single forward passes
(batch size 1, one warmup discarded); peak working-set bytes come from the
tracing allocator, which counts every tracked allocation and deallocation
exactly once, measured as the rise above the pre-trial baseline. The
attention baseline deliberately materializes the full T x T score matrix,
so its time and memory grow quadratically while the scan kernels stay
linear; the claims are therefore asymptotic slopes and ratios, never
absolute milliseconds or megabytes.

A kernel whose predicted working set exceeds the memory budget (or that
raises MemoryError) is recorded as an OOM marker row and the sweep moves
on to the next kernel.
"""

from __future__ import annotations

import math
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import moe as moe_mod
from . import ssm as ssm_mod
from .tensor import Tensor

DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384)
DEFAULT_TRIALS = 10
DEFAULT_D_MODEL = 128
DEFAULT_BUDGET_BYTES = 3 * 1024 ** 3

CSV_HEADER = "kernel,length,trial,time_ms,peak_bytes,oom"


@dataclass
class BenchSample:
    kernel: str
    length: int
    trial: int
    time_ms: float | None
    peak_bytes: int | None
    oom: bool = False

    def __post_init__(self):
        if not self.oom:
            if not self.time_ms or self.time_ms <= 0:
                raise ValueError(f"bench sample needs positive time, got {self.time_ms}")
            if not self.peak_bytes or self.peak_bytes <= 0:
                raise ValueError(f"bench sample needs positive bytes, got {self.peak_bytes}")


class MambaFusionKernel:
    name = "mamba_fusion"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.layer = ssm_mod.MambaLayer(d_model, rng=rng, dtype=np.float32)
        self.d_model = d_model

    def make_input(self, length: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((length, self.d_model)).astype(np.float32)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return ssm_mod.mamba_forward(self.layer, Tensor(x)).data

    def predicted_peak_bytes(self, length: int) -> int:
        # inference path streams the (T, d_inner, n_state) operands blockwise,
        # so the sequence-length term is the (T, d_inner)-sized activations
        layer = self.layer
        block = ssm_mod._SCAN_BLOCK
        return (8 * length * layer.d_inner * 4
                + 4 * min(length, block) * layer.d_inner * layer.core.n_state * 4)


class MoeMambaFusionKernel(MambaFusionKernel):
    name = "moe_mamba_fusion"

    def __init__(self, d_model: int, rng: np.random.Generator, n_modalities: int = 3):
        self.layer = moe_mod.MoEMambaLayer(d_model, n_modalities, rng=rng,
                                           dtype=np.float32)
        self.d_model = d_model
        self.n_modalities = n_modalities

    def forward(self, x: np.ndarray) -> np.ndarray:
        T = x.shape[0]
        bounds = np.linspace(0, T, self.n_modalities + 1).astype(int)
        ids = np.zeros(T, dtype=np.int64)
        for m in range(self.n_modalities):
            ids[bounds[m]:bounds[m + 1]] = m
        return moe_mod.moe_mamba_forward(self.layer, Tensor(x), ids).data


class AttentionFusionKernel:
    """Single-head scaled dot-product attention, full score matrix, forward only."""

    name = "attention_fusion"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        bound = 1.0 / math.sqrt(d_model)
        self.wq, self.wk, self.wv, self.wo = (
            rng.uniform(-bound, bound, (d_model, d_model)).astype(np.float32)
            for _ in range(4))

    def make_input(self, length: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((length, self.d_model)).astype(np.float32)

    def forward(self, x: np.ndarray) -> np.ndarray:
        q, k, v = x @ self.wq, x @ self.wk, x @ self.wv
        scores = q @ k.T
        scores /= math.sqrt(self.d_model)
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        return (scores @ v) @ self.wo

    def predicted_peak_bytes(self, length: int) -> int:
        return 2 * length * length * 4  # score matrix plus one transient


KERNELS = {
    MambaFusionKernel.name: MambaFusionKernel,
    MoeMambaFusionKernel.name: MoeMambaFusionKernel,
    AttentionFusionKernel.name: AttentionFusionKernel,
}


def measure(fn) -> tuple[float, int]:
    """One timed call under the tracing allocator: (milliseconds, peak delta bytes)."""
    tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    fn()
    elapsed = time.perf_counter() - t0
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return elapsed * 1000.0, max(1, peak - base)


def run_sweep(kernels, lengths=DEFAULT_LENGTHS, trials: int = DEFAULT_TRIALS,
              d_model: int = DEFAULT_D_MODEL, budget_bytes: int | None = DEFAULT_BUDGET_BYTES,
              seed: int = 0) -> list[BenchSample]:
    """Time every (kernel, length) cell; OOM ends that kernel's curve.

    ``kernels`` is a list of registry names or instantiated kernel objects.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    if trials < 3:
        raise ValueError("need at least 3 trials")
    samples: list[BenchSample] = []
    for entry in kernels:
        if isinstance(entry, str):
            if entry not in KERNELS:
                raise ValueError(f"unknown kernel {entry!r} (have {sorted(KERNELS)})")
            kern = KERNELS[entry](d_model, np.random.default_rng(seed))
        else:
            kern = entry
        rng = np.random.default_rng(seed + 1)
        for length in lengths:
            if budget_bytes is not None and kern.predicted_peak_bytes(length) > budget_bytes:
                samples.append(BenchSample(kern.name, length, 0, None, None, oom=True))
                break
            x = kern.make_input(length, rng)
            try:
                kern.forward(x)  # warmup, discarded
                for trial in range(trials):
                    ms, peak = measure(lambda: kern.forward(x))
                    samples.append(BenchSample(kern.name, length, trial, ms, peak))
            except MemoryError:
                samples.append(BenchSample(kern.name, length, 0, None, None, oom=True))
                break
    return samples


# -- claim checking ---------------------------------------------------------------

def _medians(samples, kernel, field) -> dict[int, float]:
    out = {}
    lengths = sorted({s.length for s in samples if s.kernel == kernel and not s.oom})
    for length in lengths:
        vals = [getattr(s, field) for s in samples
                if s.kernel == kernel and s.length == length and not s.oom]
        out[length] = float(np.median(vals))
    return out


def _loglog_slope(points: dict[int, float]) -> float:
    if len(points) < 2:
        raise ValueError("need two lengths to fit a slope")
    xs = np.log([float(t) for t in sorted(points)])
    ys = np.log([points[t] for t in sorted(points)])
    return float(np.polyfit(xs, ys, 1)[0])


def check_claims(samples, linear_kernels=("mamba_fusion", "moe_mamba_fusion"),
                 quadratic_kernel="attention_fusion",
                 ratio_bounds=(1.5, 2.8), min_slope_gap=0.7,
                 memory_ratio_lengths=(1024, 4096), min_memory_ratio=8.0) -> list[str]:
    """Evaluate the scaling claims; returns human-readable violations (empty = pass)."""
    violations = []
    kernels = sorted({s.kernel for s in samples})
    for kernel in kernels:
        med = _medians(samples, kernel, "time_ms")
        times = [med[t] for t in sorted(med)]
        for a, b, ta in zip(times, times[1:], sorted(med)):
            if b < a:
                violations.append(f"{kernel}: median time decreased after T={ta}")
                break
    for kernel in linear_kernels:
        med = _medians(samples, kernel, "time_ms")
        lengths = sorted(med)
        doublings = [(a, b) for a, b in zip(lengths, lengths[1:]) if b == 2 * a]
        for a, b in doublings[-2:]:
            ratio = med[b] / med[a]
            if not ratio_bounds[0] <= ratio <= ratio_bounds[1]:
                violations.append(
                    f"{kernel}: doubling ratio {ratio:.2f} at T={a} outside "
                    f"[{ratio_bounds[0]}, {ratio_bounds[1]}]")
    if quadratic_kernel in kernels:
        quad_med = _medians(samples, quadratic_kernel, "time_ms")
        for kernel in linear_kernels:
            lin_med = _medians(samples, kernel, "time_ms")
            common = sorted(set(quad_med) & set(lin_med))
            if len(common) >= 2:
                gap = (_loglog_slope({t: quad_med[t] for t in common})
                       - _loglog_slope({t: lin_med[t] for t in common}))
                if gap < min_slope_gap:
                    violations.append(
                        f"slope separation {gap:.2f} between {quadratic_kernel} and "
                        f"{kernel} below {min_slope_gap}")
        mem = _medians(samples, quadratic_kernel, "peak_bytes")
        t_lo, t_hi = memory_ratio_lengths
        if t_lo in mem and t_hi in mem:
            ratio = mem[t_hi] / mem[t_lo]
            if ratio < min_memory_ratio:
                violations.append(
                    f"{quadratic_kernel}: peak bytes grew only {ratio:.1f}x from "
                    f"T={t_lo} to T={t_hi} (need >= {min_memory_ratio}x)")
    return violations


# -- emitters ----------------------------------------------------------------------

def emit_csv(samples, path) -> None:
    if not samples:
        raise ValueError("emit_csv: no samples")
    lines = [CSV_HEADER]
    for s in samples:
        time_s = f"{s.time_ms:.6f}" if s.time_ms is not None else ""
        bytes_s = str(s.peak_bytes) if s.peak_bytes is not None else ""
        lines.append(f"{s.kernel},{s.length},{s.trial},{time_s},{bytes_s},{int(s.oom)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_csv(path) -> list[BenchSample]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected bench CSV header: {lines[:1]}")
    out = []
    for line in lines[1:]:
        kernel, length, trial, time_s, bytes_s, oom = line.split(",")
        out.append(BenchSample(kernel, int(length), int(trial),
                               float(time_s) if time_s else None,
                               int(bytes_s) if bytes_s else None,
                               oom == "1"))
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")


def emit_svg(samples, path) -> None:
    """Two stacked log-log panels (latency, peak bytes), one series per kernel."""
    if not samples:
        raise ValueError("emit_svg: no samples")
    kernels = sorted({s.kernel for s in samples})
    width, panel_h, margin = 720, 260, 60
    height = 2 * panel_h + 3 * margin

    def panel(field, unit, top):
        pts_by_kernel = {k: _medians(samples, k, field) for k in kernels}
        all_x = sorted({x for pts in pts_by_kernel.values() for x in pts})
        all_y = [y for pts in pts_by_kernel.values() for y in pts.values()]
        if not all_y:
            return []
        lx = (math.log10(min(all_x)), math.log10(max(all_x)))
        ly = (math.log10(min(all_y)), math.log10(max(all_y) * 1.05))
        span_x = max(lx[1] - lx[0], 1e-9)
        span_y = max(ly[1] - ly[0], 1e-9)
        plot_w = width - 2 * margin

        def sx(v):
            return margin + (math.log10(v) - lx[0]) / span_x * plot_w

        def sy(v):
            return top + panel_h - (math.log10(v) - ly[0]) / span_y * panel_h

        parts = [f'<rect x="{margin}" y="{top}" width="{plot_w}" height="{panel_h}" '
                 'fill="none" stroke="#999"/>']
        for x in all_x:
            parts.append(f'<text x="{sx(x):.1f}" y="{top + panel_h + 16}" '
                         f'font-size="11" text-anchor="middle">{x}</text>')
        parts.append(f'<text x="{margin - 40}" y="{top + panel_h / 2:.1f}" font-size="12" '
                     f'transform="rotate(-90 {margin - 40} {top + panel_h / 2:.1f})" '
                     f'text-anchor="middle">{escape(unit)} (log)</text>')
        for ki, kernel in enumerate(kernels):
            pts = pts_by_kernel[kernel]
            color = _PALETTE[ki % len(_PALETTE)]
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts.items()))
            if coords:
                parts.append(f'<polyline points="{coords}" fill="none" '
                             f'stroke="{color}" stroke-width="2"/>')
            for s in samples:
                if s.kernel == kernel and s.oom:
                    x = sx(s.length) if s.length >= min(all_x) else margin
                    parts.append(
                        f'<text x="{x:.1f}" y="{top + 14}" font-size="13" fill="{color}" '
                        f'text-anchor="middle">&#10060;</text>')
            parts.append(f'<text x="{width - margin + 4}" y="{top + 16 + 14 * ki}" '
                         f'font-size="11" fill="{color}">{escape(kernel)}</text>')
        return parts

    body = ['<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{width + 120}" height="{height}">']
    body.append(f'<text x="{margin}" y="{margin - 20}" font-size="14">'
                'forward latency and peak working set vs sequence length</text>')
    body += panel("time_ms", "ms", margin)
    body += panel("peak_bytes", "bytes", panel_h + 2 * margin)
    body.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(body) + "\n")
