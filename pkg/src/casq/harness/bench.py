"""Wall-clock scaling of core ops against sequence length.

Times one forward+backward pass of a single layer at fixed width while
the sequence length sweeps a geometric grid, then fits a log-log slope.
Self-attention should come out near 2, the convolutions near 1. BLAS is
pinned to one thread during timing so the fit is not polluted by
parallel speedups that differ across sizes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .. import tensor as T
from ..attention import scaled_dot_attention
from ..convlayers import dconv, lconv
from ..errors import ConfigError

BENCH_KINDS = ("sa", "lconv", "dconv")

DEFAULT_LENGTHS = (128, 256, 512, 1024, 2048, 4096)

# one timed sample should span at least this long, else the timer's
# granularity dominates; reps are raised until it does
MIN_SAMPLE_SECONDS = 2e-3


def flop_estimate(kind: str, t: int, d: int, kernel: int, n_shared: int) -> float:
    """Dominant mult-add terms only; constants and softmaxes ignored."""
    if kind == "sa":
        return float(t * t * d)
    if kind == "lconv":
        return float(t * d * kernel)
    if kind == "dconv":
        # kernel prediction plus the convolution itself
        return float(t * n_shared * kernel * d + t * d * kernel)
    raise ConfigError(f"unknown bench kind {kind!r}")


def _make_runner(kind: str, t: int, d: int, kernel: int, n_shared: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "sa":
        x = T.Tensor(rng.standard_normal((t, d)), requires_grad=True)

        def run():
            x.grad = None
            T.backward(T.tsum(scaled_dot_attention(x, x, x)))

        return run
    if kind == "lconv":
        v = T.Tensor(rng.standard_normal((t, d)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((n_shared, kernel)), requires_grad=True)

        def run():
            v.grad = w.grad = None
            T.backward(T.tsum(lconv(v, w)))

        return run
    if kind == "dconv":
        v = T.Tensor(rng.standard_normal((t, d)), requires_grad=True)
        wp = T.Tensor(
            rng.standard_normal((n_shared * kernel, d)) / np.sqrt(d), requires_grad=True
        )

        def run():
            v.grad = wp.grad = None
            T.backward(T.tsum(dconv(v, wp, n_shared, kernel)))

        return run
    raise ConfigError(f"unknown bench kind {kind!r}")


def _time_point(run, n_samples: int, warmup: int) -> tuple[float, list[float], int]:
    """Median seconds per single run, raw per-sample times, reps used."""
    for _ in range(warmup):
        run()
    # calibrate repetitions against timer granularity
    reps = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(reps):
            run()
        span = time.perf_counter() - t0
        if span >= MIN_SAMPLE_SECONDS or reps >= 1024:
            break
        scale = MIN_SAMPLE_SECONDS / max(span, 1e-9)
        reps = min(1024, max(reps * 2, int(reps * scale) + 1))
    samples = []
    for _ in range(n_samples):
        t0 = time.perf_counter()
        for _ in range(reps):
            run()
        samples.append((time.perf_counter() - t0) / reps)
    return float(np.median(samples)), samples, reps


@dataclass
class KindResult:
    kind: str
    lengths: list[int]
    medians: list[float]
    samples: list[list[float]]
    reps: list[int]
    flops: list[float]
    slope: float = 0.0
    slope_ci: tuple[float, float] = (0.0, 0.0)
    intercept: float = 0.0


@dataclass
class ScalingReport:
    d_att: int
    kernel: int
    n_shared: int
    n_samples: int
    results: dict[str, KindResult] = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        """JSON-lines form; everything wall-clock-derived sits under
        "timing" so byte-comparisons of repeat runs can strip it."""
        out = []
        for kind, r in self.results.items():
            for i, t in enumerate(r.lengths):
                out.append(
                    {
                        "record": "bench_point",
                        "kind": kind,
                        "t": t,
                        "d_att": self.d_att,
                        "kernel": self.kernel,
                        "n_shared": self.n_shared,
                        "flops": r.flops[i],
                        "timing": {
                            "median_seconds": r.medians[i],
                            "samples": r.samples[i],
                            "reps": r.reps[i],
                        },
                    }
                )
            out.append(
                {
                    "record": "bench_slope",
                    "kind": kind,
                    "lengths": r.lengths,
                    "timing": {
                        "slope": r.slope,
                        "slope_ci95": list(r.slope_ci),
                        "intercept": r.intercept,
                    },
                }
            )
        return out


def fit_loglog(lengths, seconds) -> tuple[float, tuple[float, float], float]:
    """Least-squares slope of log time vs log length with a 95% interval."""
    lx = np.log(np.asarray(lengths, dtype=np.float64))
    ly = np.log(np.asarray(seconds, dtype=np.float64))
    fit = stats.linregress(lx, ly)
    half = stats.t.ppf(0.975, len(lx) - 2) * fit.stderr
    return float(fit.slope), (float(fit.slope - half), float(fit.slope + half)), float(
        fit.intercept
    )


def bench_scaling(
    kinds=BENCH_KINDS,
    lengths=DEFAULT_LENGTHS,
    d_att: int = 64,
    kernel: int = 31,
    n_shared: int = 4,
    n_samples: int = 10,
    warmup: int = 3,
    seed: int = 0,
) -> ScalingReport:
    lengths = [int(t) for t in lengths]
    if len(lengths) < 5:
        raise ConfigError(f"need at least 5 lengths for a slope fit, got {len(lengths)}")
    ratios = [b / a for a, b in zip(lengths, lengths[1:])]
    if min(ratios) <= 1.0 or max(ratios) / min(ratios) > 1.01:
        raise ConfigError(f"lengths must be increasing and geometric, got {lengths}")
    if n_samples < 10:
        raise ConfigError("need at least 10 samples per point")
    for kind in kinds:
        if kind not in BENCH_KINDS:
            raise ConfigError(f"unknown bench kind {kind!r}, expected {BENCH_KINDS}")

    report = ScalingReport(d_att, kernel, n_shared, n_samples)
    with threadpool_limits(limits=1):
        for kind in kinds:
            res = KindResult(kind, lengths, [], [], [], [])
            for t in lengths:
                run = _make_runner(kind, t, d_att, kernel, n_shared, seed)
                med, samples, reps = _time_point(run, n_samples, warmup)
                res.medians.append(med)
                res.samples.append(samples)
                res.reps.append(reps)
                res.flops.append(flop_estimate(kind, t, d_att, kernel, n_shared))
            res.slope, res.slope_ci, res.intercept = fit_loglog(lengths, res.medians)
            report.results[kind] = res
    return report
