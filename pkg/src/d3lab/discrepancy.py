"""Discrepancy between identically-trained networks and the stopping rule built on it.

``D_t = d_N(f_t^(1), f_t^(2))`` is the mean pointwise metric between the two
networks' outputs on the training inputs.  The stopping rule smooths D_t with
a forward moving average, differentiates it, and stops at the first
evaluation whose slope exceeds ``alpha``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

SQ_L2 = "sq_l2"
CLASS_DISAGREEMENT = "class_disagreement"
METRICS = (SQ_L2, CLASS_DISAGREEMENT)

PSNR_INF = math.inf


def pointwise(a, b, metric: str) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if metric == SQ_L2:
        diff = (a - b).astype(np.float64).reshape(a.shape[0], -1)
        return np.sum(diff * diff, axis=1)
    if metric == CLASS_DISAGREEMENT:
        return (a.reshape(a.shape[0]) != b.reshape(b.shape[0])).astype(np.float64)
    raise ValueError(f"unknown metric {metric!r}")


def d_N(f_vals_a, f_vals_b, metric: str = SQ_L2) -> float:
    """Mean over samples of the pointwise metric d."""
    if len(f_vals_a) == 0:
        raise ValueError("d_N needs at least one sample")
    return float(np.mean(pointwise(f_vals_a, f_vals_b, metric)))


@dataclass
class DiscrepancySeries:
    eval_stride: float = 1.0
    window: int = 5
    steps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    pair_mean: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def __len__(self) -> int:
        return len(self.values)

    def append(self, t: int, value: float, pair_mean: float | None = None) -> None:
        if self.steps and t <= self.steps[-1]:
            raise ValueError("steps must be strictly increasing")
        if not value >= 0:
            raise ValueError("discrepancy values must be >= 0")
        self.steps.append(int(t))
        self.values.append(float(value))
        self.pair_mean.append(float(value if pair_mean is None else pair_mean))


def cohort_discrepancy(cohort_outputs, metric: str) -> tuple[float, float]:
    """(D for the canonical pair (1, 2), mean D over all pairs)."""
    if len(cohort_outputs) < 2:
        raise ValueError("need at least two cohort outputs")
    n = len(cohort_outputs[0])
    if any(len(o) != n for o in cohort_outputs):
        raise ValueError("cohort outputs are not aligned on the same samples")
    main = d_N(cohort_outputs[0], cohort_outputs[1], metric)
    if len(cohort_outputs) == 2:
        return main, main
    pairs = [d_N(a, b, metric) for a, b in itertools.combinations(cohort_outputs, 2)]
    return main, float(np.mean(pairs))


def record_discrepancy(series: DiscrepancySeries, t: int, cohort_outputs, metric: str = SQ_L2) -> DiscrepancySeries:
    main, mean_all = cohort_discrepancy(cohort_outputs, metric)
    series.append(t, main, mean_all)
    return series


def moving_average(values, w: int) -> np.ndarray:
    """Forward-window mean: out[t] = mean(values[t : t + w]); length n - w + 1."""
    v = np.asarray(values, dtype=np.float64)
    if w < 1:
        raise ValueError("window must be >= 1")
    if w > v.size:
        raise ValueError(f"window {w} exceeds series length {v.size}")
    # fsum per window: exactly constant on constant input, and bit-identical
    # to the incremental check in crossing_at_tail
    return np.array([math.fsum(v[i : i + w]) / w for i in range(v.size - w + 1)])


def smoothed_derivative(values, w: int, dt: float) -> np.ndarray:
    """(D~_{t+1} - D~_t) / dt for every t where both smoothed values exist."""
    sm = moving_average(values, w)
    return np.diff(sm) / dt


def default_burn_in(w: int) -> int:
    return max(2 * w, 5)


@dataclass
class StopReport:
    alpha: float
    tau_alpha: int | None
    tau_0: int | None
    d_star: float | None
    peak_step: int | None
    triggered: bool
    d_at_tau_0: float | None = None
    terminal_d: float | None = None

    @property
    def prominence(self) -> float | None:
        if self.d_star is None or not self.terminal_d:
            return None if self.d_star is None else math.inf
        return self.d_star / self.terminal_d

    def is_prominent(self, ratio: float = 1.5) -> bool:
        """Peak guard: D* >= ratio * terminal D (false when tau_0 never fired)."""
        if self.d_star is None:
            return False
        return self.d_star >= ratio * (self.terminal_d or 0.0)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "tau_alpha": self.tau_alpha,
            "tau_0": self.tau_0,
            "d_star": self.d_star,
            "peak_step": self.peak_step,
            "triggered": self.triggered,
            "d_at_tau_0": self.d_at_tau_0,
            "terminal_d": self.terminal_d,
        }


def _first_exceed(deriv: np.ndarray, alpha: float, burn_in: int) -> int | None:
    idx = np.nonzero(deriv[burn_in:] > alpha)[0]
    return int(idx[0]) + burn_in if idx.size else None


def stopping_time(
    series: DiscrepancySeries,
    alpha: float = 0.0,
    w: int | None = None,
    burn_in: int = 0,
) -> StopReport:
    """Scan the smoothed slope in step order and report tau_alpha, tau_0 and D*.

    ``burn_in`` skips that many leading evaluations before a crossing may
    count.  D* is the maximum raw D_t strictly after tau_0.
    """
    w = series.window if w is None else w
    vals = np.asarray(series.values, dtype=np.float64)
    steps = series.steps
    terminal = float(vals[-1]) if vals.size else None
    if vals.size < w + 1:
        raise ValueError(f"need at least w + 1 = {w + 1} evaluations, have {vals.size}")
    deriv = smoothed_derivative(vals, w, series.eval_stride)
    k_alpha = _first_exceed(deriv, alpha, burn_in)
    k_zero = _first_exceed(deriv, 0.0, burn_in)
    tau_0 = steps[k_zero] if k_zero is not None else None
    d_star = peak_step = d0 = None
    if k_zero is not None:
        after = vals[k_zero + 1 :]
        j = int(np.argmax(after))
        d_star = float(after[j])
        peak_step = steps[k_zero + 1 + j]
        d0 = float(vals[k_zero])
    return StopReport(
        alpha=float(alpha),
        tau_alpha=steps[k_alpha] if k_alpha is not None else None,
        tau_0=tau_0,
        d_star=d_star,
        peak_step=peak_step,
        triggered=k_alpha is not None,
        d_at_tau_0=d0,
        terminal_d=terminal,
    )


def crossing_at_tail(values, w: int, dt: float, alpha: float, burn_in: int) -> int | None:
    """Index k of a crossing that became decidable with the newest evaluation.

    The slope at k needs values up to k + w, so the newest decidable index is
    len(values) - 1 - w.  Used by the trainer for live stopping.
    """
    n = len(values)
    k = n - 1 - w
    if k < burn_in or k < 0:
        return None
    seg = np.asarray(values[k : k + w + 1], dtype=np.float64)
    lo = math.fsum(seg[:w]) / w
    hi = math.fsum(seg[1:]) / w
    return k if (hi - lo) / dt > alpha else None


# ----------------------------------------------------------------------
# image quality


def psnr(img_a, img_b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` when they coincide."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def psnr_gap(steps, psnr_values, tau: int, tau_opt: int | None = None) -> float:
    """PSNR at the network's optimal step minus PSNR at the criterion's stop."""
    steps = list(steps)
    vals = np.asarray(psnr_values, dtype=np.float64)
    if tau not in steps:
        raise ValueError(f"tau={tau} is not a logged step")
    if tau_opt is None:
        best = float(np.max(vals))
    else:
        if tau_opt not in steps:
            raise ValueError(f"tau_opt={tau_opt} is not a logged step")
        best = float(vals[steps.index(tau_opt)])
    return best - float(vals[steps.index(tau)])
