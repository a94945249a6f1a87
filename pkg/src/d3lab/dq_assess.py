"""Noise-level estimation from peak discrepancy.

Sweep label-corruption rates, record the realized noise level E and the peak
discrepancy D* of freshly trained pairs, fit D* = slope * E + intercept, and
invert the line to estimate E for a new dataset from its observed D*.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import discrepancy as dsc
from .datagen import CLASSIFICATION, Dataset, corrupt_labels
from .models import ArchSpec, make_identical_cohort
from .trainer import DivergenceError, TrainConfig, train_cohort

log = logging.getLogger(__name__)


class FitUninformative(ValueError):
    """The fitted slope is too flat to invert."""


@dataclass
class SweepPoint:
    rate: float
    E_realized: float
    D_star: float | None
    tau_0: int | None
    seed_pairs: list[tuple[int, int]]
    D_star_pairs: list[float | None] = field(default_factory=list)
    prominent_pairs: int = 0
    flag: str | None = None  # None | "no peak" | "diverged"

    @property
    def usable(self) -> bool:
        return self.flag is None and self.D_star is not None


@dataclass
class LineFit:
    slope: float
    intercept: float
    r_squared: float
    resid_se: float
    n: int

    def predict(self, E) -> np.ndarray:
        return self.slope * np.asarray(E) + self.intercept


@dataclass
class SweepResult:
    points: list[SweepPoint]
    fit: LineFit | None
    task: dict

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "points": [asdict(p) for p in self.points],
            "fit": asdict(self.fit) if self.fit else None,
        }


@dataclass
class NoiseEstimate:
    d_star_observed: float
    e_hat: float
    ci_halfwidth: float
    e_hat_unclamped: float


def fit_line(points) -> LineFit:
    """Ordinary least squares of D* on E.  ``points`` is a list of (E, D*) pairs."""
    pts = np.asarray([(float(e), float(d)) for e, d in points], dtype=np.float64)
    if pts.shape[0] < 3:
        raise ValueError("a line fit needs at least 3 points")
    E, D = pts[:, 0], pts[:, 1]
    if np.ptp(E) == 0:
        raise ValueError("all E values are identical")
    Ec = E - E.mean()
    slope = float(Ec @ (D - D.mean()) / (Ec @ Ec))
    intercept = float(D.mean() - slope * E.mean())
    resid = D - (slope * E + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((D - D.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    dof = pts.shape[0] - 2
    resid_se = math.sqrt(ss_res / dof) if dof > 0 else 0.0
    return LineFit(slope, intercept, r2, resid_se, pts.shape[0])


def estimate_noise(fit: LineFit, d_star: float, clamp: bool = True, min_slope: float = 1e-12, level: float = 0.95) -> NoiseEstimate:
    """Invert the fitted line; the interval maps the residual spread through the slope."""
    if abs(fit.slope) < min_slope:
        raise FitUninformative("fit uninformative: slope is ~0")
    raw = (d_star - fit.intercept) / fit.slope
    e_hat = min(max(raw, 0.0), 1.0) if clamp else raw
    dof = max(fit.n - 2, 1)
    q = float(stats.t.ppf(0.5 + level / 2, dof))
    ci = q * fit.resid_se / abs(fit.slope)
    return NoiseEstimate(float(d_star), float(e_hat), float(ci), float(raw))


def _train_pair(arch, ds, cfg, pair, prominence):
    cohort = make_identical_cohort(arch, 2, list(pair))
    try:
        rl = train_cohort(cohort, ds, cfg)
    except DivergenceError:
        return None, None, False, True
    rep = rl.stop
    if rep is None or rep.d_star is None:
        return None, None, False, False
    return rep.d_star, rep.tau_0, rep.is_prominent(prominence), False


def run_point(base: Dataset, rate: float, arch: ArchSpec, cfg: TrainConfig, seed_pairs, corruption_seed: int, prominence: float = 1.5) -> SweepPoint:
    ds = corrupt_labels(base, rate, corruption_seed)
    E = dsc.d_N(ds.ys_noisy, ds.ys_clean, dsc.CLASS_DISAGREEMENT)
    d_stars, taus, n_prom, diverged = [], [], 0, False
    for pair in seed_pairs:
        d, tau, prom, div = _train_pair(arch, ds, cfg, pair, prominence)
        diverged |= div
        d_stars.append(d)
        if tau is not None:
            taus.append(tau)
        n_prom += prom
    valid = [d for d in d_stars if d is not None]
    flag = "diverged" if diverged else (None if valid else "no peak")
    d_med = float(np.median(valid)) if valid and not diverged else None
    tau_med = int(np.median(taus)) if taus else None
    log.info("rate=%.2f E=%.4f D*=%s", rate, E, d_med)
    return SweepPoint(rate, E, d_med, tau_med, [tuple(p) for p in seed_pairs], d_stars, n_prom, flag)


def run_sweep(
    base_dataset: Dataset,
    rates,
    arch: ArchSpec,
    train_cfg: TrainConfig,
    seeds,
    n_pairs: int = 3,
    corruption_seed: int = 0,
    include_clean: bool = False,
    prominence: float = 1.5,
    threads: int = 1,
) -> SweepResult:
    """Corrupt, train ``n_pairs`` fresh pairs per rate, and fit D* against E.

    ``seeds`` supplies 2 * n_pairs distinct init seeds, reused at every rate.
    Points whose pairs diverge are flagged and left out of the fit.
    """
    if base_dataset.task != CLASSIFICATION:
        raise ValueError("sweeps need a classification dataset")
    rates = [float(r) for r in rates]
    if len(set(rates)) != len(rates) or any(not 0 <= r <= 1 for r in rates):
        raise ValueError("rates must be distinct values in [0, 1]")
    seeds = list(seeds)
    if len(seeds) < 2 * n_pairs:
        raise ValueError(f"need {2 * n_pairs} seeds for {n_pairs} pairs")
    pairs = [(seeds[2 * i], seeds[2 * i + 1]) for i in range(n_pairs)]

    def job(i_rate):
        i, rate = i_rate
        return run_point(base_dataset, rate, arch, train_cfg, pairs, corruption_seed + i, prominence)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(job, enumerate(rates)))
    else:
        points = [job(x) for x in enumerate(rates)]

    fit_pts = [(p.E_realized, p.D_star) for p in points if p.usable and (include_clean or p.rate > 0)]
    fit = fit_line(fit_pts) if len(fit_pts) >= 3 else None
    task = {
        "kind": "blobs_classification",
        "N": base_dataset.N,
        "K": base_dataset.n_classes,
        "arch": arch.to_dict(),
        "n_pairs": n_pairs,
    }
    return SweepResult(points, fit, task)


def count_inversions(points: list[SweepPoint]) -> int:
    """Adjacent decreases of D* when points are ordered by realized E."""
    usable = sorted((p for p in points if p.usable), key=lambda p: p.E_realized)
    return sum(1 for a, b in zip(usable, usable[1:]) if b.D_star <= a.D_star)


def leave_one_out(points: list[SweepPoint], target_rate: float) -> tuple[float, NoiseEstimate]:
    """Refit without the point at ``target_rate`` and estimate its E from its D*."""
    held = [p for p in points if p.usable and math.isclose(p.rate, target_rate)]
    if not held:
        raise ValueError(f"no usable point at rate {target_rate}")
    rest = [(p.E_realized, p.D_star) for p in points if p.usable and p.rate > 0 and p is not held[0]]
    fit = fit_line(rest)
    return held[0].E_realized, estimate_noise(fit, held[0].D_star)
