"""Neural-kernel inner products and a numerical check of the stopping theorem.

The kernel of network j is K_j(x, x') = grad_theta f_j(x) (x) grad_theta f_j(x'),
and ``<g, h>_K = (1/N^2) sum_{i,i'} g(x_i)^T K(x_i, x_i') h(x_i')``.  The double
sum factors as ``(1/N^2) (J^T g) . (J^T h)`` with J the stacked Jacobian, so
each inner product costs two vector-Jacobian products and no N x N matrix.

Time units.  Training on ``L = (1/N) sum ||f - y||^2`` by gradient flow
``dtheta/dt = -grad L`` (t = lr * steps) gives

    dD/dt = -4 <f1 - f2, f1 - y>_K1 - 4 <f2 - f1, f2 - y>_K2.

The theorem is stated without the factor 4, i.e. in the rescaled time
t_K = 4 t.  :class:`KernelReport` works in t_K throughout (``lhs``,
``oracle_derivs``) so that the theorem's bounds apply verbatim;
:func:`discrepancy_derivative_kernel` returns the flow-time value.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import discrepancy as dsc
from .datagen import Dataset
from .models import ModelState, vjp
from .nn import optim
from .nn.tensor import mse_loss
from .trainer import StopRule, train_cohort

FLOW_FACTOR = 4.0


def kernel_inner(g_vals, h_vals, grad_rows) -> float:
    """Factored ``<g, h>_K`` from explicit gradient rows of shape (N, k, P) or (N, P)."""
    rows = np.asarray(grad_rows, dtype=np.float64)
    if rows.ndim == 2:
        rows = rows[:, None, :]
    n, k, _ = rows.shape
    g = np.asarray(g_vals, dtype=np.float64).reshape(-1, k) if np.size(g_vals) else None
    h = np.asarray(h_vals, dtype=np.float64).reshape(-1, k) if np.size(h_vals) else None
    if g is None or h is None or g.shape[0] != n or h.shape[0] != n:
        raise ValueError("value lists and gradient rows are not aligned")
    pg = np.einsum("ik,ikp->p", g, rows)
    ph = np.einsum("ik,ikp->p", h, rows)
    return float(pg @ ph) / (n * n)


def kernel_inner_explicit(g_vals, h_vals, grad_rows) -> float:
    """The same inner product by the explicit double sum over the N x N kernel."""
    rows = np.asarray(grad_rows, dtype=np.float64)
    if rows.ndim == 2:
        rows = rows[:, None, :]
    n, k, _ = rows.shape
    g = np.asarray(g_vals, dtype=np.float64).reshape(n, k)
    h = np.asarray(h_vals, dtype=np.float64).reshape(n, k)
    total = 0.0
    for i in range(n):
        for j in range(n):
            Kij = rows[i] @ rows[j].T
            total += g[i] @ Kij @ h[j]
    return total / (n * n)


def pullback(model: ModelState, x, vals) -> np.ndarray:
    """J^T v: the flat vector sum_i v(x_i)^T grad_theta f(x_i)."""
    return vjp(model, x, vals)


@dataclass
class KernelProbe:
    """Frozen snapshot of a pair at step ``t`` with everything the theorem needs."""

    t: int
    models: list[ModelState]
    xs: np.ndarray
    f: list[np.ndarray]
    f_clean: np.ndarray
    f_noisy: np.ndarray
    loss: str = "mse"

    @classmethod
    def capture(cls, t: int, cohort: list[ModelState], dataset: Dataset, loss: str = "mse") -> "KernelProbe":
        if not dataset.has_clean:
            raise ValueError("kernel probes need clean targets")
        models = [m.clone() for m in cohort[:2]]
        f = [m(dataset.xs) for m in models]
        return cls(t, models, dataset.xs, f, dataset.ys_clean.reshape(f[0].shape), dataset.ys_noisy.reshape(f[0].shape), loss)

    @property
    def N(self) -> int:
        return self.xs.shape[0]


def _check_loss(probe: KernelProbe) -> None:
    if probe.loss != "mse":
        raise ValueError("the kernel identities assume the squared-l2 loss")


def discrepancy_derivative_kernel(probe: KernelProbe) -> float:
    """dD/dt under gradient flow on the MSE loss (t = lr * steps)."""
    _check_loss(probe)
    f1, f2 = probe.f
    y = probe.f_noisy
    n2 = probe.N**2
    total = 0.0
    for j, (fj, fo) in enumerate(((f1, f2), (f2, f1))):
        m = probe.models[j]
        total -= float(pullback(m, probe.xs, fj - fo) @ pullback(m, probe.xs, fj - y)) / n2
    return FLOW_FACTOR * total


def discrepancy_derivative_direct(probe: KernelProbe) -> float:
    """Same derivative from full parameter gradients: sum_j grad_{theta_j} D . dtheta_j/dt.

    Built from backward passes through the loss graphs rather than from the
    kernel pullbacks, so it serves as an independent route.
    """
    _check_loss(probe)
    total = 0.0
    for j in range(2):
        m = probe.models[j]
        other = probe.f[1 - j]
        out, leaves = m.graph(probe.xs)
        gD = m.flat_grad(mse_loss(out, other), leaves)
        out, leaves = m.graph(probe.xs)
        gL = m.flat_grad(mse_loss(out, probe.f_noisy), leaves)
        total += float(gD @ -gL)
    return total


@dataclass
class KernelReport:
    t: int
    a: tuple[float, float]
    b: tuple[float, float]
    delta_min: float
    eps_min: float
    lhs: float
    oracle_derivs: tuple[float, float]
    identity_residual: float
    direct_residual: float
    result1_pass: bool
    result2_pass: bool
    result1_premise: bool
    result2_premise: bool
    hard_component: tuple[float, float]
    scale: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "a1": self.a[0],
            "a2": self.a[1],
            "b1": self.b[0],
            "b2": self.b[1],
            "delta_min": self.delta_min,
            "eps_min": self.eps_min,
            "lhs": self.lhs,
            "oracle_derivs": list(self.oracle_derivs),
            "result1_pass": self.result1_pass,
            "result2_pass": self.result2_pass,
            "result1_premise": self.result1_premise,
            "result2_premise": self.result2_premise,
            "identity_residual": self.identity_residual,
            "direct_residual": self.direct_residual,
            "scale": self.scale,
        }


def check_theorem(probe: KernelProbe, rtol: float = 1e-8) -> KernelReport:
    """Measure delta_min, eps_min at this step and test both implications.

    With u_j = f_j - f_clean, v = f_noisy - f_clean and P_j = J_j^T:
      a_j = <u_{-j}, u_j>_{K_j},  b_j = <u_{-j}, v>_{K_j},
      oracle_j = -<u_j, u_j - v>_{K_j},
      lhs = -<u_1 - u_2, u_1 - v>_{K_1} - <u_2 - u_1, u_2 - v>_{K_2}.
    All values are in kernel time (see module docstring).
    """
    _check_loss(probe)
    u = [fj - probe.f_clean for fj in probe.f]
    v = probe.f_noisy - probe.f_clean
    n2 = probe.N**2
    a, b, od, lhs_terms = [], [], [], []
    for j in range(2):
        m = probe.models[j]
        pu_self = pullback(m, probe.xs, u[j])
        pu_other = pullback(m, probe.xs, u[1 - j])
        pv = pullback(m, probe.xs, v)
        a.append(float(pu_other @ pu_self) / n2)
        b.append(float(pu_other @ pv) / n2)
        od.append(-float(pu_self @ (pu_self - pv)) / n2)
        lhs_terms.append(-float((pu_self - pu_other) @ (pu_self - pv)) / n2)
    lhs = lhs_terms[0] + lhs_terms[1]
    delta = 2.0 * max(abs(a[0]), abs(a[1]))
    eps = 2.0 * max(abs(b[0]), abs(b[1]))
    identity = lhs - (od[0] + od[1] + (a[0] - b[0]) + (a[1] - b[1]))
    direct = discrepancy_derivative_direct(probe) / FLOW_FACTOR
    scale = max(abs(lhs), abs(od[0]), abs(od[1]), delta, eps, 1e-300)
    tol = rtol * scale
    bound = delta + eps
    p1 = lhs > bound + tol
    r1 = (not p1) or any(d > -tol for d in od)
    p2 = all(d > tol for d in od)
    r2 = (not p2) or lhs > -bound - tol
    return KernelReport(
        t=probe.t,
        a=(a[0], a[1]),
        b=(b[0], b[1]),
        delta_min=delta,
        eps_min=eps,
        lhs=lhs,
        oracle_derivs=(od[0], od[1]),
        identity_residual=identity,
        direct_residual=direct - lhs,
        result1_pass=bool(r1),
        result2_pass=bool(r2),
        result1_premise=bool(p1),
        result2_premise=bool(p2),
        hard_component=(a[0], a[1]),
        scale=scale,
    )


def alpha_suggestion(reports: list[KernelReport], tau_0: int | None = None, radius: int | None = None) -> float:
    """Median of delta_min + eps_min over reports (optionally only those near tau_0).

    The value is in kernel time; :func:`alpha_per_step` converts it to the
    per-optimizer-step slope units the stopping rule uses.
    """
    if not reports:
        raise ValueError("alpha_suggestion needs at least one report")
    chosen = reports
    if tau_0 is not None and radius is not None:
        chosen = [r for r in reports if abs(r.t - tau_0) <= radius] or reports
    return float(np.median([r.delta_min + r.eps_min for r in chosen]))


def alpha_per_step(alpha_kernel: float, lr: float) -> float:
    return FLOW_FACTOR * lr * alpha_kernel


# ----------------------------------------------------------------------
# probing a training run


def fd_discrepancy_derivative(probe: KernelProbe, lr: float, n_steps: int = 1) -> float:
    """(D after ``n_steps`` plain GD steps of size ``lr`` - D now) / (n_steps * lr).

    The finite-difference counterpart of :func:`discrepancy_derivative_kernel`
    along actual gradient descent on the full-batch MSE.
    """
    _check_loss(probe)
    opt = optim.OptimizerState("sgd_momentum", lr=lr)
    models = [m.clone() for m in probe.models]
    for _ in range(n_steps):
        for m in models:
            out, leaves = m.graph(probe.xs)
            optim.step(opt, m.theta.params, m.flat_grad(mse_loss(out, probe.f_noisy), leaves))
    d0 = dsc.d_N(probe.f[0], probe.f[1])
    d1 = dsc.d_N(models[0](probe.xs), models[1](probe.xs))
    return (d1 - d0) / (n_steps * lr)


@dataclass
class TheoremRun:
    runlog: object
    reports: list[KernelReport]
    tau_0: int | None

    @property
    def all_pass(self) -> bool:
        return bool(self.reports) and all(r.result1_pass and r.result2_pass for r in self.reports)


def run_theorem_check(cohort, dataset: Dataset, cfg, every: int = 10, burst: int = 5, rtol: float = 1e-8) -> TheoremRun:
    """Train a pair in snapshot mode and check the theorem at probe steps.

    Probes fall on every ``every``-th evaluation plus ``burst`` evaluations
    either side of the live-detected tau_0.  Recent snapshots are kept in a
    ring buffer so the evaluations just before tau_0 can still be probed once
    the crossing becomes decidable ``w`` evaluations later.
    """
    if cfg.loss != "mse":
        raise ValueError("theorem checks need the mse loss")
    cfg = replace(cfg, snapshot=True, stop_rule=None)
    rule = StopRule(alpha=0.0, w=cfg.window)
    recent: deque = deque(maxlen=cfg.window + burst + 1)
    probes: dict[int, KernelProbe] = {}
    found: dict[str, int] = {}

    def on_eval(step, members, runlog):
        k = len(runlog.rows) - 1
        probe = KernelProbe.capture(step, members, dataset)
        recent.append((k, probe))
        if k % every == every - 1:
            probes[step] = probe
        if "k0" not in found:
            hit = dsc.crossing_at_tail(runlog.series.values, rule.w, runlog.series.eval_stride, 0.0, rule.burn_in)
            if hit is not None:
                found["k0"] = hit
        k0 = found.get("k0")
        if k0 is not None:
            for kk, pr in recent:
                if abs(kk - k0) <= burst:
                    probes.setdefault(pr.t, pr)

    runlog = train_cohort(cohort, dataset, cfg, on_eval=on_eval)
    reports = [check_theorem(probes[t], rtol) for t in sorted(probes)]
    tau_0 = runlog.steps[found["k0"]] if "k0" in found else None
    return TheoremRun(runlog, reports, tau_0)
