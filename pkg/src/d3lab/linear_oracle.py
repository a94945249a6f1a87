"""Gradient flow for linear feature models, where D_t must decay monotonically.

For f(x) = sum_i theta_i phi_i(x) trained on (1/N) sum (f - y)^2 the flow is

    dtheta/dt = -2 (G theta - c),   G = Phi^T Phi / N,   c = Phi^T y / N,

and the two members' difference obeys d(theta1 - theta2)/dt = -2 G (theta1 - theta2),
independent of y.  ``closed_form`` integrates this exactly through the
eigendecomposition of G; ``euler`` applies the explicit Euler map
theta <- theta - 2h (G theta - c), raised to the required number of steps
by repeated squaring so tiny steps stay affordable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .models import FeatureBasis
from .nn.rng import Rng

CLOSED_FORM = "closed_form"
EULER = "euler"


@dataclass
class LinearFlowState:
    basis: FeatureBasis | None
    Phi: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    y_noisy: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.Phi = np.asarray(self.Phi, dtype=np.float64)
        if self.Phi.ndim != 2 or self.Phi.shape[1] < 1:
            raise ValueError("Phi must be an N x P matrix with P >= 1")
        if not np.all(np.isfinite(self.Phi)):
            raise ValueError("Phi has non-finite entries")
        self.theta1 = np.asarray(self.theta1, dtype=np.float64).reshape(-1)
        self.theta2 = np.asarray(self.theta2, dtype=np.float64).reshape(-1)
        self.y_noisy = np.asarray(self.y_noisy, dtype=np.float64).reshape(-1)

    @property
    def N(self) -> int:
        return self.Phi.shape[0]

    @property
    def P(self) -> int:
        return self.Phi.shape[1]

    @property
    def gram(self) -> np.ndarray:
        return self.Phi.T @ self.Phi / self.N

    @property
    def moment(self) -> np.ndarray:
        return self.Phi.T @ self.y_noisy / self.N

    def discrepancy(self, theta1=None, theta2=None) -> float:
        t1 = self.theta1 if theta1 is None else theta1
        t2 = self.theta2 if theta2 is None else theta2
        diff = self.Phi @ t1 - self.Phi @ t2
        return float(diff @ diff) / self.N


@dataclass
class Trajectory:
    t: np.ndarray
    D: np.ndarray
    dDdt: np.ndarray
    mode: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "D_t", "dDdt_closed_form"])
            for row in zip(self.t, self.D, self.dDdt):
                w.writerow([repr(float(v)) for v in row])


def _phi_flow(lam: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """(exp(-2 lam t), (1 - exp(-2 lam t)) / lam) with the lam -> 0 limit 2t."""
    decay = np.exp(-2.0 * lam * t)
    safe = np.where(lam > 0, lam, 1.0)
    gain = np.where(lam > 0, -np.expm1(-2.0 * lam * t) / safe, 2.0 * t)
    return decay, gain


def _closed_form_theta(state: LinearFlowState, t: float):
    lam, V = np.linalg.eigh(state.gram)
    lam = np.clip(lam, 0.0, None)
    c = V.T @ state.moment
    decay, gain = _phi_flow(lam, t)
    out = []
    for theta in (state.theta1, state.theta2):
        z = V.T @ theta
        out.append(V @ (decay * z + gain * c))
    return out


def _euler_power(state: LinearFlowState, h: float, n: int):
    P = state.P
    M = np.eye(P + 1)
    M[:P, :P] -= 2.0 * h * state.gram
    M[:P, P] = 2.0 * h * state.moment
    Mn = np.linalg.matrix_power(M, n)
    return [Mn[:P, :P] @ th + Mn[:P, P] for th in (state.theta1, state.theta2)]


def integrate_flow(
    state: LinearFlowState,
    t_end: float,
    mode: str = CLOSED_FORM,
    n_samples: int = 50,
    h: float | None = None,
) -> Trajectory:
    """Sample D_t at ``n_samples + 1`` evenly spaced times in [0, t_end].

    In euler mode the step defaults to 1e-8 / lambda_max (well inside the
    0.1 / lambda_max stability margin) and is rounded so every sample time is
    a whole number of steps.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if mode not in (CLOSED_FORM, EULER):
        raise ValueError(f"unknown mode {mode!r}")
    times = np.linspace(0.0, t_end, n_samples + 1)
    D = np.empty_like(times)
    dD = np.empty_like(times)
    if mode == EULER:
        lam_max = max(float(np.linalg.eigvalsh(state.gram)[-1]), 1e-300)
        h_target = 1e-8 / lam_max if h is None else h
        if h_target > 0.1 / lam_max:
            raise ValueError("euler step exceeds 0.1 / lambda_max")
        per_sample = max(1, int(np.ceil((t_end / n_samples) / h_target)))
        h = (t_end / n_samples) / per_sample
    for k, t in enumerate(times):
        if mode == CLOSED_FORM:
            th1, th2 = _closed_form_theta(state, t)
        else:
            th1, th2 = _euler_power(state, h, per_sample * k)
        D[k] = state.discrepancy(th1, th2)
        dD[k] = derivative_closed_form(replace(state, theta1=th1, theta2=th2, t=t))
    traj = Trajectory(times, D, dD, mode)
    if mode == EULER:
        ok, viol = verify_monotone(traj)
        if not ok:
            raise FloatingPointError(f"euler integration increased D_t by {viol:.3e}")
    return traj


def verify_monotone(traj, tol: float = 1e-8) -> tuple[bool, float]:
    """(every finite-difference slope <= tol * max(D_0, 1), largest slope)."""
    if isinstance(traj, Trajectory):
        t, D = np.asarray(traj.t), np.asarray(traj.D)
    else:
        D = np.asarray(traj, dtype=np.float64)
        t = np.arange(D.size, dtype=np.float64)
    if D.size < 2:
        return True, 0.0
    slopes = np.diff(D) / np.diff(t)
    worst = float(np.max(slopes))
    limit = tol * max(float(D[0]), 1.0)
    return bool(worst <= limit), max(worst, 0.0)


def derivative_closed_form(state: LinearFlowState) -> float:
    """-4 sum_i <f1 - f2, phi_i>^2 with <f, g> = (1/N) sum f(x) g(x)."""
    diff = state.Phi @ (state.theta1 - state.theta2)
    proj = state.Phi.T @ diff / state.N
    return -4.0 * float(proj @ proj)


def linear_dynamic_check(G_psd, f0_pair, f_noisy, t_end: float, n_samples: int = 50):
    """Evolve df/dt = -G (f - f_noisy) for both members; check their distance.

    Returns (monotone, squared distances at the sample times).
    """
    G = np.asarray(G_psd, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("G must be square")
    if not np.allclose(G, G.T, atol=1e-12):
        raise ValueError("G must be symmetric")
    lam, V = np.linalg.eigh(G)
    if lam[0] < -1e-10:
        raise ValueError(f"G is not positive semi-definite (eigenvalue {lam[0]:.3e})")
    lam = np.clip(lam, 0.0, None)
    y = np.asarray(f_noisy, dtype=np.float64).reshape(-1)
    f1, f2 = (np.asarray(f, dtype=np.float64).reshape(-1) for f in f0_pair)
    times = np.linspace(0.0, t_end, n_samples + 1)
    dist = np.empty_like(times)
    for k, t in enumerate(times):
        decay = np.exp(-lam * t)
        g1 = y + V @ (decay * (V.T @ (f1 - y)))
        g2 = y + V @ (decay * (V.T @ (f2 - y)))
        e = g1 - g2
        dist[k] = float(e @ e)
    ok, _ = verify_monotone(Trajectory(times, dist, np.zeros_like(dist), CLOSED_FORM))
    return ok, dist


# ----------------------------------------------------------------------


def random_instance(seed: int, P: int | None = None, N: int | None = None, noise: float | None = None) -> LinearFlowState:
    """A random linear-feature pair: sizes, basis, targets and inits all from ``seed``."""
    rng = Rng(seed, "linear-instance")
    P = int(rng.integers(1, 21)) if P is None else P
    N = int(rng.integers(max(P, 2), 51)) if N is None else N
    noise = float(rng.uniform(0.0, 3.0)) if noise is None else noise
    if rng.uniform(0, 1) < 0.5:
        basis = FeatureBasis("random_fourier", P, {"seed": seed, "scale": float(rng.uniform(0.5, 4.0))})
        dim = int(rng.integers(1, 4))
    else:
        basis = FeatureBasis("polynomial", P)
        dim = 1
    x = rng.uniform(-1.0, 1.0, (N, dim))
    Phi = basis.evaluate(x)
    y = np.sin(3.0 * x[:, 0]) + noise * rng.normal(0.0, 1.0, N)
    k = 1.0 / np.sqrt(P)
    th1 = rng.child("theta1").uniform(-k, k, P)
    th2 = rng.child("theta2").uniform(-k, k, P)
    return LinearFlowState(basis, Phi, th1, th2, y)


def sweep_monotone(n_instances: int = 100, seed: int = 0, t_end: float = 2.0) -> dict:
    """Closed-form trajectories for ``n_instances`` random problems; count monotone ones."""
    passed = 0
    worst = 0.0
    for i in range(n_instances):
        st = random_instance(seed * 100003 + i)
        traj = integrate_flow(st, t_end, CLOSED_FORM)
        ok, viol = verify_monotone(traj)
        passed += ok
        worst = max(worst, viol)
    return {"n": n_instances, "monotone": passed, "max_violation": worst}
