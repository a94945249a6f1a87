"""Lockstep training of a cohort of identically-configured networks.

Every member consumes the same batch sequence (one shared permutation per
epoch drawn from ``shuffle_seed``) and is updated from its own gradients.  By
default D_t is accumulated from the forward passes already made for the loss,
so an evaluation row summarizes the stride window that just finished;
``snapshot=True`` instead re-evaluates every member on the full dataset with
frozen parameters at each evaluation boundary.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import discrepancy as dsc
from .datagen import CLASSIFICATION, Dataset
from .models import ModelState
from .nn import optim
from .nn.rng import Rng
from .nn.tensor import NonFiniteError, Tensor, mse_loss, softmax_cross_entropy

log = logging.getLogger(__name__)

MSE = "mse"
CROSS_ENTROPY = "softmax_cross_entropy"
SUMMARY_SCHEMA_VERSION = "1.0"


class DivergenceError(RuntimeError):
    """A cohort member produced a non-finite loss; carries the partial log."""

    def __init__(self, msg: str, run_log: "RunLog"):
        super().__init__(msg)
        self.run_log = run_log


@dataclass
class StopRule:
    """Derivative-threshold rule; ``live=False`` only scores the finished run."""

    alpha: float = 0.0
    w: int = 5
    min_evals: int | None = None
    live: bool = True

    @property
    def burn_in(self) -> int:
        return dsc.default_burn_in(self.w) if self.min_evals is None else self.min_evals


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int | None = None
    shuffle_seed: int = 0
    optimizer: optim.OptimizerState = field(default_factory=optim.OptimizerState)
    loss: str = MSE
    eval_stride: int | None = None
    stop_rule: StopRule | None = None
    window: int = 5
    snapshot: bool = False
    keep_outputs: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in (MSE, CROSS_ENTROPY):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RunLog:
    n_members: int
    series: dsc.DiscrepancySeries
    rows: list[dict] = field(default_factory=list)
    stop: dsc.StopReport | None = None
    stopped_early: bool = False
    diverged: bool = False
    batch_hashes: list[str] = field(default_factory=list)
    outputs: dict[int, list[np.ndarray]] = field(default_factory=dict)
    wallclock: float = 0.0
    task: str = ""

    @property
    def steps(self) -> list[int]:
        return [r["step"] for r in self.rows]

    def column(self, name: str, j: int | None = None) -> list:
        if j is None:
            return [r[name] for r in self.rows]
        return [r[name][j] if r[name] is not None else None for r in self.rows]

    def has_oracle(self) -> bool:
        return bool(self.rows) and self.rows[0]["oracle_err"] is not None


# ----------------------------------------------------------------------


def _loss_fn(kind: str):
    return mse_loss if kind == MSE else softmax_cross_entropy


def _targets(ds: Dataset, idx, clean: bool = False):
    ys = ds.ys_clean if clean else ds.ys_noisy
    return ys[idx]


def _as_metric_values(out: np.ndarray, task: str) -> np.ndarray:
    return np.argmax(out, axis=1) if task == CLASSIFICATION else out


def task_metric(task: str) -> str:
    return dsc.CLASS_DISAGREEMENT if task == CLASSIFICATION else dsc.SQ_L2


def oracle_error(model: ModelState, dataset: Dataset) -> float:
    """d_N(f, f_clean) under the task metric."""
    if not dataset.has_clean:
        raise ValueError("dataset has no clean targets")
    out = _as_metric_values(model(dataset.xs), dataset.task)
    clean = dataset.ys_clean
    return dsc.d_N(out, clean, task_metric(dataset.task))


def _member_step(model: ModelState, opt: optim.OptimizerState, xb, yb, loss_fn):
    out, leaves = model.graph(xb)
    loss = loss_fn(out, yb)
    lv = float(loss.data)
    if not math.isfinite(lv):
        raise NonFiniteError("non-finite loss")
    g = model.flat_grad(loss, leaves)
    optim.step(opt, model.theta.params, g)
    return out.data, lv


def _psnr_from_mse(mse: float) -> float:
    return dsc.PSNR_INF if mse == 0 else -10.0 * math.log10(mse)


def train_cohort(cohort: list[ModelState], dataset: Dataset, cfg: TrainConfig, on_eval=None) -> RunLog:
    """Train ``cohort`` in lockstep on ``dataset``.

    ``on_eval(step, cohort, runlog)`` is called after every evaluation row is
    logged, with the members' parameters frozen at that step.
    """
    if len(cohort) < 2:
        raise ValueError("a cohort needs at least two members")
    if len({m.arch.digest() for m in cohort}) != 1:
        raise ValueError("cohort members must share one architecture")
    if (cfg.loss == CROSS_ENTROPY) != (dataset.task == CLASSIFICATION):
        raise ValueError(f"loss {cfg.loss!r} does not match task {dataset.task!r}")

    N = dataset.N
    bs = N if cfg.batch_size is None else min(cfg.batch_size, N)
    steps_per_epoch = math.ceil(N / bs)
    stride = cfg.eval_stride or steps_per_epoch
    rule = cfg.stop_rule
    w = rule.w if rule else cfg.window
    series = dsc.DiscrepancySeries(eval_stride=float(stride), window=w)
    runlog = RunLog(len(cohort), series, task=dataset.task)
    metric = task_metric(dataset.task)
    track_oracle = dataset.has_clean
    track_psnr = dataset.task == "inr" and track_oracle
    loss_fn = _loss_fn(cfg.loss)
    opts = [cfg.optimizer.fresh() for _ in cohort]
    J = len(cohort)
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None

    acc = _Accumulator(J)
    t0 = time.perf_counter()
    step = 0
    stopped = False
    try:
        for epoch in range(cfg.epochs):
            if bs >= N:
                order = np.arange(N)
            else:
                order = Rng(cfg.shuffle_seed, "shuffle", epoch).permutation(N)
            runlog.batch_hashes.append(hashlib.sha256(order.astype("<i8").tobytes()).hexdigest()[:16])
            for start in range(0, N, bs):
                idx = order[start : start + bs]
                xb = dataset.xs[idx]
                yb = _targets(dataset, idx)
                try:
                    if pool is None:
                        results = [_member_step(m, o, xb, yb, loss_fn) for m, o in zip(cohort, opts)]
                    else:
                        futs = [pool.submit(_member_step, m, o, xb, yb, loss_fn) for m, o in zip(cohort, opts)]
                        results = [f.result() for f in futs]
                except NonFiniteError as exc:
                    runlog.diverged = True
                    runlog.rows.append(_diag_row(step, epoch, J))
                    runlog.wallclock = time.perf_counter() - t0
                    raise DivergenceError(f"cohort diverged at step {step}: {exc}", runlog) from exc
                step += 1
                if not cfg.snapshot:
                    outs = [_as_metric_values(r[0], dataset.task) for r in results]
                    clean = _targets(dataset, idx, clean=True) if track_oracle else None
                    acc.add(outs, [r[1] for r in results], metric, clean)
                if step % stride == 0:
                    if cfg.snapshot:
                        row, full = _snapshot_row(cohort, dataset, loss_fn, metric, step, epoch)
                    else:
                        row, full = acc.flush(step, epoch), None
                    if track_psnr:
                        row["psnr"] = [_psnr_from_mse(e) for e in row["oracle_err"]]
                    if cfg.keep_outputs:
                        runlog.outputs[step] = full if full is not None else [m(dataset.xs) for m in cohort]
                    runlog.rows.append(row)
                    series.append(step, row["D"], row["D_pair_mean"])
                    if on_eval is not None:
                        on_eval(step, cohort, runlog)
                    if rule is not None and rule.live and dsc.crossing_at_tail(
                        series.values, w, series.eval_stride, rule.alpha, rule.burn_in
                    ) is not None:
                        stopped = True
                        break
            if stopped:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    runlog.stopped_early = stopped
    runlog.wallclock = time.perf_counter() - t0
    runlog.stop = offline_stop(runlog, rule)
    return runlog


def offline_stop(runlog: RunLog, rule: StopRule | None = None) -> dsc.StopReport | None:
    rule = rule or StopRule(alpha=0.0, w=runlog.series.window)
    if len(runlog.series) < rule.w + 1:
        return None
    return dsc.stopping_time(runlog.series, rule.alpha, rule.w, rule.burn_in)


class _Accumulator:
    """Sample-weighted sums of D, loss and oracle error over one stride window."""

    def __init__(self, J: int):
        self.J = J
        self.reset()

    def reset(self):
        self.n = 0
        self.nb = 0
        self.d = 0.0
        self.d_all = 0.0
        self.loss = [0.0] * self.J
        self.oracle = [0.0] * self.J
        self.has_oracle = False

    def add(self, outs, losses, metric, clean):
        nb = len(outs[0])
        main, mean_all = dsc.cohort_discrepancy(outs, metric)
        self.d += main * nb
        self.d_all += mean_all * nb
        for j in range(self.J):
            self.loss[j] += losses[j]
            if clean is not None:
                self.oracle[j] += dsc.d_N(outs[j], clean, metric) * nb
        self.has_oracle = clean is not None
        self.n += nb
        self.nb += 1

    def flush(self, step, epoch) -> dict:
        row = {
            "step": step,
            "epoch": epoch,
            "D": self.d / self.n,
            "D_pair_mean": self.d_all / self.n,
            "loss": [v / self.nb for v in self.loss],
            "oracle_err": [v / self.n for v in self.oracle] if self.has_oracle else None,
            "psnr": None,
        }
        self.reset()
        return row


def _snapshot_row(cohort, ds: Dataset, loss_fn, metric, step, epoch):
    raw = [m(ds.xs) for m in cohort]
    outs = [_as_metric_values(o, ds.task) for o in raw]
    main, mean_all = dsc.cohort_discrepancy(outs, metric)
    losses = [float(loss_fn(Tensor(o), ds.ys_noisy).data) for o in raw]
    oracle = [dsc.d_N(o, ds.ys_clean, metric) for o in outs] if ds.has_clean else None
    row = {
        "step": step,
        "epoch": epoch,
        "D": main,
        "D_pair_mean": mean_all,
        "loss": losses,
        "oracle_err": oracle,
        "psnr": None,
    }
    return row, raw


def _diag_row(step, epoch, J) -> dict:
    nan = float("nan")
    return {
        "step": step,
        "epoch": epoch,
        "D": nan,
        "D_pair_mean": nan,
        "loss": [nan] * J,
        "oracle_err": None,
        "psnr": None,
        "diverged": True,
    }


# ----------------------------------------------------------------------


def optimal_stop(runlog: RunLog, j: int) -> int:
    """Logged step minimizing network j's oracle error; ties go to the earliest."""
    if not runlog.has_oracle():
        raise ValueError("run log has no oracle-error column")
    errs = np.asarray(runlog.column("oracle_err", j), dtype=np.float64)
    return runlog.steps[int(np.argmin(errs))]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def runlog_csv(runlog: RunLog) -> str:
    """Series CSV: step, D_t, D_smoothed, dDdt, loss_j, oracle_err_j, psnr_j."""
    J = runlog.n_members
    w = runlog.series.window
    vals = runlog.series.values
    n = len(vals)
    sm = dsc.moving_average(vals, w) if n >= w else np.array([])
    dd = np.diff(sm) / runlog.series.eval_stride if sm.size > 1 else np.array([])
    header = ["step", "D_t", "D_smoothed", "dDdt"] + [f"loss_{j + 1}" for j in range(J)]
    has_oracle = runlog.has_oracle()
    has_psnr = bool(runlog.rows) and runlog.rows[0].get("psnr") is not None
    if has_oracle:
        header += [f"oracle_err_{j + 1}" for j in range(J)]
    if has_psnr:
        header += [f"psnr_{j + 1}" for j in range(J)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for i, row in enumerate(runlog.rows):
        if row.get("diverged"):
            writer.writerow([row["step"], "nan", "", ""] + ["nan"] * J)
            continue
        line = [row["step"], _fmt(row["D"])]
        line.append(_fmt(float(sm[i])) if i < sm.size else "")
        line.append(_fmt(float(dd[i])) if i < dd.size else "")
        line += [_fmt(v) for v in row["loss"]]
        if has_oracle:
            line += [_fmt(v) for v in row["oracle_err"]]
        if has_psnr:
            line += [_fmt(v) for v in row["psnr"]]
        writer.writerow(line)
    return buf.getvalue()


def _json_num(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def summarize(runlog: RunLog, extra: dict | None = None) -> dict:
    stop = runlog.stop
    J = runlog.n_members
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "task": runlog.task,
        "n_members": J,
        "n_evals": len(runlog.rows),
        "final_step": runlog.steps[-1] if runlog.rows else 0,
        "stopped_early": runlog.stopped_early,
        "diverged": runlog.diverged,
        "alpha": stop.alpha if stop else None,
        "tau_0": stop.tau_0 if stop else None,
        "tau_alpha": stop.tau_alpha if stop else None,
        "triggered": stop.triggered if stop else False,
        "d_star": stop.d_star if stop else None,
        "peak_step": stop.peak_step if stop else None,
        "terminal_d": stop.terminal_d if stop else None,
        "prominence": _json_num(stop.prominence) if stop else None,
        "tau_opt_per_network": None,
        "psnr_at_stop": None,
        "psnr_at_opt": None,
        "psnr_gap": None,
    }
    if runlog.has_oracle() and not runlog.diverged:
        summary["tau_opt_per_network"] = [optimal_stop(runlog, j) for j in range(J)]
        if runlog.rows[0].get("psnr") is not None and stop is not None:
            tau = stop.tau_alpha if stop.triggered else runlog.steps[-1]
            steps = runlog.steps
            at_stop, at_opt, gaps = [], [], []
            for j in range(J):
                ps = runlog.column("psnr", j)
                opt_step = summary["tau_opt_per_network"][j]
                at_stop.append(_json_num(ps[steps.index(tau)]))
                at_opt.append(_json_num(ps[steps.index(opt_step)]))
                gaps.append(_json_num(dsc.psnr_gap(steps, ps, tau, opt_step)))
            summary.update(psnr_at_stop=at_stop, psnr_at_opt=at_opt, psnr_gap=gaps)
    if extra:
        summary.update(extra)
    return summary


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
