"""Command-line entry point.

    d3lab run            --config CFG [--out DIR]   single cohort run
    d3lab sweep          --config CFG [--out DIR]   corruption sweep + line fit
    d3lab estimate       FIT D_STAR   [--out DIR]   invert a saved fit
    d3lab verify-linear  [--config CFG]             linear-model monotonicity sweep
    d3lab check-theorem  [--config CFG]             kernel probes along a GD run

``--config`` accepts a file path or the name of a bundled config
(``toy_regression``, ``blobs_classification``, ...).  Exit codes: 0 success,
1 a verification reported failures, 2 invalid config or input, 3 training
diverged, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import datagen
from . import discrepancy as dsc
from . import dq_assess, kernel, linear_oracle
from .models import make_identical_cohort
from .trainer import DivergenceError, dump_json, runlog_csv, summarize, train_cohort

log = logging.getLogger("d3lab")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DEFAULT_CONFIG = {
    "run": "toy_regression",
    "sweep": "dq_sweep",
    "verify-linear": "linear_oracle",
    "check-theorem": "theorem_check",
}


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------------
# helpers


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        if flag < 1:
            raise UsageError("--threads must be >= 1")
        return flag
    env = os.environ.get("D3LAB_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise UsageError(f"D3LAB_THREADS={env!r} is not an integer") from exc
        if n < 1:
            raise UsageError("D3LAB_THREADS must be >= 1")
        return n
    return None


def load_config(arg: str | None, command: str) -> dict:
    if arg is None:
        return cfgmod.load(cfgmod.bundled_path(DEFAULT_CONFIG[command]))
    if not Path(arg).exists() and arg.removesuffix(".json") in cfgmod.bundled_names():
        return cfgmod.load(cfgmod.bundled_path(arg.removesuffix(".json")))
    return cfgmod.load(arg)


def out_dir(args, cfg: dict | None) -> Path:
    if args.out:
        path = Path(args.out)
    elif cfg and cfg.get("output", {}).get("dir"):
        path = Path(cfg["output"]["dir"])
    else:
        path = Path("d3lab_out") / (cfg["task"] if cfg else "estimate")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _nan_to_none(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


# ----------------------------------------------------------------------
# commands


def cmd_run(args, cfg: dict) -> int:
    task = cfg["task"]
    if task == "dq_sweep":
        return cmd_sweep(args, cfg)
    if task == "linear_oracle":
        return cmd_verify_linear(args, cfg)
    if task == "theorem_check":
        return cmd_check_theorem(args, cfg)
    threads = resolve_threads(args.threads)
    ds = cfgmod.build_dataset(cfg)
    arch = cfgmod.build_arch(cfg, ds)
    tcfg = cfgmod.build_train(cfg, ds, threads)
    is_inr = ds.task == datagen.INR
    if is_inr:
        tcfg.keep_outputs = True
    seeds = cfgmod.init_seeds(cfg)
    cohort = make_identical_cohort(arch, len(seeds), seeds)
    out = out_dir(args, cfg)
    log.info("run %s: %d members, %d params each", task, len(cohort), cohort[0].n_params)
    try:
        rl = train_cohort(cohort, ds, tcfg)
    except DivergenceError as exc:
        write_text(out / "run.csv", runlog_csv(exc.run_log))
        raise
    extra = {"config": cfg, "dataset": _dataset_meta(ds)}
    summary = summarize(rl, extra)
    write_text(out / "run.csv", runlog_csv(rl))
    dump_json(summary, out / "summary.json")
    if is_inr:
        _write_reconstructions(rl, ds, summary, out)
    if args.plot:
        from . import plotting

        plotting.plot_run(rl, summary, out / "run.png")
    emit({k: summary[k] for k in ("task", "tau_0", "tau_alpha", "d_star", "terminal_d", "prominence", "psnr_gap")} | {"out": str(out)})
    return EXIT_OK


def _dataset_meta(ds: datagen.Dataset) -> dict:
    meta = {"task": ds.task, "N": ds.N, "noise": ds.noise_meta.__dict__.copy()}
    if ds.task == datagen.INR:
        meta["noisy_psnr"] = _nan_to_none(dsc.psnr(ds.ys_noisy, ds.ys_clean))
        meta["image_shape"] = list(ds.image_shape)
    return meta


def _write_reconstructions(rl, ds, summary, out: Path) -> None:
    h, w = ds.image_shape
    datagen.save_pgm(ds.ys_clean.reshape(h, w), out / "clean.pgm")
    datagen.save_pgm(ds.ys_noisy.reshape(h, w), out / "noisy.pgm")
    stop = rl.stop
    tau = stop.tau_alpha if stop is not None and stop.triggered else rl.steps[-1]
    for j in range(rl.n_members):
        datagen.save_pgm(rl.outputs[tau][j].reshape(h, w), out / f"stopped_{j + 1}.pgm")
        opt = summary["tau_opt_per_network"][j]
        datagen.save_pgm(rl.outputs[opt][j].reshape(h, w), out / f"optimal_{j + 1}.pgm")


def cmd_sweep(args, cfg: dict) -> int:
    if cfg["task"] != "dq_sweep":
        raise cfgmod.ConfigError("task", "sweep needs a dq_sweep config")
    threads = resolve_threads(args.threads) or cfg["train"].get("threads", 1)
    base = cfgmod.build_dataset(cfg)
    arch = cfgmod.build_arch(cfg, base)
    tcfg = cfgmod.build_train(cfg, base, threads=1)
    sw = cfg["sweep"]
    prominence = cfg.get("stop", {}).get("prominence", 1.5)
    out = out_dir(args, cfg)
    res = dq_assess.run_sweep(
        base,
        sw["rates"],
        arch,
        tcfg,
        cfgmod.init_seeds(cfg),
        n_pairs=sw.get("n_pairs", 3),
        corruption_seed=sw.get("corruption_seed", 0),
        include_clean=sw.get("include_clean", False),
        prominence=prominence,
        threads=threads,
    )
    doc = res.to_dict()
    doc["inversions"] = dq_assess.count_inversions(res.points)
    target = sw.get("estimate_rate")
    if target is not None and res.fit is not None:
        E_true, est = dq_assess.leave_one_out(res.points, target)
        doc["leave_one_out"] = {"rate": target, "E_realized": E_true, **est.__dict__}
    dump_json(doc, out / "sweep.json")
    if res.fit is not None:
        dump_json(res.fit.__dict__, out / "fit.json")
    with open(out / "sweep_points.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "E_realized", "D_star", "tau_0", "prominent_pairs", "flag"])
        for p in res.points:
            w.writerow([repr(p.rate), repr(p.E_realized), "" if p.D_star is None else repr(p.D_star), "" if p.tau_0 is None else p.tau_0, p.prominent_pairs, p.flag or ""])
    if args.plot:
        from . import plotting

        plotting.plot_sweep(res, out / "sweep.png")
    fit = res.fit.__dict__ if res.fit else None
    emit({"points": len(res.points), "fit": fit, "inversions": doc["inversions"], "out": str(out)})
    return EXIT_OK


def _read_fit(path) -> dq_assess.LineFit:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and isinstance(doc.get("fit"), dict):
        doc = doc["fit"]
    try:
        return dq_assess.LineFit(
            float(doc["slope"]), float(doc["intercept"]), float(doc.get("r_squared", math.nan)),
            float(doc.get("resid_se", 0.0)), int(doc.get("n", 3)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: not a fit file (need slope and intercept)") from exc


def cmd_estimate(args) -> int:
    fit = _read_fit(args.fit)
    est = dq_assess.estimate_noise(fit, args.d_star)
    doc = est.__dict__
    if args.out:
        dump_json(doc, out_dir(args, None) / "estimate.json")
    emit(doc)
    return EXIT_OK


def cmd_verify_linear(args, cfg: dict) -> int:
    if cfg["task"] != "linear_oracle":
        raise cfgmod.ConfigError("task", "verify-linear needs a linear_oracle config")
    lin = cfg["linear"]
    n = lin.get("n_instances", 100)
    seed = lin.get("seed", 0)
    t_end = lin.get("t_end", 2.0)
    n_samples = lin.get("n_samples", 50)
    mode = lin.get("mode", linear_oracle.CLOSED_FORM)
    out = out_dir(args, cfg)
    passed, worst, rows = 0, 0.0, []
    first = None
    for i in range(n):
        st = linear_oracle.random_instance(seed * 100003 + i)
        traj = linear_oracle.integrate_flow(st, t_end, mode, n_samples)
        ok, viol = linear_oracle.verify_monotone(traj)
        passed += ok
        worst = max(worst, viol)
        rows.append({"instance": i, "P": st.P, "N": st.N, "monotone": ok, "max_violation": viol, "D_0": float(traj.D[0])})
        if first is None:
            first = traj
    first.to_csv(out / "trajectory.csv")
    dump_json({"n": n, "monotone": passed, "max_violation": worst, "mode": mode, "instances": rows}, out / "linear_summary.json")
    print(f"monotone: {passed}/{n}")
    return EXIT_OK if passed == n else EXIT_FAILED


def cmd_check_theorem(args, cfg: dict) -> int:
    if cfg["task"] != "theorem_check":
        raise cfgmod.ConfigError("task", "check-theorem needs a theorem_check config")
    threads = resolve_threads(args.threads)
    ds = cfgmod.build_dataset(cfg)
    arch = cfgmod.build_arch(cfg, ds)
    tcfg = cfgmod.build_train(cfg, ds, threads)
    th = cfg.get("theorem", {})
    seeds = cfgmod.init_seeds(cfg)[:2]
    out = out_dir(args, cfg)
    run = kernel.run_theorem_check(
        make_identical_cohort(arch, 2, seeds), ds, tcfg, th.get("every", 10), th.get("burst", 5), th.get("rtol", 1e-8)
    )
    reports = run.reports
    dump_json([r.to_dict() for r in reports], out / "kernel_report.json")
    fd_lr = th.get("fd_lr", 1e-7)
    probe = kernel.KernelProbe.capture(0, make_identical_cohort(arch, 2, seeds), ds)
    kern = kernel.discrepancy_derivative_kernel(probe)
    fd = kernel.fd_discrepancy_derivative(probe, fd_lr)
    alpha_k = kernel.alpha_suggestion(reports, run.tau_0, th.get("alpha_radius", 5)) if reports else None
    lr = tcfg.optimizer.lr
    result = {
        "n_probes": len(reports),
        "result1_pass": all(r.result1_pass for r in reports),
        "result2_pass": all(r.result2_pass for r in reports),
        "result1_premise_count": sum(r.result1_premise for r in reports),
        "result2_premise_count": sum(r.result2_premise for r in reports),
        "max_identity_residual": max((abs(r.identity_residual) / r.scale for r in reports), default=0.0),
        "tau_0": run.tau_0,
        "alpha_suggested_kernel_time": alpha_k,
        "alpha_suggested_per_step": kernel.alpha_per_step(alpha_k, lr) if alpha_k is not None else None,
        "derivative_at_init": {"kernel": kern, "finite_difference": fd, "fd_lr": fd_lr, "rel_err": abs(fd - kern) / abs(kern) if kern else None},
    }
    write_text(out / "run.csv", runlog_csv(run.runlog))
    dump_json(summarize(run.runlog, {"config": cfg, "theorem": result}), out / "summary.json")
    if args.plot:
        from . import plotting

        plotting.plot_kernel(reports, out / "kernel.png")
    emit(result | {"out": str(out)})
    ok = bool(reports) and result["result1_pass"] and result["result2_pass"]
    return EXIT_OK if ok else EXIT_FAILED


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", metavar="DIR", help="output directory (default: config output.dir or d3lab_out/<task>)")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads; falls back to $D3LAB_THREADS")
    common.add_argument("--log-level", default="WARNING", metavar="L", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSV/JSON outputs")

    parser = argparse.ArgumentParser(prog="d3lab", description="Discrepancy double-descent experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "train one cohort and log its discrepancy"),
        ("sweep", "corruption sweep and D* line fit"),
        ("verify-linear", "monotonicity sweep over random linear models"),
        ("check-theorem", "kernel probes along a plain GD run"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--config", metavar="PATH", help="config JSON or bundled config name")
    p = sub.add_parser("estimate", parents=[common], help="estimate a noise level from D*")
    p.add_argument("fit", help="fit.json or sweep.json from a sweep")
    p.add_argument("d_star", type=float, help="observed peak discrepancy")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"d3lab: unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "estimate":
            return cmd_estimate(args)
        cfg = load_config(args.config, args.command)
        handler = {
            "run": cmd_run,
            "sweep": cmd_sweep,
            "verify-linear": cmd_verify_linear,
            "check-theorem": cmd_check_theorem,
        }[args.command]
        return handler(args, cfg)
    except cfgmod.ConfigError as exc:
        print(f"d3lab: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dq_assess.FitUninformative as exc:
        print(f"d3lab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"d3lab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"d3lab: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"d3lab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
