"""Experiment configs: loading, schema validation, and object construction.

A config is a JSON document validated against the shipped
``schema/config.schema.json`` before anything is computed.  Builders here turn
its sections into datasets, architectures and training configs.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from jsonschema import Draft202012Validator

from . import datagen
from .models import ArchSpec
from .nn.optim import OptimizerState
from .trainer import CROSS_ENTROPY, MSE, StopRule, TrainConfig

RUN_TASKS = ("toy_regression", "blobs_classification", "inr_denoise")


class ConfigError(ValueError):
    """Invalid config; ``path`` is the dotted location of the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path or '<root>'}: {msg}")
        self.path = path


def schema() -> dict:
    text = resources.files("d3lab").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def bundled_names() -> list[str]:
    root = resources.files("d3lab").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_path(name: str):
    return resources.files("d3lab").joinpath("configs", f"{name}.json")


def _dotted(parts) -> str:
    return ".".join(str(p) for p in parts)


def validate(cfg: dict) -> dict:
    """Raise ConfigError for the first schema violation (deepest path first)."""
    validator = Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (-len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "required":
            missing = [p for p in err.validator_value if p not in err.instance]
            raise ConfigError(_dotted(path + missing[:1]), "required field is missing")
        raise ConfigError(_dotted(path), err.message)
    _check_semantics(cfg)
    return cfg


def _check_semantics(cfg: dict) -> None:
    seeds = cfg.get("seeds", {}).get("init")
    if seeds is not None and len(set(seeds)) != len(seeds):
        raise ConfigError("seeds.init", "init seeds must be distinct")
    ds = cfg.get("dataset", {})
    bs = cfg.get("train", {}).get("batch_size")
    if bs is not None and "N" in ds and bs > ds["N"]:
        raise ConfigError("train.batch_size", f"batch_size {bs} exceeds N={ds['N']}")
    if "domain_lo" in ds and "domain_hi" in ds and not ds["domain_lo"] < ds["domain_hi"]:
        raise ConfigError("dataset.domain_hi", "domain_hi must exceed domain_lo")
    if cfg["task"] == "dq_sweep":
        n_pairs = cfg["sweep"].get("n_pairs", 3)
        if seeds is not None and len(seeds) < 2 * n_pairs:
            raise ConfigError("seeds.init", f"{n_pairs} pairs need {2 * n_pairs} init seeds")


def load(path) -> dict:
    """Read and validate a config.  OSError propagates for I/O failures."""
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("", "config must be a JSON object")
    return validate(cfg)


# ----------------------------------------------------------------------
# builders


def build_dataset(cfg: dict) -> datagen.Dataset:
    task = cfg["task"]
    d = cfg.get("dataset", {})
    if task in ("toy_regression", "theorem_check"):
        return datagen.gen_sigmoid_regression(
            N=d.get("N", 100),
            domain_lo=d.get("domain_lo", -2.0),
            domain_hi=d.get("domain_hi", 2.0),
            sigma=d.get("sigma", 0.5),
            seed=d.get("seed", 0),
            literal=d.get("literal_target", False),
        )
    if task in ("blobs_classification", "dq_sweep"):
        base = datagen.gen_blob_classification(
            N=d.get("N", 5000),
            K=d.get("K", 10),
            input_dim=d.get("input_dim", 2),
            spread=d.get("spread", 1.0),
            seed=d.get("seed", 0),
            center_scale=d.get("center_scale", 1.0),
        )
        if task == "dq_sweep":
            return base
        return datagen.corrupt_labels(base, d.get("corruption_rate", 0.0), d.get("corruption_seed", 0))
    if task == "inr_denoise":
        return datagen.gen_inr_dataset(load_image(d), d.get("sigma", 25.0), d.get("seed", 0))
    raise ConfigError("task", f"task {task!r} has no dataset")


def load_image(d: dict):
    name = d.get("image", "scene")
    h, w = d.get("height", 64), d.get("width", 64)
    if name in ("ramp", "checkerboard", "scene"):
        return datagen.synthetic_image(name, h, w)
    return datagen.load_pgm(name)


def build_arch(cfg: dict, ds: datagen.Dataset) -> ArchSpec:
    a = cfg["arch"]
    return ArchSpec(
        a["kind"],
        ds.input_dim,
        ds.output_dim,
        tuple(a.get("hidden_widths", (512, 512, 512))),
        sine_omega0=a.get("sine_omega0", 30.0),
    )


def build_optimizer(o: dict) -> OptimizerState:
    return OptimizerState(
        o["kind"],
        lr=o["lr"],
        momentum=o.get("momentum", 0.0),
        weight_decay=o.get("weight_decay", 0.0),
        adam_betas=tuple(o.get("adam_betas", (0.9, 0.999))),
        adam_eps=o.get("adam_eps", 1e-8),
    )


def build_stop(cfg: dict) -> StopRule:
    s = cfg.get("stop", {})
    w = s.get("w", cfg.get("train", {}).get("window", 5))
    return StopRule(alpha=s.get("alpha", 0.0), w=w, min_evals=s.get("min_evals"), live=s.get("live", False))


def build_train(cfg: dict, ds: datagen.Dataset, threads: int | None = None) -> TrainConfig:
    t = cfg["train"]
    rule = build_stop(cfg)
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t.get("batch_size"),
        shuffle_seed=cfg.get("seeds", {}).get("shuffle", 0),
        optimizer=build_optimizer(t["optimizer"]),
        loss=CROSS_ENTROPY if ds.task == datagen.CLASSIFICATION else MSE,
        eval_stride=t.get("eval_stride"),
        stop_rule=rule,
        window=rule.w,
        snapshot=t.get("snapshot", False),
        threads=threads if threads is not None else t.get("threads", 1),
    )


def init_seeds(cfg: dict) -> list[int]:
    return list(cfg.get("seeds", {}).get("init", [1, 2]))
