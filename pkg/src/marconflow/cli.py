"""``marconflow`` command line: gen-toy, train, eval, sample, audit.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 audit failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import gradcore as gc
from . import metrics as metrics_mod
from .baselines import VARIANTS, variant_config
from .lrs import SplineConfig
from .model import ModelConfig, MosesModel, load_model, save_model
from .series import (
    TOY_GENERATORS,
    DataValidationError,
    TimeScaler,
    load_jsonl,
    n_channels_of,
    split,
    write_jsonl,
)
from .trainer import TrainConfig, TrainState, train

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_AUDIT = 0, 2, 3, 4

log = logging.getLogger("marconflow")


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {
    "n_channels", "null_token", "disable_flows", "identity_covariance", "uniform_weights", "spline"}
_SPLINE_KEYS = {f.name for f in dataclasses.fields(SplineConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_TOP_KEYS = {"data", "split", "split_seed", "model", "train", "variant", "out", "seed"}


def _check_keys(section: str, doc: dict, allowed: set) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def default_config() -> dict:
    return {
        "data": None,
        "split": [0.7, 0.1, 0.2],
        "split_seed": 0,
        "model": {"components": 1, "latent": 16, "pos_dim": 16, "heads": 1, "rank": 8,
                  "spline": dataclasses.asdict(SplineConfig())},
        "train": {k: v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "seed"},
        "variant": "moses",
        "out": "run",
        "seed": 0,
    }


def read_config(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(raw.decode())
        return json.loads(raw)
    except Exception as exc:  # parse errors differ per format
        raise ConfigError(f"cannot parse config {path}: {exc}") from None


def resolve_config(user: dict | None, overrides: dict) -> dict:
    """Merge user config and command-line overrides over the defaults; reject unknown keys."""
    cfg = default_config()
    user = dict(user or {})
    _check_keys("config", user, _TOP_KEYS)
    for section, allowed in (("model", _MODEL_KEYS | {"spline"}), ("train", _TRAIN_KEYS - {"seed"})):
        part = user.pop(section, {}) or {}
        _check_keys(section, part, allowed)
        if "spline" in part:
            _check_keys("model.spline", part["spline"], _SPLINE_KEYS)
            cfg["model"]["spline"].update(part.pop("spline"))
        cfg[section].update(part)
    cfg.update(user)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg['variant']!r}; choose from {sorted(VARIANTS)}")
    if not cfg["data"]:
        raise ConfigError("config must name a data file")
    return cfg


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- helpers -----------------------------------------------------------------------------


def _load_for_model(path, manifest: dict) -> tuple[list, list]:
    """Raw instances and their time-normalized copies under the checkpoint's scaler."""
    raw = load_jsonl(path, manifest["model"]["n_channels"])
    scaler = TimeScaler(*manifest["time_scaler"])
    return raw, scaler.transform(raw)


# -- commands ----------------------------------------------------------------------------


def cmd_gen_toy(args) -> int:
    gen = TOY_GENERATORS[args.name]
    instances = gen(args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(instances, out)
    write_json(out.with_suffix(".config.json"), {"command": "gen-toy", "name": args.name, "n": args.n,
                                                 "seed": args.seed, "out": str(out)})
    log.info("wrote %d %s instances to %s", len(instances), args.name, out)
    return EXIT_OK


def cmd_train(args) -> int:
    user = read_config(args.config) if args.config else {}
    cfg = resolve_config(user, {"seed": args.seed, "out": args.out, "variant": args.variant, "data": args.data})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    instances = load_jsonl(cfg["data"])
    parts = split(instances, tuple(cfg["split"]), cfg["split_seed"])
    train_raw, val_raw, test_raw = (parts.take(instances, p) for p in ("train", "validation", "test"))
    if not train_raw or not val_raw:
        raise DataValidationError("split leaves the training or validation set empty")
    scaler = TimeScaler.fit(train_raw)
    train_set, val_set = scaler.transform(train_raw), scaler.transform(val_raw)
    write_jsonl(test_raw, out / "test.jsonl")

    n_channels = n_channels_of(instances)
    null_token = any(i.n_context == 0 for i in instances)
    model_doc = dict(cfg["model"])
    spline = SplineConfig(**model_doc.pop("spline"))
    base = ModelConfig(n_channels=n_channels, null_token=null_token, spline=spline, **model_doc)
    mcfg = variant_config(base, VARIANTS[cfg["variant"]])
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    write_json(out / "resolved_config.json", cfg)

    best = None
    if args.resume:
        model, manifest, adam = load_model(args.resume)
        if model.cfg != mcfg:
            raise ConfigError("checkpoint model configuration differs from the resolved config")
        state = TrainState.from_manifest(manifest["train_state"], adam)
        best_path = Path(args.resume).with_name("best.ckpt")
        best = load_model(best_path)[0] if best_path.exists() else None
    else:
        model = MosesModel(mcfg, seed=cfg["seed"])
        state = TrainState(gc.adam_init(model.trainable()))

    best, report = train(model, train_set, val_set, tcfg, state=state, best=best,
                         log=lambda line: print(line, flush=True))
    manifest = {"time_scaler": [scaler.lo, scaler.hi], "seed": cfg["seed"], "variant": cfg["variant"],
                "step": state.adam.step, "train_state": state.to_manifest()}
    save_model(out / "best.ckpt", best, manifest)
    save_model(out / "last.ckpt", model, manifest, adam=state.adam)
    report.to_json(out / "report.json")
    log.info("best epoch %s, validation njNLL %s", report.best_epoch, report.best_val_njnll)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, manifest, _ = load_model(args.checkpoint)
    _, data = _load_for_model(args.data, manifest)
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in metrics_mod.METRICS]
    if unknown or not names:
        raise ConfigError(f"unknown metric(s) {unknown}; choose from {sorted(metrics_mod.METRICS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", {
        "command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data), "metrics": names,
        "seed": args.seed, "n_samples": args.n_samples, "threads": args.threads})
    label = {"dataset": Path(args.data).stem, "model": manifest.get("variant", "moses")}
    reports = []
    for name in names:
        fn = metrics_mod.METRICS[name]
        kw = dict(threads=args.threads, **label)
        if name in metrics_mod.SAMPLED_METRICS:
            kw.update(n_samples=args.n_samples, seed=args.seed)
        rep = fn(model, data, **kw)
        reports.append(rep)
        if name == "mi":
            reports.append(metrics_mod.MetricReport(
                "mi_noise_floor", rep.extra["noise_floor"], 0.0, rep.n, **label))
        print(f"{name} {rep.value:.6f} +- {rep.stderr:.6f}", flush=True)
    metrics_mod.write_reports(reports, out / "metrics.csv", out / "metrics.json")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, manifest, _ = load_model(args.checkpoint)
    _, data = _load_for_model(args.data, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out.with_suffix(".config.json"), {
        "command": "sample", "checkpoint": str(args.checkpoint), "data": str(args.data),
        "n": args.n, "seed": args.seed})
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "sample_id", "component", "k", "y"])
        for i, inst in enumerate(data):
            y, comp = model.sample(inst, metrics_mod.instance_rng(args.seed, i), args.n)
            for s in range(args.n):
                for k in range(inst.n_query):
                    writer.writerow([i, s, int(comp[s]), k, repr(float(y[s, k]))])
    return EXIT_OK


def cmd_audit(args) -> int:
    model, manifest, _ = load_model(args.checkpoint)
    _, data = _load_for_model(args.data, manifest)
    if args.max_instances is not None:
        data = data[: args.max_instances]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", {
        "command": "audit", "checkpoint": str(args.checkpoint), "data": str(args.data), "grid": args.grid,
        "seed": args.seed, "n_samples": args.n_samples, "max_instances": args.max_instances,
        "threads": args.threads})
    too_big = [i for i, inst in enumerate(data) if inst.n_query > 3]
    if too_big:
        log.warning("skipping %d instance(s) with more than three query variables", len(too_big))

    def run(i):
        if data[i].n_query > 3:
            return []
        cond = model.conditional(data[i])
        return audit_mod.audit_conditional(cond, args.grid, args.n_samples, metrics_mod.instance_rng(args.seed, i))

    results = metrics_mod.parallel_map(run, range(len(data)), args.threads)
    rows, summary = [], []
    for i, per_var in enumerate(results):
        for va in per_var:
            rows.append((i, va))
            summary.append({"instance_id": i, "k": va.k, "rel_error": va.rel_error, "passed": va.passed})
            audit_mod.write_audit_svg(out / f"instance{i}_var{va.k}.svg", va)
    audit_mod.write_audit_csv(out / "audit.csv", rows)
    failed = [s for s in summary if not s["passed"]]
    write_json(out / "audit.json", {"tolerance": audit_mod.R3_TOLERANCE, "checks": summary,
                                    "failed": len(failed), "passed": not failed})
    for s in summary:
        print(f"instance {s['instance_id']} var {s['k']} rel_error {s['rel_error']:.3e} "
              f"{'PASS' if s['passed'] else 'FAIL'}", flush=True)
    return EXIT_AUDIT if failed else EXIT_OK


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marconflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate a toy dataset as JSONL")
    g.add_argument("name", choices=sorted(TOY_GENERATORS))
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="train a model from a JSON/TOML run config")
    t.add_argument("--config")
    t.add_argument("--data", help="JSONL dataset (overrides the config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--resume", help="continue from a last.ckpt written by a previous run")
    t.set_defaults(func=cmd_train)

    threads = max(1, os.cpu_count() or 1)
    for name, func, helptext in (("eval", cmd_eval, "compute metrics"),
                                 ("sample", cmd_sample, "draw joint samples"),
                                 ("audit", cmd_audit, "marginalization-consistency audit")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("checkpoint")
        c.add_argument("data")
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--out", required=True)
        c.add_argument("--threads", type=int, default=threads)
        c.set_defaults(func=func)
        if name == "eval":
            c.add_argument("--metrics", default="njnll,mnll,mi")
            c.add_argument("--n-samples", type=int, default=1000)
        elif name == "sample":
            c.add_argument("--n", type=int, default=100)
        else:
            c.add_argument("--grid", type=int, default=41)
            c.add_argument("--n-samples", type=int, default=1000)
            c.add_argument("--max-instances", type=int)
    return p


def main(argv=None) -> int:
    level = os.environ.get("MARCONFLOW_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataValidationError, gc.ContractError, FileNotFoundError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except gc.NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
