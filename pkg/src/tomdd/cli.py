"""Command-line entry point: ``tomdd <command> [options] [--set key=value ...]``.

A run configuration is a JSON object with the sections ``source`` and
``target`` (phantom specs), ``unet`` and ``adapt``.  ``--config`` loads one,
``--set adapt.gamma=0.9`` overrides a single dotted key (last write wins).
Every output directory receives a ``run.json`` provenance record.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import METHODS, TrainingError, adapt, deterministic_mode, draw_volumes, finetune_fewshot, pretrain_source
from .benchmark import (Benchmark, BenchmarkConfig, ComparisonTable, compare_methods, config_hash, default_grid,
                        desk_benchmark, fewshot_curve, plot_fewshot, stability_sweep)
from .data import LabeledSet, load_dataset, split
from .metrics import evaluate
from .model import ConfigError, build_unet, load_checkpoint, save_checkpoint
from .phantom import SpecError, generate_dataset

log = logging.getLogger("tomdd")

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ValidationError(ValueError):
    pass


# --------------------------------------------------------------------------- configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; every path must already exist in ``cfg``."""
    cfg = json.loads(json.dumps(cfg))
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ValidationError(f"unknown config key: {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ValidationError(f"unknown config key: {key}")
        node[parts[-1]] = _parse_value(raw)
    return cfg


def load_run_config(path: str | None, overrides: list[str]) -> BenchmarkConfig:
    base = desk_benchmark().to_dict()
    if path and path != "default":
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        flat = [f"{k}={json.dumps(v)}" for k, v in _flatten(user)]
        base = apply_overrides(base, flat)
    d = apply_overrides(base, overrides)
    try:
        cfg = BenchmarkConfig.from_dict(d)
        cfg.source.validate()
        cfg.target.validate()
        cfg.unet.validate()
        cfg.adapt.validate()
    except KeyError as exc:
        raise ValidationError(f"unknown config key: {exc.args[0]}") from exc
    except (SpecError, ConfigError, TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    return cfg


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        # phantom ranges and the shift block are leaves or nested dicts respectively
        if isinstance(v, dict) and v:
            yield from _flatten(v, key + ".")
        else:
            yield key, v


# --------------------------------------------------------------------------- provenance


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_provenance(out: Path, command: str, argv: list[str], cfg: BenchmarkConfig, seed: int, t0: float,
                     deterministic: bool, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": argv,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "git_revision": git_revision(),
        "package_version": __version__,
        "seed": seed,
        "deterministic": deterministic,
        "wall_clock_s": time.perf_counter() - t0,
        **extra,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2))


# --------------------------------------------------------------------------- data helpers


def _domain_dir(data: Path, domain: str) -> Path:
    if (data / "manifest.json").exists():
        return data
    return data / domain


def _load_split(data: Path, domain: str) -> dict[str, LabeledSet]:
    d = _domain_dir(data, domain)
    if not (d / "manifest.json").exists():
        raise ValidationError(f"no {domain} dataset under {data}")
    full, manifest = load_dataset(d)
    return split(full, manifest["splits"])


# --------------------------------------------------------------------------- commands


def cmd_generate_data(args, cfg: BenchmarkConfig) -> dict:
    out = Path(args.out)
    domains = ["source", "target"] if args.domain == "both" else [args.domain]
    counts = {}
    for dom in domains:
        spec = cfg.source if dom == "source" else cfg.target
        manifest = generate_dataset(spec, dom, out / dom)
        counts[dom] = sum(len(v) for v in manifest["volumes"].values())
    return {"samples": counts}


def cmd_pretrain(args, cfg: BenchmarkConfig) -> dict:
    src = _load_split(Path(args.data), "source")
    model = build_unet(cfg.unet, cfg.adapt.seed)
    model, hist = pretrain_source(model, src["train"], cfg.adapt, src.get("val"))
    out = Path(args.out)
    save_checkpoint(model, out / "model.pt", {"stage": "pretrain", "config_hash": cfg.config_hash()})
    hist.write_jsonl(out / "history.jsonl")
    report = {}
    if "val" in src:
        report = evaluate(model, src["val"], method="pretrain", config_hash=cfg.config_hash()).to_dict()
        (out / "report.json").write_text(json.dumps(report, indent=2))
    return {"selected_step": hist.selected_step, "source_val_f1": report.get("mean_f1")}


def cmd_adapt(args, cfg: BenchmarkConfig) -> dict:
    acfg = replace(cfg.adapt, method=args.method)
    data = Path(args.data)
    src, tgt = _load_split(data, "source"), _load_split(data, "target")
    model = load_checkpoint(args.checkpoint)
    model.f_prime = None
    model, hist = adapt(model, src["train"], tgt["train"].strip_labels(), acfg, src.get("val"))
    out = Path(args.out)
    save_checkpoint(model, out / "model.pt", {"stage": "adapt", "method": args.method})
    hist.write_jsonl(out / "history.jsonl")
    report = evaluate(model, tgt["test"], method=args.method, config_hash=config_hash(acfg.to_dict()))
    report.save(out / "report.json")
    return {"mean_f1": report.mean_f1, "std_f1": report.std_f1}


def cmd_finetune(args, cfg: BenchmarkConfig) -> dict:
    tgt = _load_split(Path(args.data), "target")
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    available = tgt["train"].volumes
    if args.k > len(available):
        raise ValidationError(f"k={args.k} exceeds the {len(available)} labeled target-train volumes")
    draws = []
    for d in range(args.draws):
        vols = draw_volumes(available, args.k, cfg.adapt.seed, d)
        tuned, hist = finetune_fewshot(model, tgt["train"].select_volumes(vols), cfg.adapt)
        report = evaluate(tuned, tgt["test"], method=f"ours_fewshot_{args.k}", config_hash=cfg.config_hash())
        report.save(out / f"report_draw{d}.json")
        hist.write_jsonl(out / f"history_draw{d}.jsonl")
        draws.append({"volumes": vols, "mean_f1": report.mean_f1})
    f1 = [d["mean_f1"] for d in draws]
    summary = {"k": args.k, "draws": draws, "mean_f1": float(np.mean(f1)), "std_f1": float(np.std(f1))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return {"mean_f1": summary["mean_f1"], "std_f1": summary["std_f1"]}


def cmd_evaluate(args, cfg: BenchmarkConfig) -> dict:
    sets = _load_split(Path(args.data), "target")
    if args.split not in sets:
        raise ValidationError(f"split {args.split!r} is empty or missing")
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, sets[args.split], method=args.method, config_hash=cfg.config_hash())
    report.save(Path(args.out) / "report.json")
    return {"mean_f1": report.mean_f1, "std_f1": report.std_f1}


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ValidationError(f"expected a comma separated list of numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ValidationError(f"expected a comma separated list of integers, got {text!r}") from exc


def cmd_sweep(args, cfg: BenchmarkConfig) -> dict:
    da, dg = default_grid(cfg.adapt.alpha, cfg.adapt.gamma)
    alphas, gammas = _floats(args.alphas) or da, _floats(args.gammas) or dg
    bench = Benchmark(cfg)
    grid = stability_sweep(bench, alphas, gammas, _ints(args.seeds), method=args.method)
    grid.save(args.out)
    return {"spread": grid.spread}


def cmd_compare(args, cfg: BenchmarkConfig) -> dict:
    methods = [m for m in args.methods.split(",") if m]
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    seeds = _ints(args.seeds)
    ks = _ints(args.fewshot_k) if args.fewshot_k else []
    bench = Benchmark(cfg)
    table = compare_methods(bench, methods, seeds)
    if ks:
        adapted = bench.run_method("ours", seeds[0], keep_model=True).model
        extra = fewshot_curve(bench, adapted, ks, seeds[0], args.draws)
        for k in ks:
            for r in bench.target_only(k, seeds[0], args.draws):
                extra.add(f"target_only_{k}", r)
        table.rows.update(extra.rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(table.to_markdown())
    (out / "results.json").write_text(json.dumps(table.to_dict(), indent=2))
    if ks:
        plot_fewshot(table, out / "fewshot.png")
    return {tag: table.mean(tag) for tag in table.rows}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomdd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", default=None, help="JSON run config ('default' = desk benchmark)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. adapt.gamma=0.9 (repeatable, last wins)")
        p.add_argument("--out", required=True, help="output directory (receives run.json)")
        p.add_argument("--deterministic", action="store_true",
                       help="deterministic backend mode (also via TOMDD_DETERMINISTIC=1)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = add("generate-data", "render source and/or target phantom datasets")
    p.add_argument("--spec", default="default", help="'default' or a JSON run config (alias of --config)")
    p.add_argument("--domain", choices=["source", "target", "both"], default="both", help="which domain(s) to write")

    p = add("pretrain", "supervised pretraining of psi and f on the source domain")
    p.add_argument("--data", required=True, help="dataset root written by generate-data")

    p = add("adapt", "unsupervised adaptation from a pretrained checkpoint")
    p.add_argument("--data", required=True, help="dataset root written by generate-data")
    p.add_argument("--checkpoint", required=True, help="pretrained model.pt")
    p.add_argument("--method", choices=METHODS, default="ours", help="adaptation method")

    p = add("finetune", "few-shot fine-tuning on k labeled target volumes")
    p.add_argument("--data", required=True, help="dataset root or target dataset directory")
    p.add_argument("--checkpoint", required=True, help="adapted model.pt")
    p.add_argument("--k", type=int, required=True, help="number of labeled target volumes")
    p.add_argument("--draws", type=int, default=5, help="number of random volume draws")

    p = add("evaluate", "volume-pooled F1 of a checkpoint on a target split")
    p.add_argument("--checkpoint", required=True, help="model.pt to evaluate")
    p.add_argument("--data", required=True, help="dataset root or target dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="which split")
    p.add_argument("--method", default="", help="method tag stored in the report")

    p = add("sweep", "alpha/gamma stability grid on the in-memory benchmark")
    p.add_argument("--alphas", default=None, help="comma separated (default alpha/3, alpha, 3 alpha)")
    p.add_argument("--gammas", default=None, help="comma separated (default gamma/3, gamma, 3 gamma)")
    p.add_argument("--seeds", default="0", help="comma separated seeds averaged per cell")
    p.add_argument("--method", choices=["ours", "mdd"], default="ours", help="method swept")

    p = add("compare", "method comparison table on the in-memory benchmark")
    p.add_argument("--methods", default=",".join(METHODS), help="comma separated method tags")
    p.add_argument("--seeds", default="0,1,2", help="comma separated seeds")
    p.add_argument("--fewshot-k", default="", help="comma separated k for the few-shot rows (empty = skip)")
    p.add_argument("--draws", type=int, default=5, help="volume draws per few-shot k")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.perf_counter()
    try:
        config_path = args.spec if args.command == "generate-data" and args.config is None else args.config
        cfg = load_run_config(config_path, args.overrides)
        deterministic = deterministic_mode(True if args.deterministic else None)
        result = COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"tomdd {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingError as exc:
        print(f"tomdd {args.command}: training failed at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported with exit code 2
        step = getattr(exc, "step", getattr(exc, "cell", "n/a"))
        print(f"tomdd {args.command}: runtime failure (step {step}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_provenance(Path(args.out), args.command, argv, cfg, cfg.adapt.seed, t0, deterministic, result=result)
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
