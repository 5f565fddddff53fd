"""Desk-scale synthetic benchmark: method comparison, stability grid and few-shot curve."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .adapt import (METHODS, AdaptConfig, TrainHistory, adapt, draw_volumes, finetune_fewshot, pretrain_source,
                    train_supervised)
from .data import LabeledSet, generate_in_memory, split
from .metrics import MetricReport, evaluate
from .model import DESK_SCALE, ModelBundle, UNetConfig, build_unet
from .phantom import PhantomSpec, ShiftParams, split_volumes

log = logging.getLogger(__name__)

# Reference numbers from the published 2D CT -> CBCT table. Shown next to the
# synthetic results for orientation only; they come from clinical data.
REFERENCE_F1 = {
    "source_only": 54.1,
    "dann": 68.3,
    "mdd": 70.0,
    "ours": 74.4,
    "target_only_5": 68.1,
    "ours_fewshot_1": 74.5,
    "ours_fewshot_5": 77.2,
    "ours_fewshot_20": 82.4,
}

ROW_GROUPS = {
    "source_only": "Fully supervised",
    "target_only": "Fully supervised",
    "dann": "Feature alignment",
    "mdd": "Feature alignment",
    "ours": "Feature alignment",
    "ours_fewshot": "Few-shot",
}

LABELS = {"source_only": "Source only", "dann": "DANN", "mdd": "MDD", "ours": "Target-Only MDD"}


class SweepError(RuntimeError):
    def __init__(self, message: str, cell: tuple[int, int]):
        super().__init__(f"grid cell {cell}: {message}")
        self.cell = cell


@dataclass(frozen=True)
class BenchmarkConfig:
    source: PhantomSpec
    target: PhantomSpec
    unet: UNetConfig = DESK_SCALE
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(), "target": self.target.to_dict(),
                "unet": asdict(self.unet), "adapt": self.adapt.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        return cls(PhantomSpec.from_dict(d["source"]), PhantomSpec.from_dict(d["target"]),
                   UNetConfig(**d["unet"]), AdaptConfig.from_dict(d["adapt"]))

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


DESK_SHIFT = ShiftParams()


def desk_benchmark(**adapt_overrides) -> BenchmarkConfig:
    """The default desk-scale benchmark: 64x64 phantoms, 5-stage U-Net with 16 base channels.

    Source: 24 volumes (12 train / 4 val / 8 test); target: 42 volumes
    (21 train / 7 val / 14 test), six slices each.
    """
    return BenchmarkConfig(
        source=PhantomSpec(volumes=24, slices_per_volume=6, seed=100, shift=DESK_SHIFT),
        target=PhantomSpec(volumes=42, slices_per_volume=6, seed=200, shift=DESK_SHIFT),
        unet=DESK_SCALE,
        adapt=replace(AdaptConfig(), **adapt_overrides),
    )


@dataclass
class RunResult:
    method: str
    seed: int
    report: MetricReport
    history: Optional[TrainHistory] = None
    model: Optional[ModelBundle] = None

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed, "report": self.report.to_dict()}


class Benchmark:
    """Generates both domains once and caches one source-pretrained model per seed."""

    def __init__(self, cfg: BenchmarkConfig):
        self.cfg = cfg
        src = generate_in_memory(cfg.source, "source")
        tgt = generate_in_memory(cfg.target, "target")
        self.source = split(src, split_volumes(src.volumes, cfg.source.seed))
        self.target = split(tgt, split_volumes(tgt.volumes, cfg.target.seed))
        self._pretrained: dict[int, ModelBundle] = {}

    def adapt_cfg(self, seed: int, **overrides) -> AdaptConfig:
        return replace(self.cfg.adapt, seed=seed, **overrides)

    def pretrained(self, seed: int) -> ModelBundle:
        if seed not in self._pretrained:
            model = build_unet(self.cfg.unet, seed)
            model, hist = pretrain_source(model, self.source["train"], self.adapt_cfg(seed), self.source["val"])
            log.info("pretrained seed %d in %.0fs (selected step %s)", seed, hist.wall_clock, hist.selected_step)
            self._pretrained[seed] = model
        return copy.deepcopy(self._pretrained[seed])

    def evaluate(self, model: ModelBundle, method: str, cfg: AdaptConfig) -> MetricReport:
        return evaluate(model, self.target["test"], method=method, config_hash=config_hash(cfg.to_dict()))

    def run_method(self, method: str, seed: int, keep_model: bool = False, **overrides) -> RunResult:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        cfg = self.adapt_cfg(seed, method=method, **overrides)
        model, hist = adapt(self.pretrained(seed), self.source["train"], self.target["train"].strip_labels(), cfg,
                            self.source["val"])
        report = self.evaluate(model, method, cfg)
        log.info("%s seed %d: target F1 %.4f (std %.4f)", method, seed, report.mean_f1, report.std_f1)
        return RunResult(method, seed, report, hist, model if keep_model else None)

    def target_volumes(self) -> list[int]:
        return self.target["train"].volumes

    def fewshot(self, model: ModelBundle, k: int, seed: int, draws: int = 5) -> list[MetricReport]:
        """Fine-tune ``model`` on k labeled target-train volumes, once per draw."""
        cfg = self.adapt_cfg(seed)
        out = []
        for d in range(draws):
            vols = draw_volumes(self.target_volumes(), k, seed, d)
            tuned, _ = finetune_fewshot(model, self.target["train"].select_volumes(vols), cfg)
            out.append(self.evaluate(tuned, f"ours_fewshot_{k}", cfg))
        return out

    def target_only(self, k: int, seed: int, draws: int = 5) -> list[MetricReport]:
        """Supervised training from scratch on k labeled target volumes (pretraining budget)."""
        cfg = self.adapt_cfg(seed)
        out = []
        for d in range(draws):
            vols = draw_volumes(self.target_volumes(), k, seed, d)
            model = build_unet(self.cfg.unet, seed)
            model, _ = train_supervised(model, self.target["train"].select_volumes(vols), cfg, cfg.pretrain_steps,
                                        "target_only", stream_key=51)
            out.append(self.evaluate(model, f"target_only_{k}", cfg))
        return out


# --------------------------------------------------------------------------- comparison table


@dataclass
class ComparisonTable:
    """Rows keyed by tag (``ours``, ``target_only_5``, ``ours_fewshot_5``...), each a list of reports."""

    rows: dict[str, list[MetricReport]] = field(default_factory=dict)

    def add(self, tag: str, report: MetricReport) -> None:
        self.rows.setdefault(tag, []).append(report)

    def mean(self, tag: str) -> float:
        return float(np.mean([r.mean_f1 for r in self.rows[tag]]))

    def std(self, tag: str) -> float:
        return float(np.std([r.mean_f1 for r in self.rows[tag]]))

    def volume_std(self, tag: str) -> float:
        """Mean across runs of the per-volume F1 standard deviation."""
        return float(np.mean([r.std_f1 for r in self.rows[tag]]))

    def to_dict(self) -> dict:
        return {tag: [r.to_dict() for r in reports] for tag, reports in self.rows.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonTable":
        return cls({tag: [MetricReport.from_dict(r) for r in reports] for tag, reports in d.items()})

    def to_markdown(self) -> str:
        lines = ["| Group | Method | F1 (%) | run std | per-volume std | runs | reference F1 (%) |",
                 "|---|---|---|---|---|---|---|"]
        for tag in sorted(self.rows, key=_row_order):
            base = tag.rsplit("_", 1)[0] if tag[-1].isdigit() else tag
            label = LABELS.get(base, base)
            if tag != base:
                label = f"{LABELS.get(base, base)} ({tag.rsplit('_', 1)[1]} vol)"
            ref = REFERENCE_F1.get(tag)
            lines.append(f"| {ROW_GROUPS.get(base, '')} | {label} | {100 * self.mean(tag):.1f} | "
                         f"{100 * self.std(tag):.1f} | {100 * self.volume_std(tag):.1f} | {len(self.rows[tag])} | "
                         f"{'' if ref is None else f'{ref:.1f}'} |")
        return "\n".join(lines) + "\n"


def _row_order(tag: str):
    order = ["source_only", "target_only", "dann", "mdd", "ours", "ours_fewshot"]
    base, _, k = tag.rpartition("_") if tag[-1].isdigit() else (tag, "", "0")
    return order.index(base) if base in order else len(order), int(k)


def compare_methods(bench: Benchmark, methods, seeds) -> ComparisonTable:
    table = ComparisonTable()
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    for seed in seeds:
        for method in methods:
            table.add(method, bench.run_method(method, seed).report)
    return table


# --------------------------------------------------------------------------- stability grid


@dataclass
class StabilityGrid:
    alphas: list[float]
    gammas: list[float]
    f1: list[list[float]]

    def __post_init__(self):
        if len(self.f1) != len(self.alphas) or any(len(row) != len(self.gammas) for row in self.f1):
            raise ValueError("grid must have one row per alpha and one column per gamma")
        if any(v is None or not np.isfinite(v) for row in self.f1 for v in row):
            raise ValueError("grid has missing cells")

    @property
    def spread(self) -> float:
        vals = np.asarray(self.f1, dtype=np.float64)
        return float(vals.max() - vals.min())

    def to_dict(self) -> dict:
        return {"alphas": list(self.alphas), "gammas": list(self.gammas), "f1": [list(r) for r in self.f1],
                "spread": self.spread}

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityGrid":
        return cls(list(d["alphas"]), list(d["gammas"]), [list(r) for r in d["f1"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "gamma", "f1"])
        for i, a in enumerate(self.alphas):
            for j, g in enumerate(self.gammas):
                w.writerow([repr(a), repr(g), repr(self.f1[i][j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "StabilityGrid":
        rows = list(csv.DictReader(io.StringIO(text)))
        alphas = list(dict.fromkeys(float(r["alpha"]) for r in rows))
        gammas = list(dict.fromkeys(float(r["gamma"]) for r in rows))
        cell = {(float(r["alpha"]), float(r["gamma"])): float(r["f1"]) for r in rows}
        return cls(alphas, gammas, [[cell[(a, g)] for g in gammas] for a in alphas])

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.csv").write_text(self.to_csv())
        (out / "grid.json").write_text(json.dumps(self.to_dict(), indent=2))
        self.plot(out / "grid.png")

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        vals = 100 * np.asarray(self.f1)
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(vals, cmap="viridis", origin="lower")
        ax.set_xticks(range(len(self.gammas)), [f"{g:.3g}" for g in self.gammas])
        ax.set_yticks(range(len(self.alphas)), [f"{a:.3g}" for a in self.alphas])
        ax.set_xlabel("gamma")
        ax.set_ylabel("alpha")
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                ax.text(j, i, f"{vals[i, j]:.1f}", ha="center", va="center", color="w", fontsize=8)
        fig.colorbar(im, ax=ax, label="target F1 (%)")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def default_grid(alpha: float = 7.5e-2, gamma: float = 3e-1) -> tuple[list[float], list[float]]:
    return [alpha / 3, alpha, 3 * alpha], [gamma / 3, gamma, 3 * gamma]


def stability_sweep(bench: Benchmark, alphas, gammas, seeds, method: str = "ours",
                    known: Optional[dict[tuple[float, float], float]] = None) -> StabilityGrid:
    """Adapt once per (alpha, gamma) cell and seed; each cell holds the seed-mean target F1.

    ``known`` may hold already computed cells keyed by (alpha, gamma), e.g. the default run.
    """
    known = known or {}
    grid = []
    for i, a in enumerate(alphas):
        row = []
        for j, g in enumerate(gammas):
            if (a, g) in known:
                row.append(known[(a, g)])
                continue
            try:
                vals = [bench.run_method(method, s, alpha=a, gamma=g).report.mean_f1 for s in seeds]
            except Exception as exc:  # noqa: BLE001 - re-raised with the cell position
                raise SweepError(str(exc), (i, j)) from exc
            row.append(float(np.mean(vals)))
        grid.append(row)
    return StabilityGrid(list(alphas), list(gammas), grid)


# --------------------------------------------------------------------------- few-shot curve


def fewshot_curve(bench: Benchmark, adapted: ModelBundle, ks, seed: int, draws: int = 5) -> ComparisonTable:
    table = ComparisonTable()
    for k in ks:
        for r in bench.fewshot(adapted, k, seed, draws):
            table.add(f"ours_fewshot_{k}", r)
    return table


def plot_fewshot(table: ComparisonTable, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tags = sorted((t for t in table.rows if t.startswith("ours_fewshot_")), key=lambda t: int(t.rsplit("_", 1)[1]))
    ks = [int(t.rsplit("_", 1)[1]) for t in tags]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.errorbar(ks, [100 * table.mean(t) for t in tags], yerr=[100 * table.std(t) for t in tags], marker="o",
                label="adapted + k volumes")
    tonly = sorted((t for t in table.rows if t.startswith("target_only_")), key=lambda t: int(t.rsplit("_", 1)[1]))
    if tonly:
        ax.errorbar([int(t.rsplit("_", 1)[1]) for t in tonly], [100 * table.mean(t) for t in tonly],
                    yerr=[100 * table.std(t) for t in tonly], marker="s", ls="--", label="target only")
    ax.set_xscale("log")
    ax.set_xlabel("labeled target volumes k")
    ax.set_ylabel("target F1 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
