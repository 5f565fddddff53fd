import json
from dataclasses import replace

import numpy as np
import pytest

from tomdd.adapt import AdaptConfig
from tomdd.benchmark import (REFERENCE_F1, Benchmark, BenchmarkConfig, ComparisonTable, StabilityGrid, SweepError,
                             compare_methods, default_grid, desk_benchmark, stability_sweep)
from tomdd.metrics import MetricReport
from tomdd.model import UNetConfig
from tomdd.phantom import PhantomSpec


@pytest.fixture(scope="module")
def bench():
    cfg = BenchmarkConfig(
        source=PhantomSpec(image_size=32, volumes=6, slices_per_volume=2, seed=1, stages=3),
        target=PhantomSpec(image_size=32, volumes=6, slices_per_volume=2, seed=2, stages=3),
        unet=UNetConfig(stages=3, base_channels=4),
        adapt=AdaptConfig(batch_size=2, pretrain_steps=2, adapt_steps=2, finetune_steps=2, eval_every=1,
                          augment=False),
    )
    return Benchmark(cfg)


def test_desk_preset_shape():
    cfg = desk_benchmark()
    assert cfg.source.image_size == cfg.target.image_size == 64
    assert cfg.unet.base_channels == 16 and cfg.unet.stages == 5
    assert (cfg.adapt.alpha, cfg.adapt.gamma) == (7.5e-2, 3e-1)
    assert BenchmarkConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert desk_benchmark(gamma=0.5).config_hash() != cfg.config_hash()


def test_splits_are_disjoint_and_unlabeled_target_is_used(bench):
    for parts in (bench.source, bench.target):
        vols = [set(p.volumes) for p in parts.values()]
        assert sum(len(v) for v in vols) == len(set().union(*vols))


def test_pretrained_cache_returns_independent_copies(bench):
    a, b = bench.pretrained(0), bench.pretrained(0)
    assert a is not b
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k].numpy(), sb[k].numpy()) for k in sa)


def test_one_cell_grid_equals_standalone_run(bench):
    alpha, gamma = bench.cfg.adapt.alpha, bench.cfg.adapt.gamma
    grid = stability_sweep(bench, [alpha], [gamma], [0])
    assert grid.f1 == [[bench.run_method("ours", 0).report.mean_f1]]
    assert grid.spread == 0.0


def test_grid_serialisation_round_trips(tmp_path):
    a, g = default_grid()
    grid = StabilityGrid(a, g, [[0.1 * i + 0.01 * j + 1e-17 for j in range(3)] for i in range(3)])
    assert StabilityGrid.from_dict(json.loads(json.dumps(grid.to_dict()))) == grid
    assert StabilityGrid.from_csv(grid.to_csv()) == grid
    grid.save(tmp_path)
    assert (tmp_path / "grid.png").stat().st_size > 0
    assert grid.spread == pytest.approx(0.22)


def test_grid_rejects_missing_cells():
    with pytest.raises(ValueError):
        StabilityGrid([1, 2], [1], [[0.5]])
    with pytest.raises(ValueError):
        StabilityGrid([1], [1], [[float("nan")]])


def test_default_grid_values():
    a, g = default_grid()
    assert a == pytest.approx([0.025, 0.075, 0.225]) and g == pytest.approx([0.1, 0.3, 0.9])


def test_sweep_failure_reports_cell(bench):
    with pytest.raises(SweepError) as info:
        stability_sweep(bench, [0.075], [0.3, -1.0], [0])
    assert info.value.cell == (0, 1)


def test_compare_table_statistics_recompute(bench):
    table = compare_methods(bench, ["source_only", "ours"], [0, 1])
    for tag in ("source_only", "ours"):
        vals = [r.mean_f1 for r in table.rows[tag]]
        assert table.mean(tag) == pytest.approx(np.mean(vals), abs=1e-12)
        assert table.std(tag) == pytest.approx(np.std(vals), abs=1e-12)
    md = table.to_markdown()
    assert f"{REFERENCE_F1['ours']:.1f}" in md and "Feature alignment" in md
    assert ComparisonTable.from_dict(json.loads(json.dumps(table.to_dict()))).to_dict() == table.to_dict()
    with pytest.raises(ValueError):
        compare_methods(bench, ["bdcl"], [0])


def test_fewshot_and_target_only_rows(bench):
    model = bench.run_method("ours", 0, keep_model=True).model
    assert model.f_prime is not None
    reps = bench.fewshot(model, 1, 0, draws=2)
    assert len(reps) == 2 and all(isinstance(r, MetricReport) for r in reps)
    assert model.f_prime is not None
    assert len(bench.target_only(1, 0, draws=2)) == 2
    with pytest.raises(ValueError):
        bench.fewshot(model, 99, 0, draws=1)
