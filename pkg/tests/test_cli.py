import json
import subprocess
import sys

import pytest

from tomdd import cli
from tomdd.benchmark import desk_benchmark

TINY = [
    "--set", "source.volumes=6", "--set", "target.volumes=6",
    "--set", "source.slices_per_volume=2", "--set", "target.slices_per_volume=2",
    "--set", "adapt.pretrain_steps=3", "--set", "adapt.adapt_steps=2", "--set", "adapt.finetune_steps=2",
    "--set", "adapt.batch_size=2", "--set", "adapt.eval_every=1", "--set", "unet.base_channels=4",
]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_help_lists_every_command_and_flag():
    out = subprocess.run([sys.executable, "-m", "tomdd.cli", "--help"], capture_output=True, text=True).stdout
    for name in cli.COMMANDS:
        assert name in out
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)


def test_unknown_key_exits_1_and_names_it(tmp_path, capsys):
    assert run("generate-data", "--out", tmp_path, "--set", "adapt.betaa=2") == 1
    assert "adapt.betaa" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"target": {"shift": {"fov": 0.5}}}))
    assert run("generate-data", "--out", tmp_path, "--config", cfg) == 1
    assert "target.shift.fov" in capsys.readouterr().err


def test_invalid_value_exits_1(tmp_path, capsys):
    assert run("generate-data", "--out", tmp_path, "--set", "target.shift.fov_radius_fraction=0") == 1
    assert "fov_radius_fraction" in capsys.readouterr().err


def test_overrides_are_last_write_wins():
    base = desk_benchmark().to_dict()
    d = cli.apply_overrides(base, ["adapt.gamma=0.9", "adapt.gamma=0.5", "target.shift.vessel_count=2"])
    assert d["adapt"]["gamma"] == 0.5 and d["target"]["shift"]["vessel_count"] == 2
    assert base["adapt"]["gamma"] == 0.3


def test_config_file_round_trip(tmp_path):
    cfg = desk_benchmark(gamma=0.7)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert cli.load_run_config(str(path), []) == cfg


def test_end_to_end_recipe(tmp_path):
    data, pre, ad, ev, ft = (tmp_path / n for n in ("data", "pre", "ad", "ev", "ft"))
    assert run("generate-data", "--out", data, *TINY) == 0
    assert (data / "source" / "manifest.json").exists() and (data / "target" / "manifest.json").exists()
    assert run("pretrain", "--data", data, "--out", pre, *TINY) == 0
    assert run("adapt", "--data", data, "--checkpoint", pre / "model.pt", "--method", "ours", "--out", ad, *TINY) == 0
    assert run("evaluate", "--data", data, "--checkpoint", ad / "model.pt", "--out", ev, *TINY) == 0
    report = json.loads((ev / "report.json").read_text())
    assert 0.0 <= report["mean_f1"] <= 1.0 and len(report["per_volume_f1"]) == 2
    assert report == json.loads((ad / "report.json").read_text()) | {"method": "", "config_hash": report["config_hash"]}
    assert run("finetune", "--data", data, "--checkpoint", ad / "model.pt", "--k", 1, "--draws", 2, "--out", ft,
               *TINY) == 0
    assert len(json.loads((ft / "summary.json").read_text())["draws"]) == 2
    for d in (data, pre, ad, ev, ft):
        rec = json.loads((d / "run.json").read_text())
        assert {"config_hash", "git_revision", "seed", "wall_clock_s", "config"} <= set(rec)
        assert rec["config"]["adapt"]["adapt_steps"] == 2
    lines = (ad / "history.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["method"] == "ours"


def test_provenance_reruns_identically(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("generate-data", "--out", a, *TINY) == 0
    cfg = tmp_path / "stored.json"
    cfg.write_text(json.dumps(json.loads((a / "run.json").read_text())["config"]))
    assert run("generate-data", "--out", b, "--config", cfg) == 0
    for dom in ("source", "target"):
        files = sorted((a / dom / "samples").iterdir())
        assert files and all(f.read_bytes() == (b / dom / "samples" / f.name).read_bytes() for f in files)


def test_finetune_k_too_large_is_validation_error(tmp_path):
    data = tmp_path / "data"
    assert run("generate-data", "--out", data, *TINY) == 0
    assert run("pretrain", "--data", data, "--out", tmp_path / "pre", *TINY) == 0
    assert run("finetune", "--data", data, "--checkpoint", tmp_path / "pre" / "model.pt", "--k", 50,
               "--out", tmp_path / "ft", *TINY) == 1


def test_runtime_failure_exits_2_with_step(tmp_path, capsys):
    data = tmp_path / "data"
    assert run("generate-data", "--out", data, *TINY) == 0
    rc = run("pretrain", "--data", data, "--out", tmp_path / "pre", *TINY, "--set", "adapt.lr_psi=1e30",
             "--set", "adapt.lr_f=1e30", "--set", "adapt.pretrain_steps=20")
    err = capsys.readouterr().err
    assert rc == 2 and "step" in err


@pytest.mark.parametrize("cmd", ["sweep", "compare"])
def test_benchmark_commands_tiny(tmp_path, cmd):
    extra = (["--alphas", "0.075", "--gammas", "0.1,0.3", "--seeds", "0"] if cmd == "sweep"
             else ["--methods", "source_only,ours", "--seeds", "0", "--fewshot-k", "1", "--draws", "1"])
    assert run(cmd, "--out", tmp_path, *TINY, *extra) == 0
    if cmd == "sweep":
        assert {"grid.csv", "grid.png", "grid.json", "run.json"} <= {p.name for p in tmp_path.iterdir()}
    else:
        table = (tmp_path / "table.md").read_text()
        assert "Target-Only MDD" in table and "Source only" in table and "Few-shot" in table
