import json

import pytest

from riskdiff.cli import main
from riskdiff.terrain import Hazard, TerrainRecipe, save_recipe

from helpers import run_pipeline


@pytest.fixture
def recipe_file(tmp_path):
    path = tmp_path / "recipe.json"
    save_recipe(TerrainRecipe(width=24, height=24, seed=3, hazards=(Hazard("step", 1.2, 1.2, 0.4, 0.3),)), path)
    return path


def error_lines(capsys):
    return [line for line in capsys.readouterr().err.splitlines() if line]


def test_riskmap_writes_grid_and_manifest(recipe_file, tmp_path, capsys):
    out = tmp_path / "rm" / "risk.grid"
    assert main(["riskmap", "--terrain", str(recipe_file), "--mc-samples", "4", "--out", str(out)]) == 0
    manifest = json.loads((out.parent / "risk.grid.manifest.json").read_text())
    assert manifest["command"] == "riskmap" and manifest["seed"] == 0
    assert manifest["config"]["mc_samples"] == 4 and "risk.grid" in manifest["outputs"]
    assert len(manifest["config_hash"]) == 64
    assert "unsafe fraction" in capsys.readouterr().out


def test_config_file_and_flag_override(recipe_file, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("schema_version = 1\n# comment\nmc-samples = 4\ngamma = 0.5\n")
    out = tmp_path / "risk.grid"
    assert main(["riskmap", "--config", str(cfg), "--terrain", str(recipe_file), "--gamma", "0.6",
                 "--out", str(out)]) == 0
    config = json.loads((tmp_path / "risk.grid.manifest.json").read_text())["config"]
    assert config["mc_samples"] == 4 and config["gamma"] == 0.6


@pytest.mark.parametrize("text, message", [
    ("schema_version = 1\nbogus = 3\n", "unknown config key"),
    ("mc_samples = 4\n", "missing schema_version"),
    ("schema_version = 1\ngamma = 0.5\ngamma = 0.6\n", "duplicate key"),
    ("schema_version = 2\n", "not supported"),
    ("schema_version = 1\nmc_samples = many\n", "mc_samples"),
])
def test_config_errors(recipe_file, tmp_path, capsys, text, message):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    rc = main(["riskmap", "--config", str(cfg), "--terrain", str(recipe_file), "--out", str(tmp_path / "x.grid")])
    lines = error_lines(capsys)
    assert rc == 1 and len(lines) == 1 and message in lines[0] and lines[0].startswith("riskdiff: error:")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["riskmap", "--no-such-flag"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_required_setting(capsys):
    assert main(["train", "--out", "x.npz"]) == 1
    assert "--data" in error_lines(capsys)[0]


@pytest.mark.parametrize("argv", [
    ["riskmap", "--terrain", "/nonexistent/t.grid", "--out", "OUT/r.grid"],
    ["train", "--data", "/nonexistent", "--out", "OUT/c.npz"],
    ["eval", "--ckpt", "/nonexistent/c.npz", "--out", "OUT/e"],
])
def test_missing_inputs_fail_with_one_line(argv, tmp_path, capsys):
    argv = [a.replace("OUT", str(tmp_path)) for a in argv]
    assert main(argv) == 1
    lines = error_lines(capsys)
    assert len(lines) == 1 and lines[0].startswith("riskdiff: error:")


def test_demo1d_smoke(tmp_path, capsys):
    out = tmp_path / "demo"
    assert main(["demo1d", "--samples", "200", "--steps", "10", "--eta-sweep", "0,10", "--out", str(out),
                 "--workers", "1"]) == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 1 + 4  # unguided, two classifier weights, projection
    assert (out / "histograms.csv").is_file() and (out / "histograms.svg").is_file()
    assert json.loads((out / "manifest.json").read_text())["command"] == "demo1d"
    assert "projection" in capsys.readouterr().out


def test_pipeline_and_sample(tmp_path, recipe_file):
    ev = run_pipeline(main, tmp_path)
    rows = (ev / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("method") and len(rows) == 5
    out = tmp_path / "samples"
    assert main(["sample", "--ckpt", str(tmp_path / "ckpt.npz"), "--terrain", str(recipe_file),
                 "--pose", "0.3,0.3,0.5", "--goal", "2,2", "--guidance", "projection", "--batch", "3",
                 "--mc-samples", "4", "--out", str(out)]) == 0
    lines = (out / "samples.csv").read_text().splitlines()[1:]
    assert len(lines) == 3 * 8 and all(line.endswith(",1") for line in lines)


def test_eval_rerun_is_byte_identical(tmp_path):
    a = run_pipeline(main, tmp_path / "a", seed=4)
    b = run_pipeline(main, tmp_path / "b", seed=4)
    for name in ("metrics.csv", "episodes.csv", "suite.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
