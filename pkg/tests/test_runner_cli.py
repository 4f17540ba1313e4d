import csv
import json
import shutil

import pytest
import yaml

from dualmode import cli, runner
from dualmode.config import config_from_dict, load_config
from dualmode.core import ConfigError
from dualmode.runner import ComparisonError, compare_runs, run_experiment

TINY = {
    "run_name": "tiny",
    "policy": {"hidden": 8},
    "warmup": {"train_count": 60, "probe_epochs": 2, "k": 2, "epochs": 5},
    "rl": {"steps": 4, "batch_size": 4, "pool_size": 50, "checkpoint_every": 2},
    "eval": {"count": 80, "sweep_count": 40, "baseline_epochs": 5, "ratios": [0.0, 0.5, 1.0]},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    return run_experiment(config_from_dict(TINY).with_overrides(seed=1), out)


def test_run_directory_layout(tiny_run):
    assert tiny_run.name == "tiny_DualGRPO_seed1"
    for rel in ("config.yaml", "data/train.jsonl", "data/pool.jsonl", "data/eval.jsonl",
                "data/manifest.json", "checkpoints/warmup.ckpt", "checkpoints/final.ckpt",
                "checkpoints/rl_step000002.ckpt", "metrics.csv", "eval_report.json",
                "deviation.csv", "consistency.csv", "sweep.csv", "warmup_loss.csv",
                "baselines/general.ckpt", "baselines/personalized.json",
                "figures/training_curves.png", "figures/mixed_ratio.png",
                "figures/warmup_loss.png", "figures/mode_proportions.png"):
        assert (tiny_run / rel).is_file(), rel


def test_resolved_config_is_self_describing(tiny_run):
    cfg = load_config(tiny_run / "config.yaml")
    assert cfg.rl.seed == 1 and cfg.env.seed == 1 and cfg.rl.n_per_mode == 4
    manifest = json.loads((tiny_run / "data" / "manifest.json").read_text())
    assert manifest["splits"]["eval"]["count"] == 80
    assert sum(manifest["splits"]["train"]["slices"].values()) == 60


def test_csv_outputs_are_lf_with_headers(tiny_run):
    for name, header in (("metrics.csv", "step,mean_reward_gm"), ("sweep.csv", "ratio,trained,always_general"),
                         ("consistency.csv", "order,mode_alignment_rate")):
        raw = (tiny_run / name).read_bytes()
        assert b"\r" not in raw
        assert raw.decode("utf-8").startswith(header)
    with (tiny_run / "metrics.csv").open(newline="") as fh:
        assert len(list(csv.reader(fh))) == 5


def test_same_seed_is_byte_identical(tmp_path, tiny_run):
    again = run_experiment(config_from_dict(TINY).with_overrides(seed=1), tmp_path, figures=False)
    for rel in ("metrics.csv", "eval_report.json", "sweep.csv", "checkpoints/final.ckpt", "data/manifest.json"):
        assert (again / rel).read_bytes() == (tiny_run / rel).read_bytes(), rel


def test_stages_reuse_existing_artifacts(tmp_path):
    cfg = config_from_dict(TINY)
    root = run_experiment(cfg, tmp_path, stages=("generate", "warmup"), figures=False)
    assert (root / "checkpoints" / "warmup.ckpt").is_file()
    assert not (root / "metrics.csv").exists()
    before = (root / "checkpoints" / "warmup.ckpt").read_bytes()
    run_experiment(cfg, tmp_path, stages=("generate", "warmup", "train"), figures=False)
    assert (root / "checkpoints" / "warmup.ckpt").read_bytes() == before
    assert (root / "metrics.csv").is_file()
    with pytest.raises(ConfigError):
        run_experiment(cfg, tmp_path, stages=("bake",))


def test_compare_runs(tmp_path, tiny_run):
    cfg = config_from_dict(TINY).with_overrides(seed=1, variant="NoDualAdv")
    other = run_experiment(cfg, tmp_path, stages=("generate", "warmup", "train", "eval"), figures=False)
    out = tmp_path / "cmp.csv"
    rows = compare_runs([tiny_run, other], out)
    assert [r["variant"] for r in rows] == ["DualGRPO", "NoDualAdv"]
    header = out.read_text().splitlines()[0].split(",")
    assert header[:3] == ["run", "variant", "seed"]
    assert header[-2:] == ["overall", "oracle_agreement"]
    assert "Personalized" in header and "Unalign." in header and "Align." in header
    with pytest.raises(ComparisonError, match="at least two"):
        compare_runs([tiny_run])
    with pytest.raises(ComparisonError, match="not found"):
        compare_runs([tiny_run, tmp_path / "nope"])


def test_compare_rejects_incompatible_slices(tmp_path, tiny_run):
    other = tmp_path / "other"
    shutil.copytree(tiny_run, other)
    report = json.loads((other / "eval_report.json").read_text())
    for key, value in report.items():
        if isinstance(value, dict):
            value.pop("PersonalizedQA/Aligned", None)
    (other / "eval_report.json").write_text(json.dumps(report))
    with pytest.raises(ComparisonError, match="incompatible"):
        compare_runs([tiny_run, other])


def test_cli_end_to_end(tmp_path, capsys):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(path), "--seed", "2", "--out", str(out),
                     "--variant", "StandardGRPO", "--no-figures"]) == 0
    run_dir = out / "tiny_StandardGRPO_seed2"
    assert capsys.readouterr().out.strip() == str(run_dir)
    assert load_config(run_dir / "config.yaml").rl.variant.value == "StandardGRPO"
    assert (run_dir / "metrics.csv").is_file() and not (run_dir / "eval_report.json").exists()
    assert cli.main(["eval", "--config", str(path), "--seed", "2", "--out", str(out),
                     "--variant", "StandardGRPO", "--no-figures"]) == 0
    assert cli.main(["eval", "--config", str(path), "--seed", "2", "--out", str(out), "--no-figures"]) == 0
    capsys.readouterr()
    table = tmp_path / "table.csv"
    assert cli.main(["compare", str(run_dir), str(out / "tiny_DualGRPO_seed2"), "--out", str(table)]) == 0
    assert table.is_file() and table.with_suffix(".png").is_file()


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["generate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "not found" in capsys.readouterr().err
    assert cli.main(["train", "--variant", "Bogus", "--out", str(tmp_path)]) == 2
    assert "rl.variant" in capsys.readouterr().err
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["launch"])


def test_verb_stages_cover_pipeline():
    assert cli.VERB_STAGES["all"] == runner.STAGES
    assert cli.VERB_STAGES["generate"] == ("generate",)
