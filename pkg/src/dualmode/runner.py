"""End-to-end experiment pipeline and ablation tables.

One run is one directory::

    <out>/<run_name>_<variant>_seed<seed>/
        config.yaml               resolved config, every default inlined
        data/manifest.json        split sizes, sample streams and file digests
        data/{train,pool,eval}.jsonl
        checkpoints/warmup.ckpt   frozen reference for the KL term
        checkpoints/final.ckpt
        warmup_demos.jsonl, warmup_loss.csv
        metrics.csv               one row per RL step
        eval_report.json
        baselines/{general,personalized}.{ckpt,json}
        sweep.csv, deviation.csv, consistency.csv, regression.csv
        figures/*.png

Stages reuse artifacts already present in the directory, so ``train``
after ``warmup`` continues from the stored reference checkpoint. Files are
written once and never appended to by a later stage.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import dualgrpo, evaluation, plotting, synthenv, warmup
from .config import ExperimentConfig, load_config, save_config
from .core import ConfigError, ContractError, ModePrefix, load_dataset, save_dataset
from .policy import PolicyDims, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("generate", "warmup", "train", "eval", "sweep")

# sample streams and id ranges of the dataset splits
TRAIN_STREAM, POOL_STREAM, EVAL_STREAM, SWEEP_STREAM = 1, 2, 3, 4
ID_STRIDE = 10_000_000

TABLE_COLUMNS = {
    "Objective/Unaligned": "Unalign.",
    "Objective/Aligned": "Align.",
    "PersonalizedQA/Aligned": "Personalized",
}


class ComparisonError(ContractError):
    pass


def run_dir_name(config: ExperimentConfig) -> str:
    return f"{config.run_name}_{config.rl.variant.value}_seed{config.seed}"


def policy_dims(config: ExperimentConfig) -> PolicyDims:
    env = config.env
    return PolicyDims(env.d_q, env.d_p, config.policy.hidden, env.vocab_answers + 2,
                      horizon=max(config.policy.horizon, config.rl.answer_length))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Run:
    """Lazily materialised artifacts of one run directory."""

    config: ExperimentConfig
    root: Path

    def __post_init__(self):
        self.config = self.config.resolved()
        self._data = {}

    # -- paths -------------------------------------------------------------
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def prepare(self) -> None:
        try:
            for sub in ("data", "checkpoints", "baselines", "figures"):
                self.path(sub).mkdir(parents=True, exist_ok=True)
            save_config(self.config, self.path("config.yaml"))
        except OSError as exc:
            raise ConfigError(f"cannot write run directory {self.root}: {exc}") from None

    # -- datasets ----------------------------------------------------------
    def _split_spec(self):
        c = self.config
        return {
            "train": (c.warmup.train_count, TRAIN_STREAM),
            "pool": (c.rl.pool_size, POOL_STREAM),
            "eval": (c.eval.count, EVAL_STREAM),
        }

    def generate(self) -> dict:
        manifest_path = self.path("data", "manifest.json")
        if manifest_path.exists():
            return json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest = {"env_seed": self.config.env.seed, "splits": {}}
        for i, (name, (count, stream)) in enumerate(self._split_spec().items()):
            data = synthenv.generate_dataset(self.config.env, count, seed=stream,
                                             id_offset=i * ID_STRIDE)
            path = self.path("data", f"{name}.jsonl")
            save_dataset(path, data)
            self._data[name] = data
            slices = {}
            for inst in data:
                slices[inst.slice] = slices.get(inst.slice, 0) + 1
            manifest["splits"][name] = {
                "count": count, "sample_stream": stream, "id_offset": i * ID_STRIDE,
                "slices": dict(sorted(slices.items())), "sha256": _sha256(path),
            }
        _write_json(manifest_path, manifest)
        return manifest

    def dataset(self, name: str) -> list:
        if name not in self._data:
            self.generate()
            if name not in self._data:
                self._data[name] = load_dataset(self.path("data", f"{name}.jsonl"))
        return self._data[name]

    # -- stage 1 -----------------------------------------------------------
    def reference(self):
        ckpt = self.path("checkpoints", "warmup.ckpt")
        if ckpt.exists():
            return load_checkpoint(ckpt)
        w = self.config.warmup
        train = self.dataset("train")
        params = init_params(w.seed, policy_dims(self.config))
        ref, demos, losses = warmup.run_warmup(
            train, params, probe_epochs=w.probe_epochs, probe_lr=w.probe_lr, k=w.k,
            epochs=w.epochs, lr=w.lr, seed=w.seed,
        )
        warmup.save_demonstrations(self.path("warmup_demos.jsonl"), demos)
        warmup.write_loss_csv(self.path("warmup_loss.csv"), losses)
        save_checkpoint(ckpt, ref)
        return ref

    # -- stage 2 -----------------------------------------------------------
    def final(self):
        ckpt = self.path("checkpoints", "final.ckpt")
        if ckpt.exists():
            return load_checkpoint(ckpt)
        ref = self.reference()
        params, _ = dualgrpo.train(
            ref, ref, self.dataset("pool"), self.config.rl,
            metrics_path=self.path("metrics.csv"), checkpoint_dir=self.path("checkpoints"),
        )
        save_checkpoint(ckpt, params)
        return params

    # -- evaluation --------------------------------------------------------
    def evaluate(self) -> evaluation.EvalReport:
        out = self.path("eval_report.json")
        if out.exists():
            return evaluation.EvalReport.load(out)
        e = self.config.eval
        params = self.final()
        data = self.dataset("eval")
        report = evaluation.evaluate(params, data, e.samples_per_instance, e.temperature, e.seed)
        report.save(out)
        table = evaluation.deviation_ratio(params, data, e.temperature, e.seed)
        evaluation.write_deviation_csv(self.path("deviation.csv"), table)
        rows = [[order.value, repr(evaluation.two_turn_consistency(params, data, order, e.temperature, e.seed))]
                for order in evaluation.TurnOrder]
        with self.path("consistency.csv").open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["order", "mode_alignment_rate"])
            writer.writerows(rows)
        try:
            reg = evaluation.mode_regression(params, data, e.top_k, temperature=e.temperature, seed=e.seed)
            evaluation.write_regression_csv(self.path("regression.csv"), reg)
        except evaluation.DegenerateFitError as exc:
            log.warning("mode regression skipped: %s", exc)
        return report

    def baseline(self, mode: ModePrefix):
        """Always-``mode`` policy fitted to convergence on that mode's expert answers."""
        ckpt = self.path("baselines", f"{mode.value.lower()}.ckpt")
        if ckpt.exists():
            return load_checkpoint(ckpt)
        e = self.config.eval
        params = init_params(self.config.warmup.seed, policy_dims(self.config))
        fitted, _ = warmup.fit_fixed_mode(params, self.dataset("train"), mode, e.baseline_epochs,
                                          e.baseline_lr)
        save_checkpoint(ckpt, fitted)
        report = evaluation.evaluate(fitted, self.dataset("eval"), e.samples_per_instance,
                                     e.temperature, e.seed, forced_mode=mode)
        report.save(self.path("baselines", f"{mode.value.lower()}.json"))
        return fitted

    def sweep(self) -> dict:
        out = self.path("sweep.csv")
        e = self.config.eval
        seed = SWEEP_STREAM * ID_STRIDE + e.seed
        curves = {
            "trained": evaluation.mixed_ratio_sweep(self.final(), self.config.env, e.ratios,
                                                    e.sweep_count, e.samples_per_instance,
                                                    e.temperature, seed),
        }
        for mode in (ModePrefix.GENERAL, ModePrefix.PERSONALIZED):
            curves[f"always_{mode.value.lower()}"] = evaluation.mixed_ratio_sweep(
                self.baseline(mode), self.config.env, e.ratios, e.sweep_count,
                e.samples_per_instance, e.temperature, seed, forced_mode=mode)
        if not out.exists():
            evaluation.write_sweep_csv(out, curves)
        return curves

    def figures(self) -> list:
        written = []
        fig_dir = self.path("figures")
        if self.path("warmup_loss.csv").exists():
            written.append(plotting.plot_loss_curve(self.path("warmup_loss.csv"), fig_dir / "warmup_loss.png"))
        if self.path("metrics.csv").exists():
            written.append(plotting.plot_training_curves(self.path("metrics.csv"), fig_dir / "training_curves.png"))
        if self.path("eval_report.json").exists():
            written.append(plotting.plot_mode_proportions(
                {run_dir_name(self.config): evaluation.EvalReport.load(self.path("eval_report.json"))},
                fig_dir / "mode_proportions.png"))
        if self.path("sweep.csv").exists():
            written.append(plotting.plot_sweep(self.path("sweep.csv"), fig_dir / "mixed_ratio.png"))
        return written


def open_run(config: ExperimentConfig, out_dir) -> Run:
    config = config.resolved()
    run = Run(config, Path(out_dir) / run_dir_name(config))
    run.prepare()
    return run


def run_experiment(config: ExperimentConfig, out_dir="runs", stages=STAGES, figures: bool = True) -> Path:
    """Execute the requested pipeline stages and return the run directory."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s): {', '.join(unknown)}")
    run = open_run(config, out_dir)
    log.info("run directory %s", run.root)
    if "generate" in stages:
        run.generate()
    if "warmup" in stages:
        run.reference()
    if "train" in stages:
        run.final()
    if "eval" in stages:
        run.evaluate()
    if "sweep" in stages:
        run.sweep()
    if figures:
        run.figures()
    return run.root


# ---------------------------------------------------------------------------
# ablation tables

def _load_run_summary(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    report_path = run_dir / "eval_report.json"
    if not run_dir.is_dir():
        raise ComparisonError(f"run directory not found: {run_dir}")
    if not report_path.is_file():
        raise ComparisonError(f"no eval_report.json in {run_dir}")
    config_path = run_dir / "config.yaml"
    variant, seed = "", ""
    if config_path.is_file():
        cfg = load_config(config_path)
        variant, seed = cfg.rl.variant.value, cfg.seed
    return {"run": run_dir.name, "variant": variant, "seed": seed,
            "report": evaluation.EvalReport.load(report_path)}


def compare_runs(run_dirs, out_path=None) -> list:
    """One row per run: accuracy by slice, overall accuracy and oracle agreement."""
    run_dirs = list(run_dirs)
    if len(run_dirs) < 2:
        raise ComparisonError("compare_runs needs at least two run directories")
    summaries = [_load_run_summary(Path(d)) for d in run_dirs]
    slices = set(summaries[0]["report"].accuracy_by_slice)
    for s in summaries[1:]:
        if set(s["report"].accuracy_by_slice) != slices:
            raise ComparisonError(
                f"incompatible eval slices: {summaries[0]['run']} has {sorted(slices)}, "
                f"{s['run']} has {sorted(s['report'].accuracy_by_slice)}")
    named = [name for name in TABLE_COLUMNS if name in slices]
    extra = sorted(slices - set(TABLE_COLUMNS))
    header = (["run", "variant", "seed"] + [TABLE_COLUMNS[n] for n in named] + extra
              + ["overall", "oracle_agreement"])
    rows = []
    for s in summaries:
        rep = s["report"]
        rows.append([s["run"], s["variant"], s["seed"]]
                    + [repr(rep.accuracy_by_slice[n]) for n in named + extra]
                    + [repr(rep.accuracy), repr(rep.oracle_agreement)])
    if out_path is not None:
        with Path(out_path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    return [dict(zip(header, row)) for row in rows]
