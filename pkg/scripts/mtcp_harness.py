"""
Training, evaluation, ablation and metric export for MT-CP runs.

Every run is deterministic in (config, seed): parameter init draws from
``default_rng(seed)``, the epoch shuffle from ``default_rng([seed, epoch])``
and the data from the scene generator's (seed, index) contract.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from mtcp_benchkit import SceneSample, SyntheticDataset, aggregate_score, mean_angular_error, miou, rmse
from mtcp_checkpoint import load_checkpoint, save_checkpoint
from mtcp_config import RunConfig, apply_overrides, from_dict, to_dict, validate
from mtcp_errors import ConfigurationError, NumericError
from mtcp_lps import LossPrioritizer, LossScheme, WeightRecord
from mtcp_model import MtcpModel, TaskSpec, task_loss, task_target
from mtcp_optim import OptimizerState, adamw_step
from mtcp_tensor import ComputationTape, Tensor, backward

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent
GRIDS_DIR = REPO_ROOT / "configs" / "ablations"

METRICS_CSV = "metrics.csv"
TRAJECTORY_CSV = "weights_trajectory.csv"
SUMMARY_JSON = "summary.json"
CHECKPOINT = "checkpoint.mtcp"
CONFIG_JSON = "config.json"
SUMMARY_FORMAT = "mtcp-run-summary/1"
REPORT_FORMAT = "mtcp-ablation-report/1"


@dataclass
class EvalResult:
    metrics: Dict[str, float]
    task_losses: Dict[str, float]
    coherence: Optional[float]

    @property
    def score(self) -> Optional[float]:
        return aggregate_score(self.metrics)


@dataclass
class EpochRow:
    epoch: int
    task_losses: Dict[str, float]
    weights: Dict[str, float]
    total: float
    metrics: Dict[str, float]
    coherence: Optional[float]
    score: Optional[float]


@dataclass
class RunRecord:
    config: RunConfig
    tasks: List[str]
    initial: Optional[EvalResult] = None
    rows: List[EpochRow] = field(default_factory=list)
    trajectory: List[WeightRecord] = field(default_factory=list)

    @property
    def final(self) -> EpochRow:
        return self.rows[-1]

    def summary(self) -> Dict[str, Any]:
        final = self.final
        best = max(self.rows, key=lambda r: -np.inf if r.score is None else r.score)
        initial = self.initial
        return {
            "format": SUMMARY_FORMAT,
            "seed": self.config.seed,
            "scheme": self.config.lps.scheme,
            "tasks": list(self.tasks),
            "epochs": len(self.rows),
            "cfm_enabled": self.config.cfm.enabled,
            "srm_enabled": self.config.srm.enabled,
            "initial": None
            if initial is None
            else {"metrics": initial.metrics, "score": initial.score, "coherence": initial.coherence},
            "final": {
                "metrics": final.metrics,
                "score": final.score,
                "coherence": final.coherence,
                "weights": final.weights,
                "total_loss": final.total,
            },
            "best": {"epoch": best.epoch, "score": best.score},
            "weight_variance": weight_variance(self.trajectory),
            "config": to_dict(self.config),
        }


def weight_variance(trajectory: Sequence[WeightRecord]) -> Optional[float]:
    """Mean over epochs of the cross-task population variance of the logged weights."""
    if not trajectory:
        return None
    return float(np.mean([np.var(record.weights) for record in trajectory]))


# ---------------------------------------------------------------------------
# Model plumbing
# ---------------------------------------------------------------------------


def build_model(config: RunConfig) -> MtcpModel:
    return MtcpModel(config, np.random.default_rng(config.seed))


def sample_loss(model: MtcpModel, prioritizer: LossPrioritizer, sample: SceneSample, lambda_cos: float):
    """Forward one sample; return (total loss Tensor, per-task final loss values)."""
    output = model(Tensor(sample.rgb))
    task_terms = []
    intermediate_terms = []
    for task in model.tasks:
        target = task_target(task, sample)
        task_terms.append(task_loss(task, output.predictions[task.name], target))
        intermediate_terms.append([task_loss(task, pred, target) for pred in output.intermediates[task.name]])
    coherence_terms = [output.coherence[task.name] for task in model.tasks if task.name in output.coherence]
    total = prioritizer.loss(task_terms, intermediate_terms, coherence_terms, lambda_cos)
    return total, [term.item() for term in task_terms]


def evaluate_model(model: MtcpModel, dataset: SyntheticDataset) -> EvalResult:
    """Validation metrics in eval mode; nothing is recorded for gradients."""
    model.eval()
    collected: Dict[str, List[np.ndarray]] = {task.name: [] for task in model.tasks}
    targets: Dict[str, List[np.ndarray]] = {task.name: [] for task in model.tasks}
    losses: Dict[str, List[float]] = {task.name: [] for task in model.tasks}
    coherence: List[float] = []
    for sample in dataset:
        output = model(Tensor(sample.rgb))
        for task in model.tasks:
            pred = output.predictions[task.name]
            target = task_target(task, sample)
            losses[task.name].append(task_loss(task, pred, target).item())
            collected[task.name].append(pred.data)
            targets[task.name].append(target)
        coherence.extend(term.item() for term in output.coherence.values())
    model.train()
    metrics = {}
    for task in model.tasks:
        metrics[task.metric] = task_metric(task, collected[task.name], targets[task.name])
    return EvalResult(
        metrics,
        {name: float(np.mean(values)) for name, values in losses.items()},
        float(np.mean(coherence)) if coherence else None,
    )


def task_metric(task: TaskSpec, predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    if task.metric == "miou":
        return miou(np.stack([p.argmax(axis=0) for p in predictions]), np.stack(targets), task.channels)
    if task.metric == "rmse":
        return rmse(np.stack([p[0] for p in predictions]), np.stack([t[0] for t in targets]))
    return mean_angular_error(np.concatenate(predictions, axis=1), np.concatenate(targets, axis=1))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(config: RunConfig, out_dir: Optional[Path] = None, export: bool = True) -> RunRecord:
    """Train one run; writes metrics, trajectory, summary and checkpoint when ``export``."""
    validate(config)
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    model = build_model(config)
    train_set = SyntheticDataset(config.data, config.data_seed, "train")
    val_set = SyntheticDataset(config.data, config.data_seed, "val")
    task_names = [task.name for task in model.tasks]
    lps = config.lps
    prioritizer = LossPrioritizer(
        LossScheme.from_name(lps.scheme, lps.manual_weights),
        len(task_names),
        lps.history,
        lps.kappa,
        (lps.clamp_min, lps.clamp_max),
    )
    params = model.parameters()
    optimizer = OptimizerState.for_params(params, config.optim.lr, config.optim.weight_decay)
    record = RunRecord(config, task_names)
    record.initial = evaluate_model(model, val_set)
    logger.info("run seed=%d scheme=%s: initial score %.4f", config.seed, lps.scheme, record.initial.score)

    for epoch in range(1, config.epochs + 1):
        weights = prioritizer.current_weights()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        loss_sums = np.zeros(len(task_names))
        total_sum = 0.0
        steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[int(i)] for i in order[start : start + config.batch_size]]
            model.zero_grad()
            try:
                with ComputationTape():
                    step_total = None
                    for sample in batch:
                        total, values = sample_loss(model, prioritizer, sample, config.cfm.lambda_cos)
                        step_total = total if step_total is None else step_total + total
                        loss_sums += values
                    step_loss = step_total * (1.0 / len(batch))
                backward(step_loss)
            except NumericError as exc:
                logger.error("numeric failure at epoch %d, step %d: %s", epoch, steps + 1, exc)
                raise
            adamw_step(params, [p.grad for p in params], optimizer)
            total_sum += step_loss.item()
            steps += 1
            logger.debug("epoch %d step %d loss %.6f", epoch, steps, step_loss.item())

        task_means = loss_sums / len(order)
        result = evaluate_model(model, val_set)
        prioritizer.end_epoch(epoch, list(task_means))
        row = EpochRow(
            epoch=epoch,
            task_losses=dict(zip(task_names, (float(v) for v in task_means))),
            weights=dict(zip(task_names, (float(w) for w in weights))),
            total=total_sum / steps,
            metrics=result.metrics,
            coherence=result.coherence,
            score=result.score,
        )
        record.rows.append(row)
        logger.info(
            "epoch %d/%d total %.4f score %.4f %s",
            epoch,
            config.epochs,
            row.total,
            row.score,
            " ".join(f"{k}={v:.4f}" for k, v in row.metrics.items()),
        )

    record.trajectory = list(prioritizer.trajectory)
    if export:
        out_dir.mkdir(parents=True, exist_ok=True)
        export_metrics(record, out_dir)
        save_checkpoint(out_dir / CHECKPOINT, model.state_dict())
        (out_dir / CONFIG_JSON).write_text(json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n")
    return record


def evaluate(checkpoint: Path, dataset: SyntheticDataset, config: RunConfig) -> EvalResult:
    """Rebuild the model described by ``config``, load ``checkpoint`` and evaluate."""
    model = build_model(config)
    model.load_state_dict(load_checkpoint(checkpoint))
    return evaluate_model(model, dataset)


def load_run(run_dir: Path) -> Tuple[RunConfig, Path]:
    run_dir = Path(run_dir)
    config = from_dict(json.loads((run_dir / CONFIG_JSON).read_text()))
    return config, run_dir / CHECKPOINT


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def export_metrics(record: RunRecord, out_dir: Path) -> List[Path]:
    """Write metrics.csv, weights_trajectory.csv and summary.json (overwriting)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = record.tasks
    metric_names = [name for name in ("miou", "rmse", "merr") if record.rows and name in record.rows[0].metrics]

    metrics_path = out_dir / METRICS_CSV
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["epoch"]
            + [f"loss_{t}" for t in tasks]
            + [f"weight_{t}" for t in tasks]
            + metric_names
            + ["coherence", "total", "score"]
        )
        for row in record.rows:
            writer.writerow(
                [row.epoch]
                + [_fmt(row.task_losses[t]) for t in tasks]
                + [_fmt(row.weights[t]) for t in tasks]
                + [_fmt(row.metrics[m]) for m in metric_names]
                + [_fmt(row.coherence), _fmt(row.total), _fmt(row.score)]
            )

    trajectory_path = out_dir / TRAJECTORY_CSV
    with open(trajectory_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "warmup"] + [f"raw_{t}" for t in tasks] + [f"weight_{t}" for t in tasks])
        for entry in record.trajectory:
            writer.writerow(
                [entry.epoch, int(entry.warmup)] + [_fmt(v) for v in entry.raw] + [_fmt(v) for v in entry.weights]
            )

    summary_path = out_dir / SUMMARY_JSON
    summary_path.write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    return [metrics_path, trajectory_path, summary_path]


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class AblationGrid:
    name: str
    seeds: Tuple[int, ...]
    variants: Tuple[Variant, ...]


def parse_grid(payload: Dict[str, Any], default_name: str = "custom") -> AblationGrid:
    variants = payload.get("variants") or []
    if not variants:
        raise ConfigurationError("ablation grid needs at least one variant")
    parsed = []
    for entry in variants:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigurationError(f"grid variant needs a name: {entry!r}")
        parsed.append(Variant(str(entry["name"]), dict(entry.get("overrides") or {})))
    names = [v.name for v in parsed]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate variant names in grid: {names}")
    seeds = tuple(int(s) for s in payload.get("seeds", (0,)))
    return AblationGrid(str(payload.get("name", default_name)), seeds, tuple(parsed))


def available_grids() -> List[str]:
    return sorted(p.stem for p in GRIDS_DIR.glob("*.yaml"))


def load_grid(name_or_path: str) -> AblationGrid:
    """Load a built-in grid by name (configs/ablations/<name>.yaml) or any YAML path."""
    path = Path(name_or_path)
    if not path.is_file():
        path = GRIDS_DIR / f"{name_or_path}.yaml"
    if not path.is_file():
        raise ConfigurationError(f"unknown ablation grid {name_or_path!r}; built-in: {', '.join(available_grids())}")
    try:
        payload = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed ablation grid {path}: {exc}") from exc
    return parse_grid(payload, default_name=path.stem)


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "variant"


def _run_job(job: Tuple[Dict[str, Any], str]) -> Dict[str, Any]:
    payload, out_dir = job
    return train(from_dict(payload), Path(out_dir)).summary()


def ablate(config: RunConfig, grid: AblationGrid, out_dir: Path, workers: int = 1) -> Dict[str, Any]:
    """Run every variant for every grid seed and write ablation.csv / ablation.json."""
    out_dir = Path(out_dir)
    jobs = []
    for variant in grid.variants:
        variant_config = apply_overrides(config, variant.overrides)
        for seed in grid.seeds:
            run_config = dataclasses.replace(variant_config, seed=seed)
            validate(run_config)
            run_dir = out_dir / slugify(variant.name) / f"seed-{seed}"
            jobs.append((to_dict(run_config), str(run_dir)))
    logger.info("ablation %s: %d variants x %d seeds", grid.name, len(grid.variants), len(grid.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_job, jobs))
    else:
        summaries = [_run_job(job) for job in jobs]

    per_variant: Dict[str, List[Dict[str, Any]]] = {}
    runs = []
    index = 0
    for variant in grid.variants:
        per_variant[variant.name] = []
        for seed in grid.seeds:
            summary = summaries[index]
            index += 1
            per_variant[variant.name].append(summary)
            runs.append(
                {
                    "variant": variant.name,
                    "seed": seed,
                    "metrics": summary["final"]["metrics"],
                    "score": summary["final"]["score"],
                    "weight_variance": summary["weight_variance"],
                }
            )

    reference = grid.variants[0].name
    rows = []
    for variant in grid.variants:
        summaries_v = per_variant[variant.name]
        metric_names = sorted(summaries_v[0]["final"]["metrics"])
        wins = sum(
            1
            for ours, ref in zip(summaries_v, per_variant[reference])
            if ours["final"]["score"] > ref["final"]["score"]
        )
        variances = [s["weight_variance"] for s in summaries_v if s["weight_variance"] is not None]
        rows.append(
            {
                "variant": variant.name,
                "metrics": {m: float(np.mean([s["final"]["metrics"][m] for s in summaries_v])) for m in metric_names},
                "score": float(np.mean([s["final"]["score"] for s in summaries_v])),
                "wins_vs_reference": wins,
                "weight_variance": float(np.mean(variances)) if variances else None,
            }
        )
    report = {
        "format": REPORT_FORMAT,
        "grid": grid.name,
        "seeds": list(grid.seeds),
        "reference": reference,
        "variants": rows,
        "runs": runs,
    }
    write_report(report, out_dir)
    return report


def write_report(report: Dict[str, Any], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    metric_names = ["miou", "rmse", "merr"]
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant"] + metric_names + ["score", "wins_vs_reference", "weight_variance"])
        for row in report["variants"]:
            writer.writerow(
                [row["variant"]]
                + [_fmt(row["metrics"].get(m)) for m in metric_names]
                + [_fmt(row["score"]), row["wins_vs_reference"], _fmt(row["weight_variance"])]
            )
