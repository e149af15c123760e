"""
Experiment orchestration: run directories, logging, evaluation, single runs, seed sweeps,
the second-step ablation and the lambda/m sensitivity sweeps.
"""

import copy
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config.settings import Settings
from src.bilevel import BilevelState, bort2_train, build_bilevel_state, build_threshold_state, naive_second_step
from src.checkpoint import (KIND_SECOND_STEP, load_checkpoint, load_labeling_checkpoint,
                            load_second_step_checkpoint, save_labeling_checkpoint, save_second_step_checkpoint)
from src.config_file import config_hash, save_experiment_config
from src.datamodel import (DatasetLayout, MultiDomainDataset, generate_synthetic_msda, iterate_batches,
                           load_multi_domain_dataset)
from src.errors import ConfigurationError, ContractError
from src.first_step import build_labeling_state, build_plugin, predict, train_step1
from src.metrics_store import MetricsStore, write_summary
from src.models import (DatasetKind, DomainAccuracy, EvaluationResult, ExperimentConfig, RunSummary,
                        SecondStepMode, SweepSummary, format_mean_std)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ABLATION_MODES = (SecondStepMode.BORT2_FULL, SecondStepMode.BORT2_NO_BILEVEL, SecondStepMode.NAIVE,
                  SecondStepMode.NONE)
ABLATION_LABELS = {
    SecondStepMode.BORT2_FULL: "full (stochastic head + bilevel)",
    SecondStepMode.BORT2_NO_BILEVEL: "w/o bilevel optimization",
    SecondStepMode.NAIVE: "w/o noise-robust model",
    SecondStepMode.NONE: "first step only",
}
SENSITIVITY_PARAMETERS = ("loss_weight_lambda", "margin_m")
SENSITIVITY_FILE = "sensitivity.json"
PROCESS_LOG = "bort2.log"


# -- logging ---------------------------------------------------------------------------------

def setup_logging(level: Optional[str] = None, log_dir: Optional[str] = None) -> logging.Logger:
    """Console logging plus a process log file in ``log_dir`` (default: settings)"""
    root = logging.getLogger()
    root.setLevel(getattr(logging, (level or Settings.LOG_LEVEL).upper(), logging.INFO))
    formatter = logging.Formatter(LOG_FORMAT)
    if not any(getattr(h, "_bort2_console", False) for h in root.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        console_handler._bort2_console = True
        root.addHandler(console_handler)

    log_dir = log_dir or Settings.LOG_DIR
    if log_dir and not any(getattr(h, "_bort2_process_log", False) for h in root.handlers):
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, PROCESS_LOG))
        file_handler.setFormatter(formatter)
        file_handler._bort2_process_log = True
        root.addHandler(file_handler)
    return root


def attach_run_log(run_dir: str) -> logging.Handler:
    """Mirror every log line of this run into ``<run_dir>/train.log``"""
    log_file = Path(run_dir) / "train.log"
    log_file.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_file)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(file_handler)
    return file_handler


def detach_run_log(handler: logging.Handler):
    logging.getLogger().removeHandler(handler)
    handler.close()


# -- data -------------------------------------------------------------------------------------

def prepare_dataset(config: ExperimentConfig) -> MultiDomainDataset:
    if config.dataset_kind == DatasetKind.SYNTHETIC:
        return generate_synthetic_msda(config.synthetic_config())
    if not config.target_domain:
        raise ConfigurationError("dataset_kind=disk needs target_domain")
    layout = DatasetLayout(target_domain=config.target_domain, manifest_path=config.manifest_path)
    return load_multi_domain_dataset(config.data_root or ".", layout)


@dataclass
class EvaluationSet:
    inputs: np.ndarray
    labels: np.ndarray
    domain: str


def split_target_for_evaluation(dataset: MultiDomainDataset, config: ExperimentConfig, seed: int
                                ) -> Tuple[MultiDomainDataset, Optional[EvaluationSet]]:
    """Hold out ``target_test_fraction`` of the target domain for testing.

    Returns the training dataset and the labeled target test set, which is ``None`` when
    the target has no evaluation labels. With ``target_test_disjoint=false`` training
    sees every target sample and the test set is the whole target domain.
    """
    target_id = dataset.target_id
    name = dataset.domain_names[target_id]
    if not dataset.has_target_eval_labels:
        logger.warning("[EVAL] Target domain '%s' has no evaluation labels; accuracy will not be reported", name)
        return dataset, None
    if not config.target_test_disjoint:
        inputs, labels = dataset.evaluation_arrays(target_id)
        return dataset, EvaluationSet(inputs, labels, name)

    size = dataset.domain_size(target_id)
    n_test = int(math.floor(config.target_test_fraction * size + 0.5))
    if n_test == 0 or n_test == size:
        raise ConfigurationError(f"target_test_fraction {config.target_test_fraction} leaves an empty part "
                                 f"of the {size}-sample target domain")
    order = np.random.default_rng(np.random.SeedSequence([seed, 5])).permutation(size)
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    indices = [np.arange(dataset.domain_size(k)) for k in range(dataset.num_source_domains)] + [train_idx]
    inputs, labels = dataset.evaluation_arrays(target_id)
    return dataset.subset(indices), EvaluationSet(inputs[test_idx], labels[test_idx], name)


# -- evaluation ------------------------------------------------------------------------------

def evaluate(model: torch.nn.Module, inputs: np.ndarray, labels: Optional[np.ndarray], num_classes: int,
             batch_size: int = 512) -> EvaluationResult:
    """Accuracy, per-class accuracy and confusion matrix (rows: true, columns: predicted)"""
    if labels is None:
        raise ContractError("evaluation needs ground-truth labels")
    tensor = torch.tensor(np.asarray(inputs), dtype=torch.float32)
    predicted = predict(model, tensor, batch_size).argmax(dim=-1).numpy() if len(labels) else np.array([], int)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.bincount(labels * num_classes + predicted, minlength=num_classes * num_classes)
    confusion = confusion.reshape(num_classes, num_classes)
    totals = confusion.sum(axis=1)
    per_class = [None if totals[c] == 0 else float(confusion[c, c] / totals[c]) for c in range(num_classes)]
    accuracy = float(np.trace(confusion) / max(1, confusion.sum()))
    return EvaluationResult(accuracy=accuracy, per_class_accuracy=per_class,
                            confusion_matrix=confusion.tolist(), num_samples=int(len(labels)))


def save_confusion_matrix(run_dir: str, name: str, result: EvaluationResult) -> str:
    path = os.path.join(run_dir, f"confusion_{name}.json")
    with open(path, 'w', encoding='utf-8') as f:
        f.write(result.model_dump_json(indent=2))
    return path


def _domain_accuracies(model, dataset: MultiDomainDataset, test_set: Optional[EvaluationSet],
                       batch_size: int) -> List[DomainAccuracy]:
    rows = []
    for k in range(dataset.num_source_domains):
        inputs, labels = dataset.evaluation_arrays(k)
        rows.append(DomainAccuracy(domain=dataset.domain_names[k],
                                   accuracy=evaluate(model, inputs, labels, dataset.num_classes, batch_size).accuracy))
    if test_set is not None:
        result = evaluate(model, test_set.inputs, test_set.labels, dataset.num_classes, batch_size)
        rows.append(DomainAccuracy(domain=test_set.domain, accuracy=result.accuracy))
    return rows


# -- directories ---------------------------------------------------------------------------

def _output_root(config: ExperimentConfig) -> str:
    return config.output_dir or Settings.OUTPUT_ROOT


def experiment_dir(config: ExperimentConfig, suffix: str = "") -> str:
    name = f"{config.name}{suffix}-{config_hash(config)[:8]}"
    return os.path.join(_output_root(config), name)


def seed_config(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return config.model_copy(update={"seed": seed, "seeds": []})


# -- single runs ---------------------------------------------------------------------------------

def _format_accuracy(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def render_run_table(summary: RunSummary) -> str:
    lines = [
        "=" * 60,
        f"Run {summary.name} | seed {summary.seed} | config {summary.config_hash[:8]}",
        f"Second step: {summary.second_step_mode.value}",
        "=" * 60,
        f"{'first step accuracy':<32}{_format_accuracy(summary.first_step_accuracy):>10}",
        f"{'second step accuracy':<32}{_format_accuracy(summary.second_step_accuracy):>10}",
        f"{'final accuracy':<32}{_format_accuracy(summary.final_accuracy):>10}",
    ]
    if summary.bilevel_started is not None:
        lines.append(f"{'bilevel started':<32}{str(summary.bilevel_started):>10}")
    if summary.per_domain:
        lines.append("-" * 60)
        lines.extend(f"{row.domain:<32}{_format_accuracy(row.accuracy):>10}" for row in summary.per_domain)
    lines.append("=" * 60)
    return "\n".join(lines)


def _write_failure(run_dir: str, stage: str, error: Exception):
    path = os.path.join(run_dir, "failure.json")
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({"stage": stage, "error_type": type(error).__name__, "error": str(error),
                   "step": getattr(error, "step", None)}, f, indent=2)
    logger.error("Run failed during %s: %s (state kept in %s)", stage, error, run_dir)


def _run_second_step(labeling, train_dataset: MultiDomainDataset, config: ExperimentConfig, run_dir: str,
                     test_set: Optional[EvaluationSet]) -> Tuple[torch.nn.Module, Optional[bool], Optional[BilevelState]]:
    metrics = MetricsStore(run_dir)
    num_classes = train_dataset.num_classes
    eval_fn = None
    if test_set is not None:
        eval_fn = lambda net: evaluate(net, test_set.inputs, test_set.labels, num_classes,
                                       config.eval_batch_size).accuracy

    mode = config.second_step_mode
    if mode == SecondStepMode.NAIVE:
        threshold = build_threshold_state(config, num_classes)
        target = naive_second_step(labeling, train_dataset, threshold, config, metrics, eval_fn)
        return target.network, None, None
    bstate = build_bilevel_state(labeling, config, stochastic=True)
    target, _ = bort2_train(bstate, train_dataset, config, metrics, eval_fn)
    started = bstate.bilevel_started if mode == SecondStepMode.BORT2_FULL else None
    return target.network, started, bstate


def _run_seed(config: ExperimentConfig, seed: int, seed_dir: str,
              variants: Dict[str, ExperimentConfig]) -> Dict[str, RunSummary]:
    """Step 1 once for this seed, then each variant's second step from a copy of F_theta.

    Every variant must share the base config's first-step settings.
    """
    os.makedirs(seed_dir, exist_ok=True)
    handler = attach_run_log(seed_dir)
    stage = "data"
    try:
        base = seed_config(config, seed)
        save_experiment_config(base, os.path.join(seed_dir, "config.cfg"))
        dataset = prepare_dataset(base)
        train_dataset, test_set = split_target_for_evaluation(dataset, base, seed)

        stage = "step1"
        steps_per_epoch = iterate_batches(train_dataset, base.batch_size, seed).batches_per_epoch
        labeling = build_labeling_state(base, train_dataset.input_shape, train_dataset.num_classes, steps_per_epoch)
        target_eval = None
        if test_set is not None:
            target_eval = lambda net: evaluate(net, test_set.inputs, test_set.labels,
                                               train_dataset.num_classes, base.eval_batch_size).accuracy
        train_step1(labeling, train_dataset, build_plugin(base), base, MetricsStore(seed_dir), eval_fn=target_eval)
        save_labeling_checkpoint(os.path.join(seed_dir, "step1.pt"), labeling, base, train_dataset.input_shape,
                                 steps_per_epoch)
        first_accuracy = None
        if test_set is not None:
            first = evaluate(labeling.network, test_set.inputs, test_set.labels, train_dataset.num_classes,
                             base.eval_batch_size)
            save_confusion_matrix(seed_dir, "step1", first)
            first_accuracy = first.accuracy
            logger.info("[EVAL] seed %d first-step target accuracy %.4f", seed, first_accuracy)

        summaries = {}
        for label, variant in variants.items():
            stage = f"step2:{label}"
            run_config = seed_config(variant, seed)
            run_dir = seed_dir if len(variants) == 1 else os.path.join(seed_dir, label)
            os.makedirs(run_dir, exist_ok=True)
            final_model, started, second_accuracy = labeling.network, None, None
            if run_config.second_step_mode != SecondStepMode.NONE:
                labeling_copy = copy.deepcopy(labeling)
                final_model, started, bstate = _run_second_step(labeling_copy, train_dataset, run_config,
                                                                run_dir, test_set)
                if bstate is not None:
                    save_second_step_checkpoint(os.path.join(run_dir, "step2.pt"), bstate, run_config,
                                                train_dataset.input_shape)
                if test_set is not None:
                    second = evaluate(final_model, test_set.inputs, test_set.labels, train_dataset.num_classes,
                                      run_config.eval_batch_size)
                    save_confusion_matrix(run_dir, "step2", second)
                    second_accuracy = second.accuracy

            summary = RunSummary(
                name=run_config.name,
                seed=seed,
                config_hash=config_hash(run_config),
                second_step_mode=run_config.second_step_mode,
                first_step_accuracy=first_accuracy,
                second_step_accuracy=second_accuracy,
                final_accuracy=second_accuracy if second_accuracy is not None else first_accuracy,
                per_domain=_domain_accuracies(final_model, train_dataset, test_set, run_config.eval_batch_size),
                bilevel_started=started,
                run_dir=run_dir,
            )
            write_summary(run_dir, summary, render_run_table(summary))
            summaries[label] = summary
        return summaries
    except Exception as e:
        _write_failure(seed_dir, stage, e)
        raise
    finally:
        detach_run_log(handler)


def _run_seeds(config: ExperimentConfig, exp_dir: str,
               variants: Dict[str, ExperimentConfig]) -> Dict[str, List[RunSummary]]:
    seeds = config.resolved_seeds()
    jobs = [(config, s, os.path.join(exp_dir, f"seed-{s}"), variants) for s in seeds]
    workers = min(Settings.SWEEP_WORKERS, len(jobs))
    if workers > 1:
        logger.info("[SWEEP] Running %d seeds on %d worker processes", len(jobs), workers)
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_run_seed, *zip(*jobs)))
    else:
        results = [_run_seed(*job) for job in jobs]
    return {label: [r[label] for r in results] for label in variants}


def aggregate_runs(name: str, hash_: str, runs: Sequence[RunSummary]) -> SweepSummary:
    """Mean and (population) std of final and first-step accuracies across seeds"""
    finals = [r.final_accuracy for r in runs if r.final_accuracy is not None]
    firsts = [r.first_step_accuracy for r in runs if r.first_step_accuracy is not None]
    return SweepSummary(
        name=name,
        config_hash=hash_,
        seeds=[r.seed for r in runs],
        runs=list(runs),
        mean_accuracy=float(np.mean(finals)) if finals else float("nan"),
        std_accuracy=float(np.std(finals)) if finals else float("nan"),
        mean_first_step_accuracy=float(np.mean(firsts)) if firsts else None,
        std_first_step_accuracy=float(np.std(firsts)) if firsts else None,
    )


def render_sweep_table(summary: SweepSummary) -> str:
    lines = ["=" * 60, f"Sweep {summary.name} | config {summary.config_hash[:8]} | seeds {summary.seeds}",
             "=" * 60]
    for run in summary.runs:
        lines.append(f"{'seed ' + str(run.seed):<32}{_format_accuracy(run.final_accuracy):>10}")
    lines.append("-" * 60)
    if summary.mean_first_step_accuracy is not None:
        lines.append(f"{'first step (mean±std)':<32}"
                     f"{format_mean_std(summary.mean_first_step_accuracy, summary.std_first_step_accuracy):>14}")
    lines.append(f"{'final (mean±std)':<32}{summary.formatted():>14}")
    lines.append("=" * 60)
    return "\n".join(lines)


def run_experiment(config: ExperimentConfig) -> str:
    """Step 1 then the configured second step for every seed; returns the experiment directory.

    Each seed gets ``seed-<s>/`` with config, checkpoints, metrics and a summary; with more
    than one seed the experiment directory also gets the aggregated summary.
    """
    exp_dir = experiment_dir(config)
    os.makedirs(exp_dir, exist_ok=True)
    save_experiment_config(config, os.path.join(exp_dir, "config.cfg"))
    label = config.second_step_mode.value
    runs = _run_seeds(config, exp_dir, {label: config})[label]
    if len(runs) > 1:
        sweep = aggregate_runs(config.name, config_hash(config), runs)
        write_summary(exp_dir, sweep, render_sweep_table(sweep))
        logger.info("[SWEEP] %s: %s over seeds %s", config.name, sweep.formatted(), sweep.seeds)
    return exp_dir


def run_ablation(config: ExperimentConfig) -> Tuple[str, Dict[str, SweepSummary]]:
    """The four second-step configurations over the configured seeds, sharing each seed's first step"""
    exp_dir = experiment_dir(config, "-ablation")
    os.makedirs(exp_dir, exist_ok=True)
    save_experiment_config(config, os.path.join(exp_dir, "config.cfg"))
    variants = {mode.value: config.model_copy(update={"second_step_mode": mode, "name": f"{config.name}-{mode.value}"})
                for mode in ABLATION_MODES}
    results = _run_seeds(config, exp_dir, variants)
    sweeps = {label: aggregate_runs(variants[label].name, config_hash(variants[label]), runs)
              for label, runs in results.items()}

    lines = ["=" * 60, f"Ablation {config.name} | seeds {config.resolved_seeds()}", "=" * 60]
    for number, mode in enumerate(ABLATION_MODES, 1):
        lines.append(f"#{number} {ABLATION_LABELS[mode]:<40}{sweeps[mode.value].formatted():>14}")
    lines.append("=" * 60)
    table = "\n".join(lines)
    with open(os.path.join(exp_dir, "ablation.json"), 'w', encoding='utf-8') as f:
        json.dump({label: sweep.model_dump(mode="json") for label, sweep in sweeps.items()}, f, indent=2)
    with open(os.path.join(exp_dir, "ablation.txt"), 'w', encoding='utf-8') as f:
        f.write(table + "\n")
    logger.info("[SWEEP] Ablation table:\n%s", table)
    return exp_dir, sweeps


def run_sensitivity(config: ExperimentConfig, parameter: str, values: Sequence[float]) -> Tuple[str, dict]:
    """Sweep lambda or m of the second step; writes sensitivity.json"""
    if parameter not in SENSITIVITY_PARAMETERS:
        raise ConfigurationError(f"sensitivity parameter must be one of {SENSITIVITY_PARAMETERS}, got {parameter}")
    if not values:
        raise ConfigurationError("sensitivity sweep needs at least one value")
    exp_dir = experiment_dir(config, f"-sensitivity-{parameter}")
    os.makedirs(exp_dir, exist_ok=True)
    swept: Dict[str, float] = {}
    for v in values:
        label = f"{parameter}={float(v):g}"
        if label in swept:
            logger.warning("[SWEEP] Skipping repeated value %s", label)
            continue
        swept[label] = float(v)
    variants = {label: config.model_copy(update={parameter: v}) for label, v in swept.items()}
    results = _run_seeds(config, exp_dir, variants)

    rows = []
    for label, value in swept.items():
        runs = results[label]
        sweep = aggregate_runs(label, config_hash(variants[label]), runs)
        rows.append({"value": value, "mean_accuracy": sweep.mean_accuracy, "std_accuracy": sweep.std_accuracy,
                     "accuracies": [r.final_accuracy for r in runs]})
        logger.info("[SWEEP] %s: %s", label, sweep.formatted())
    report = {"parameter": parameter, "seeds": config.resolved_seeds(), "rows": rows,
              "spread": max(r["mean_accuracy"] for r in rows) - min(r["mean_accuracy"] for r in rows)}
    with open(os.path.join(exp_dir, SENSITIVITY_FILE), 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)
    return exp_dir, report


# -- partial runs used by the CLI ------------------------------------------------------------------

def run_step1(config: ExperimentConfig) -> str:
    """Only the first step, for every seed; the checkpoints feed ``run_step2``"""
    none_config = config.model_copy(update={"second_step_mode": SecondStepMode.NONE})
    exp_dir = experiment_dir(none_config)
    os.makedirs(exp_dir, exist_ok=True)
    _run_seeds(none_config, exp_dir, {SecondStepMode.NONE.value: none_config})
    return exp_dir


def run_step2(config: ExperimentConfig, checkpoint_path: str) -> str:
    """Second step from a saved labeling-function checkpoint"""
    labeling, step1_config = load_labeling_checkpoint(checkpoint_path)
    if config.second_step_mode == SecondStepMode.NONE:
        raise ConfigurationError("step2 needs second_step_mode other than 'none'")
    run_dir = os.path.join(experiment_dir(config), f"seed-{config.seed}")
    os.makedirs(run_dir, exist_ok=True)
    handler = attach_run_log(run_dir)
    try:
        save_experiment_config(config, os.path.join(run_dir, "config.cfg"))
        dataset = prepare_dataset(step1_config)
        train_dataset, test_set = split_target_for_evaluation(dataset, step1_config, step1_config.seed)
        model, started, bstate = _run_second_step(labeling, train_dataset, config, run_dir, test_set)
        if bstate is not None:
            save_second_step_checkpoint(os.path.join(run_dir, "step2.pt"), bstate, config, train_dataset.input_shape)
        accuracy = None
        if test_set is not None:
            result = evaluate(model, test_set.inputs, test_set.labels, train_dataset.num_classes,
                              config.eval_batch_size)
            save_confusion_matrix(run_dir, "step2", result)
            accuracy = result.accuracy
        summary = RunSummary(name=config.name, seed=config.seed, config_hash=config_hash(config),
                             second_step_mode=config.second_step_mode, second_step_accuracy=accuracy,
                             final_accuracy=accuracy, bilevel_started=started, run_dir=run_dir)
        write_summary(run_dir, summary, render_run_table(summary))
        return run_dir
    finally:
        detach_run_log(handler)


def evaluate_checkpoint(checkpoint_path: str) -> EvaluationResult:
    """Re-evaluate a step-1 or step-2 checkpoint on the target test split of its own config"""
    kind = load_checkpoint(checkpoint_path)["kind"]
    if kind == KIND_SECOND_STEP:
        bstate, config = load_second_step_checkpoint(checkpoint_path)
        model = bstate.target.network
    else:
        state, config = load_labeling_checkpoint(checkpoint_path)
        model = state.network
    dataset = prepare_dataset(config)
    _, test_set = split_target_for_evaluation(dataset, config, config.seed)
    if test_set is None:
        raise ContractError("target domain of this checkpoint has no evaluation labels")
    result = evaluate(model, test_set.inputs, test_set.labels, dataset.num_classes, config.eval_batch_size)
    save_confusion_matrix(os.path.dirname(os.path.abspath(checkpoint_path)), f"eval_{kind}", result)
    return result
