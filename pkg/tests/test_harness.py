import json
import logging
import os
import warnings

import numpy as np
import pytest
import torch
import torch.nn as nn

from src.errors import ConfigurationError, ContractError, DivergenceError
from src.harness import (ABLATION_MODES, PROCESS_LOG, SENSITIVITY_FILE, aggregate_runs, evaluate,
                         evaluate_checkpoint, experiment_dir, prepare_dataset, run_ablation, run_experiment,
                         run_sensitivity, run_step1, run_step2, setup_logging, split_target_for_evaluation)
from src.metrics_store import read_metric_series, read_summary_json
from src.models import RunSummary, SecondStepMode


class TestEvaluation:
    def test_confusion_matrix(self):
        """Test accuracy, per-class accuracy and the confusion layout (rows true, columns predicted)"""
        labels = np.array([0, 0, 1, 1, 2])
        predicted = np.array([0, 1, 1, 1, 0])
        inputs = np.eye(3, dtype=np.float32)[predicted] * 10.0
        result = evaluate(nn.Identity(), inputs, labels, 3)
        assert result.accuracy == pytest.approx(3 / 5)
        assert result.per_class_accuracy == [0.5, 1.0, 0.0]
        assert result.confusion_matrix == [[1, 1, 0], [0, 2, 0], [1, 0, 0]]
        assert result.num_samples == 5

    def test_class_without_samples(self):
        """Test that an absent class has no per-class accuracy"""
        result = evaluate(nn.Identity(), np.eye(3, dtype=np.float32)[[0, 1]], np.array([0, 1]), 3)
        assert result.per_class_accuracy[2] is None
        assert result.accuracy == 1.0

    def test_labels_required(self):
        """Test that unlabeled evaluation is refused"""
        with pytest.raises(ContractError):
            evaluate(nn.Identity(), np.zeros((2, 3), dtype=np.float32), None, 3)

    def test_constant_predictor(self):
        """Test that a model predicting a single class scores 1/C on balanced labels"""
        model = nn.Linear(2, 3)
        with torch.no_grad():
            model.weight.zero_()
            model.bias.copy_(torch.tensor([5.0, 0.0, 0.0]))
        inputs = np.random.default_rng(0).normal(size=(12, 2)).astype(np.float32)
        result = evaluate(model, inputs, np.repeat(np.arange(3), 4), 3)
        assert result.accuracy == pytest.approx(1 / 3)
        assert result.per_class_accuracy == [1.0, 0.0, 0.0]

    def test_read_only_inputs(self):
        """Test that frozen dataset arrays are evaluated without tensor warnings"""
        inputs = np.eye(3, dtype=np.float32)
        inputs.setflags(write=False)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            result = evaluate(nn.Identity(), inputs, np.arange(3), 3)
        assert result.accuracy == 1.0


class TestTargetSplit:
    def test_disjoint_split(self, tiny_config):
        """Test the seeded, disjoint train/test split of the target domain"""
        dataset = prepare_dataset(tiny_config)
        train, test_set = split_target_for_evaluation(dataset, tiny_config, 0)
        assert train.domain_size(train.target_id) == 24
        assert len(test_set.labels) == 24
        train_rows = {tuple(r) for r in train.training_arrays(train.target_id)[0]}
        assert not train_rows & {tuple(r) for r in test_set.inputs}
        again, test_again = split_target_for_evaluation(dataset, tiny_config, 0)
        assert np.array_equal(test_set.inputs, test_again.inputs)
        assert train.domain_size(0) == dataset.domain_size(0)

    def test_shared_split(self, tiny_config):
        """Test training on the whole target when disjointness is off"""
        config = tiny_config.model_copy(update={"target_test_disjoint": False})
        dataset = prepare_dataset(config)
        train, test_set = split_target_for_evaluation(dataset, config, 0)
        assert train is dataset
        assert len(test_set.labels) == 48

    def test_empty_part_rejected(self, tiny_config):
        """Test a fraction that rounds to an empty test part"""
        config = tiny_config.model_copy(update={"target_test_fraction": 0.001})
        with pytest.raises(ConfigurationError):
            split_target_for_evaluation(prepare_dataset(config), config, 0)


class TestRuns:
    def test_run_experiment_layout(self, tiny_config):
        """Test a full single-seed run and its artifacts"""
        exp_dir = run_experiment(tiny_config)
        assert exp_dir == experiment_dir(tiny_config)
        seed_dir = os.path.join(exp_dir, f"seed-{tiny_config.seed}")
        for name in ("config.cfg", "step1.pt", "step2.pt", "metrics.jsonl", "train.log", "summary.json",
                     "summary.txt", "confusion_step1.json", "confusion_step2.json"):
            assert os.path.exists(os.path.join(seed_dir, name)), name
        summary = read_summary_json(seed_dir)
        assert summary["bilevel_started"] is True
        assert 0.0 <= summary["final_accuracy"] <= 1.0
        assert [row["domain"] for row in summary["per_domain"]][-1] == "target"
        assert read_metric_series(seed_dir, "target_accuracy", "step1")
        assert read_metric_series(seed_dir, "hypergradient_norm", "step2")

    def test_runs_are_deterministic(self, tiny_config, tmp_path):
        """Test that the same config and seed reproduce the same results"""
        first = read_summary_json(os.path.join(run_experiment(tiny_config), f"seed-{tiny_config.seed}"))
        other = tiny_config.model_copy(update={"output_dir": str(tmp_path / "again")})
        second = read_summary_json(os.path.join(run_experiment(other), f"seed-{tiny_config.seed}"))
        assert first["config_hash"] == second["config_hash"]
        for key in ("first_step_accuracy", "second_step_accuracy", "final_accuracy", "per_domain"):
            assert first[key] == second[key]

    def test_seed_sweep_aggregates(self, tiny_config):
        """Test the aggregated summary of a multi-seed run"""
        config = tiny_config.model_copy(update={"seeds": [1, 2], "second_step_mode": SecondStepMode.NAIVE})
        exp_dir = run_experiment(config)
        sweep = read_summary_json(exp_dir)
        assert sweep["seeds"] == [1, 2]
        finals = [run["final_accuracy"] for run in sweep["runs"]]
        assert sweep["mean_accuracy"] == pytest.approx(np.mean(finals))
        assert sweep["std_accuracy"] == pytest.approx(np.std(finals))

    def test_ablation_shares_first_step(self, tiny_config):
        """Test the four second-step configurations from one first step"""
        exp_dir, sweeps = run_ablation(tiny_config)
        assert list(sweeps) == [mode.value for mode in ABLATION_MODES]
        firsts = {sweep.runs[0].first_step_accuracy for sweep in sweeps.values()}
        assert len(firsts) == 1
        none_run = sweeps["none"].runs[0]
        assert none_run.final_accuracy == none_run.first_step_accuracy
        assert none_run.second_step_accuracy is None
        with open(os.path.join(exp_dir, "ablation.json"), encoding='utf-8') as f:
            assert set(json.load(f)) == set(sweeps)
        assert os.path.exists(os.path.join(exp_dir, "ablation.txt"))

    def test_sensitivity_report(self, tiny_config):
        """Test the margin sweep report"""
        exp_dir, report = run_sensitivity(tiny_config, "margin_m", [2.0, 8.0])
        assert [row["value"] for row in report["rows"]] == [2.0, 8.0]
        assert report["spread"] >= 0.0
        with open(os.path.join(exp_dir, SENSITIVITY_FILE), encoding='utf-8') as f:
            assert json.load(f)["parameter"] == "margin_m"

    def test_sensitivity_repeated_values(self, tiny_config):
        """Test that a repeated value is swept once and rows keep their own results"""
        _, repeated = run_sensitivity(tiny_config, "margin_m", [8.0, 8.0, 2.0])
        _, plain = run_sensitivity(tiny_config, "margin_m", [2.0, 8.0])
        assert [row["value"] for row in repeated["rows"]] == [8.0, 2.0]
        by_value = {row["value"]: row["accuracies"] for row in plain["rows"]}
        for row in repeated["rows"]:
            assert row["accuracies"] == by_value[row["value"]]

    def test_sensitivity_rejects_other_parameters(self, tiny_config):
        """Test the sweepable parameter list"""
        with pytest.raises(ConfigurationError):
            run_sensitivity(tiny_config, "step2_lr", [0.1])

    def test_failure_is_recorded(self, tiny_config, mocker):
        """Test failure.json when training diverges"""
        mocker.patch("src.harness.train_step1", side_effect=DivergenceError("loss exploded", step=3))
        with pytest.raises(DivergenceError):
            run_experiment(tiny_config)
        path = os.path.join(experiment_dir(tiny_config), f"seed-{tiny_config.seed}", "failure.json")
        with open(path, encoding='utf-8') as f:
            failure = json.load(f)
        assert failure["stage"] == "step1"
        assert failure["error_type"] == "DivergenceError"
        assert failure["step"] == 3

    def test_step1_then_step2_then_eval(self, tiny_config):
        """Test the split workflow through checkpoints"""
        step1_dir = run_step1(tiny_config)
        checkpoint = os.path.join(step1_dir, f"seed-{tiny_config.seed}", "step1.pt")
        assert os.path.exists(checkpoint)
        assert not os.path.exists(os.path.join(step1_dir, f"seed-{tiny_config.seed}", "step2.pt"))

        run_dir = run_step2(tiny_config, checkpoint)
        summary = read_summary_json(run_dir)
        assert summary["second_step_mode"] == "bort2_full"

        result = evaluate_checkpoint(os.path.join(run_dir, "step2.pt"))
        assert result.accuracy == pytest.approx(summary["final_accuracy"])
        assert os.path.exists(os.path.join(run_dir, "confusion_eval_second_step.json"))

    def test_step2_needs_a_second_step(self, tiny_config):
        """Test that step2 refuses mode none"""
        checkpoint = os.path.join(run_step1(tiny_config), f"seed-{tiny_config.seed}", "step1.pt")
        with pytest.raises(ConfigurationError):
            run_step2(tiny_config.model_copy(update={"second_step_mode": SecondStepMode.NONE}), checkpoint)


class TestHelpers:
    def test_aggregate_without_accuracy(self):
        """Test aggregation when the target had no labels"""
        runs = [RunSummary(name="r", seed=s, config_hash="h", second_step_mode="none") for s in (1, 2)]
        sweep = aggregate_runs("r", "h", runs)
        assert np.isnan(sweep.mean_accuracy)
        assert sweep.mean_first_step_accuracy is None

    def test_setup_logging_writes_process_log(self, tmp_path):
        """Test the console and process-log handlers are added once"""
        root = setup_logging("DEBUG", str(tmp_path))
        setup_logging("DEBUG", str(tmp_path))
        tagged = [h for h in root.handlers if getattr(h, "_bort2_process_log", False)]
        assert len(tagged) == 1
        logging.getLogger("src.test").info("hello")
        tagged[0].flush()
        with open(tmp_path / PROCESS_LOG, encoding='utf-8') as f:
            assert "src.test - INFO - hello" in f.read()
