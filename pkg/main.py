#!/usr/bin/env python3

import argparse
import os
import sys

from config.settings import Settings
from src.config_file import config_hash, load_experiment_config
from src.harness import (ABLATION_LABELS, ABLATION_MODES, SENSITIVITY_PARAMETERS, evaluate_checkpoint,
                         run_ablation, run_experiment, run_sensitivity, run_step1, run_step2,
                         setup_logging)
from src.models import ExperimentConfig
from src.plotting import PLOT_KINDS, plot_all, plot_curves

DEFAULT_SENSITIVITY = {
    "loss_weight_lambda": [0.001, 0.01, 0.1, 1.0],
    "margin_m": [2.0, 4.0, 8.0, 16.0, 32.0],
}
SWEEP_KINDS = ("seeds", "ablation", "sensitivity-lambda", "sensitivity-margin")


def _add_config_arguments(cmd):
    """``--config`` plus one ``--key value`` flag per experiment-config field"""
    cmd.add_argument('--config', type=str, help='Flat KEY=value experiment config file')
    group = cmd.add_argument_group('config overrides')
    for name, field in ExperimentConfig.model_fields.items():
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, type=str, default=None,
                           help=field.description or f"override '{name}'")


def _load_config(args) -> ExperimentConfig:
    overrides = {name: getattr(args, name) for name in ExperimentConfig.model_fields
                 if getattr(args, name, None) is not None}
    return load_experiment_config(args.config, overrides)


def main():
    parser = argparse.ArgumentParser(description="Two-step noise-robust multi-source domain adaptation")
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    step1_cmd = subparsers.add_parser('step1', help='Train the labeling function only')
    _add_config_arguments(step1_cmd)

    step2_cmd = subparsers.add_parser('step2', help='Run the second step from a labeling-function checkpoint')
    step2_cmd.add_argument('checkpoint', type=str, help='Path to a step1.pt checkpoint')
    _add_config_arguments(step2_cmd)

    run_cmd = subparsers.add_parser('run', help='Run both steps for every configured seed')
    _add_config_arguments(run_cmd)

    eval_cmd = subparsers.add_parser('eval', help='Evaluate a checkpoint on its target test split')
    eval_cmd.add_argument('checkpoint', type=str, help='Path to a step1.pt or step2.pt checkpoint')

    sweep_cmd = subparsers.add_parser('sweep', help='Seed sweep, ablation or sensitivity sweep')
    sweep_cmd.add_argument('--kind', choices=SWEEP_KINDS, default='seeds', help='Which sweep to run')
    sweep_cmd.add_argument('--values', type=str, help='Comma-separated values for a sensitivity sweep')
    _add_config_arguments(sweep_cmd)

    plot_cmd = subparsers.add_parser('plot', help='Render figures of a run directory')
    plot_cmd.add_argument('run_dir', type=str, help='Run or sweep directory')
    plot_cmd.add_argument('--which', choices=PLOT_KINDS + ('all',), default='all', help='Figure to render')

    config_cmd = subparsers.add_parser('validate-config', help='Validate settings and an experiment config')
    _add_config_arguments(config_cmd)

    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        return

    try:
        setup_logging()
        if args.command == 'validate-config':
            validate_config(args)
            return

        if args.command == 'step1':
            exp_dir = run_step1(_load_config(args))
            print(f"\n[RESULT] First step finished: {exp_dir}")

        elif args.command == 'step2':
            run_dir = run_step2(_load_config(args), args.checkpoint)
            print_summary_file(run_dir)

        elif args.command == 'run':
            exp_dir = run_experiment(_load_config(args))
            print(f"\n[RESULT] Experiment finished: {exp_dir}")

        elif args.command == 'eval':
            result = evaluate_checkpoint(args.checkpoint)
            print(f"\n[RESULT] Target accuracy: {100.0 * result.accuracy:.2f}% on {result.num_samples} samples")
            for c, accuracy in enumerate(result.per_class_accuracy):
                print(f"  class {c}: {'n/a' if accuracy is None else f'{100.0 * accuracy:.2f}%'}")

        elif args.command == 'sweep':
            run_sweep(_load_config(args), args.kind, args.values)

        elif args.command == 'plot':
            paths = plot_all(args.run_dir) if args.which == 'all' else [plot_curves(args.run_dir, args.which)]
            print(f"\n[RESULT] {len(paths)} figure(s) written")
            for path in paths:
                print(f"  - {path}")

    except Exception as e:
        print(f"Error: {str(e)}", file=sys.stderr)
        sys.exit(1)


def run_sweep(config: ExperimentConfig, kind: str, raw_values):
    """Dispatch one of the sweep kinds and print its table"""
    if kind == 'seeds':
        exp_dir = run_experiment(config)
        print_summary_file(exp_dir)
        return

    if kind == 'ablation':
        exp_dir, sweeps = run_ablation(config)
        print(f"\n{'='*60}")
        print(f"ABLATION RESULTS ({exp_dir})")
        print(f"{'='*60}")
        for number, mode in enumerate(ABLATION_MODES, 1):
            print(f"#{number} {ABLATION_LABELS[mode]:<40}{sweeps[mode.value].formatted():>14}")
        return

    parameter = SENSITIVITY_PARAMETERS[0] if kind == 'sensitivity-lambda' else SENSITIVITY_PARAMETERS[1]
    values = [float(v) for v in raw_values.split(",")] if raw_values else DEFAULT_SENSITIVITY[parameter]
    exp_dir, report = run_sensitivity(config, parameter, values)
    print(f"\n{'='*60}")
    print(f"SENSITIVITY OF {parameter} ({exp_dir})")
    print(f"{'='*60}")
    for row in report["rows"]:
        print(f"  {row['value']:<10g}{100.0 * row['mean_accuracy']:.2f}±{100.0 * row['std_accuracy']:.2f}")
    print(f"Spread of mean accuracy: {100.0 * report['spread']:.2f} points")


def print_summary_file(run_dir: str):
    path = os.path.join(run_dir, "summary.txt")
    if os.path.exists(path):
        with open(path, 'r', encoding='utf-8') as f:
            print(f.read())
    else:
        print(f"\n[RESULT] Finished: {run_dir}")


def validate_config(args):
    """Validate process settings and, when given, the experiment config"""
    try:
        Settings.validate()
        print("✅ Settings are valid")
        Settings.print_current_config()
        config = _load_config(args)
        print(f"✅ Experiment config '{config.name}' is valid (hash {config_hash(config)[:8]})")
        print(f"Seeds: {config.resolved_seeds()}")
        print(f"Second step: {config.second_step_mode.value}")
    except ValueError as e:
        print(f"❌ Configuration error: {str(e)}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
