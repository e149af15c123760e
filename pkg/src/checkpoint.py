"""
Versioned checkpoints for the labeling function and the second-step state
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import torch

from src.bilevel import BilevelState, build_bilevel_state
from src.config_file import config_hash
from src.errors import CheckpointError
from src.first_step import LabelingFunctionState, build_labeling_state
from src.models import ExperimentConfig, Phase
from src.pseudolabel import ThresholdState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KIND_LABELING = "labeling"
KIND_SECOND_STEP = "second_step"


def _atomic_save(payload: Dict[str, Any], path: str) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + '.tmp')
    torch.save(payload, temp_path)
    os.replace(temp_path, path)
    logger.info(f"Checkpoint saved: {path}")
    return str(path)


def save_checkpoint(path: str, kind: str, config: ExperimentConfig, payload: Dict[str, Any]) -> str:
    """Wrap ``payload`` with the format version, kind, config and its hash"""
    data = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        **payload,
    }
    return _atomic_save(data, path)


def load_checkpoint(path: str, kind: Optional[str] = None, expected_hash: Optional[str] = None) -> Dict[str, Any]:
    """Load and verify a checkpoint; any mismatch raises CheckpointError"""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    if kind is not None and data.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a '{kind}' checkpoint, found '{data.get('kind')}'")
    try:
        config = ExperimentConfig.model_validate(data["config"])
    except Exception as e:
        raise CheckpointError(f"{path}: stored config is invalid: {e}") from e
    if config_hash(config) != data.get("config_hash"):
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    if expected_hash is not None and data["config_hash"] != expected_hash:
        raise CheckpointError(f"{path}: checkpoint belongs to config {data['config_hash'][:8]}, "
                              f"expected {expected_hash[:8]}")
    data["config"] = config
    return data


def _labeling_payload(state: LabelingFunctionState) -> Dict[str, Any]:
    return {
        "network": state.network.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": None if state.scheduler is None else state.scheduler.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "loss_history": list(state.loss_history),
    }


def _restore_labeling(data: Dict[str, Any], config: ExperimentConfig, input_shape: Sequence[int],
                      num_classes: int, steps_per_epoch: int) -> LabelingFunctionState:
    state = build_labeling_state(config, input_shape, num_classes, steps_per_epoch)
    state.network.load_state_dict(data["network"])
    state.optimizer.load_state_dict(data["optimizer"])
    if state.scheduler is not None and data.get("scheduler") is not None:
        state.scheduler.load_state_dict(data["scheduler"])
    state.epoch, state.step = data["epoch"], data["step"]
    state.loss_history = list(data["loss_history"])
    return state


def save_labeling_checkpoint(path: str, state: LabelingFunctionState, config: ExperimentConfig,
                             input_shape: Sequence[int], steps_per_epoch: int = 1) -> str:
    payload = _labeling_payload(state)
    payload.update({"input_shape": list(input_shape), "num_classes": state.network.num_classes,
                    "steps_per_epoch": steps_per_epoch})
    return save_checkpoint(path, KIND_LABELING, config, payload)


def load_labeling_checkpoint(path: str, expected_hash: Optional[str] = None
                             ) -> Tuple[LabelingFunctionState, ExperimentConfig]:
    data = load_checkpoint(path, KIND_LABELING, expected_hash)
    config = data["config"]
    state = _restore_labeling(data, config, data["input_shape"], data["num_classes"], data["steps_per_epoch"])
    return state, config


def save_second_step_checkpoint(path: str, bstate: BilevelState, config: ExperimentConfig,
                                input_shape: Sequence[int]) -> str:
    target = bstate.target
    payload = {
        "labeling": _labeling_payload(bstate.labeling),
        "input_shape": list(input_shape),
        "num_classes": bstate.labeling.network.num_classes,
        "stochastic": target.network.is_stochastic,
        "target_network": target.network.state_dict(),
        "target_optimizer": target.optimizer.state_dict(),
        "target_epoch": target.epoch,
        "target_step": target.step,
        "target_loss_history": list(target.loss_history),
        "outer_optimizer": bstate.outer_optimizer.state_dict(),
        "threshold": bstate.threshold.snapshot(),
        "phase": bstate.phase.value,
        "bilevel_started_epoch": bstate.bilevel_started_epoch,
        "generator_state": bstate.generator.get_state(),
        "outer_generator_state": bstate.outer_generator.get_state(),
    }
    return save_checkpoint(path, KIND_SECOND_STEP, config, payload)


def load_second_step_checkpoint(path: str, expected_hash: Optional[str] = None
                                ) -> Tuple[BilevelState, ExperimentConfig]:
    """Rebuild a BilevelState that resumes exactly where the saved one stopped"""
    data = load_checkpoint(path, KIND_SECOND_STEP, expected_hash)
    config = data["config"]
    labeling = _restore_labeling(data["labeling"], config, data["input_shape"], data["num_classes"], 1)
    bstate = build_bilevel_state(labeling, config, stochastic=data["stochastic"],
                                 threshold=ThresholdState.from_snapshot(data["threshold"]))
    target = bstate.target
    target.network.load_state_dict(data["target_network"])
    target.optimizer.load_state_dict(data["target_optimizer"])
    target.epoch, target.step = data["target_epoch"], data["target_step"]
    target.loss_history = list(data["target_loss_history"])
    bstate.outer_optimizer.load_state_dict(data["outer_optimizer"])
    bstate.phase = Phase(data["phase"])
    bstate.bilevel_started_epoch = data["bilevel_started_epoch"]
    bstate.generator.set_state(data["generator_state"])
    if "outer_generator_state" in data:
        bstate.outer_generator.set_state(data["outer_generator_state"])
    return bstate, config
