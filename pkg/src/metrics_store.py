"""
Metrics persistence
Appends one JSON record per training step to a run's metrics.jsonl and writes summaries
"""

import json
import logging
import os
import time
from typing import Dict, List, Optional

from pydantic import BaseModel, ValidationError

from src.errors import ContractError, MissingMetricError
from src.models import MetricsRecord

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_JSON = "summary.json"
SUMMARY_TXT = "summary.txt"


class MetricsStore:
    """Append-only metric stream of one run; steps never decrease within a stage"""

    def __init__(self, run_dir: str, metrics_file: str = METRICS_FILE):
        self.run_dir = run_dir
        self.metrics_file = os.path.join(run_dir, metrics_file)
        os.makedirs(run_dir, exist_ok=True)
        self._opened_at = time.monotonic()
        self._last_step: Dict[str, int] = {}
        for record in self._load_records():
            self._last_step[record.stage] = max(self._last_step.get(record.stage, 0), record.step)

    def _load_records(self) -> List[MetricsRecord]:
        """Load records from file, or nothing if it does not exist yet"""
        if not os.path.exists(self.metrics_file):
            return []
        records = []
        with open(self.metrics_file, 'r', encoding='utf-8') as f:
            for line_number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(MetricsRecord.model_validate_json(line))
                except ValidationError as e:
                    logger.error(f"Skipping malformed metrics line {line_number} in {self.metrics_file}: {e}")
        return records

    def log(self, stage: str, step: int, epoch: int, phase: Optional[str], metrics: Dict[str, float]) -> MetricsRecord:
        """Append one record"""
        last = self._last_step.get(stage)
        if last is not None and step < last:
            raise ContractError(f"metrics step went backwards in stage '{stage}': {step} < {last}")
        record = MetricsRecord(step=step, epoch=epoch, stage=stage, phase=phase,
                               metrics={k: float(v) for k, v in metrics.items()},
                               wall_time=time.monotonic() - self._opened_at)
        with open(self.metrics_file, 'a', encoding='utf-8') as f:
            f.write(record.model_dump_json() + "\n")
        self._last_step[stage] = step
        return record

    def records(self, stage: Optional[str] = None) -> List[MetricsRecord]:
        records = self._load_records()
        return [r for r in records if stage is None or r.stage == stage]

    def series(self, name: str, stage: Optional[str] = None) -> List[tuple]:
        """(step, value) pairs of one named metric"""
        return [(r.step, r.metrics[name]) for r in self.records(stage) if name in r.metrics]


def read_metric_series(run_dir: str, name: str, stage: Optional[str] = None) -> List[tuple]:
    """Series of a metric from an existing run, raising a named error when it is absent"""
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    if not os.path.exists(metrics_path):
        raise MissingMetricError(f"{run_dir} has no {METRICS_FILE}")
    series = MetricsStore(run_dir).series(name, stage)
    if not series:
        raise MissingMetricError(f"metric '{name}' not found in {metrics_path}")
    return series


def write_summary(run_dir: str, summary: BaseModel, table: str) -> str:
    """Write summary.json (machine-readable) and summary.txt (rendered table)"""
    os.makedirs(run_dir, exist_ok=True)
    json_path = os.path.join(run_dir, SUMMARY_JSON)
    with open(json_path, 'w', encoding='utf-8') as f:
        f.write(summary.model_dump_json(indent=2))
    with open(os.path.join(run_dir, SUMMARY_TXT), 'w', encoding='utf-8') as f:
        f.write(table.rstrip() + "\n")
    logger.debug(f"Saved summary to {json_path}")
    return json_path


def read_summary_json(run_dir: str) -> dict:
    path = os.path.join(run_dir, SUMMARY_JSON)
    if not os.path.exists(path):
        raise MissingMetricError(f"{run_dir} has no {SUMMARY_JSON}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
