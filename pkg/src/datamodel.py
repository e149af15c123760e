"""
Multi-domain datasets: in-memory representation, ingestion from disk, the synthetic
domain-shift generator, per-domain batch iteration and held-out splitting.

Domain ids follow one convention everywhere: source domains take ids ``0..K-1`` in
lexicographic order of their names, and the target domain takes id ``K``. Target labels
are kept in an evaluation-only store and never returned by training accessors.
"""

import logging
import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field, ValidationError

from src.errors import ConfigurationError, ContractError, IngestionError
from src.models import ShiftKind, SyntheticShiftConfig

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
ARRAY_EXTENSIONS = (".npy",)


@dataclass(frozen=True)
class DomainSample:
    """One input with its (optional) label and domain identity"""
    input: np.ndarray
    label: Optional[int]
    domain_id: int


@dataclass
class MultiDomainBatch:
    """Equal-sized mini-batches, one entry per participating domain.

    ``per_domain[i]`` is ``(inputs, labels)`` for ``domain_ids[i]``; labels are ``None`` for
    the target domain. ``indices`` records which dataset rows were drawn.
    """
    per_domain: List[Tuple[torch.Tensor, Optional[torch.Tensor]]]
    domain_ids: List[int]
    target_id: int
    indices: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.per_domain) != len(self.domain_ids):
            raise ContractError("per_domain and domain_ids must be parallel lists")
        if len(set(self.domain_ids)) != len(self.domain_ids):
            raise ContractError(f"duplicate domain in batch: {self.domain_ids}")
        for (inputs, labels), domain_id in zip(self.per_domain, self.domain_ids):
            if domain_id != self.target_id and labels is None:
                raise ContractError(f"source domain {domain_id} entry carries no labels")

    @property
    def source_entries(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        return [entry for entry, d in zip(self.per_domain, self.domain_ids) if d != self.target_id]

    @property
    def source_domain_ids(self) -> List[int]:
        return [d for d in self.domain_ids if d != self.target_id]

    @property
    def has_target(self) -> bool:
        return self.target_id in self.domain_ids

    @property
    def target_inputs(self) -> torch.Tensor:
        if not self.has_target:
            raise ContractError("batch has no target entry")
        return self.per_domain[self.domain_ids.index(self.target_id)][0]

    @property
    def batch_size(self) -> int:
        return int(self.per_domain[0][0].shape[0])


class MultiDomainDataset:
    """Immutable multi-domain dataset with partitioned training and evaluation views"""

    def __init__(self,
                 domain_names: Sequence[str],
                 class_names: Sequence[str],
                 inputs: Sequence[np.ndarray],
                 source_labels: Sequence[np.ndarray],
                 target_eval_labels: Optional[np.ndarray] = None,
                 noisy_masks: Optional[Sequence[Optional[np.ndarray]]] = None):
        if len(inputs) != len(domain_names) or len(source_labels) != len(domain_names) - 1:
            raise ContractError("inputs need one entry per domain and labels one per source domain")
        shapes = {tuple(x.shape[1:]) for x in inputs}
        if len(shapes) != 1:
            raise IngestionError(f"input shapes differ across domains: {sorted(shapes)}")

        self.domain_names = list(domain_names)
        self.class_names = list(class_names)
        self._inputs = [self._freeze(np.asarray(x, dtype=np.float32)) for x in inputs]
        self._labels = [self._freeze(np.asarray(y, dtype=np.int64)) for y in source_labels]
        for k, (x, y) in enumerate(zip(self._inputs, self._labels)):
            if len(x) != len(y):
                raise ContractError(f"domain {self.domain_names[k]} has {len(x)} inputs but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ContractError(f"domain {self.domain_names[k]} has labels outside [0, {self.num_classes})")
        self._target_eval_labels = None
        if target_eval_labels is not None:
            if len(target_eval_labels) != len(self._inputs[-1]):
                raise ContractError("target evaluation labels do not match the target inputs")
            self._target_eval_labels = self._freeze(np.asarray(target_eval_labels, dtype=np.int64))
        self._noisy_masks = None
        if noisy_masks is not None:
            self._noisy_masks = [None if m is None else self._freeze(np.asarray(m, dtype=bool)) for m in noisy_masks]

    @staticmethod
    def _freeze(array: np.ndarray) -> np.ndarray:
        array = np.array(array, copy=True)
        array.setflags(write=False)
        return array

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def num_source_domains(self) -> int:
        return self.num_domains - 1

    @property
    def target_id(self) -> int:
        return self.num_domains - 1

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self._inputs[0].shape[1:])

    @property
    def has_target_eval_labels(self) -> bool:
        return self._target_eval_labels is not None

    def domain_size(self, domain_id: int) -> int:
        return len(self._inputs[domain_id])

    # -- training view ----------------------------------------------------------------

    def training_arrays(self, domain_id: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Inputs and labels as seen by training code; target labels are never returned"""
        labels = None if domain_id == self.target_id else self._labels[domain_id]
        return self._inputs[domain_id], labels

    def sample(self, domain_id: int, index: int) -> DomainSample:
        inputs, labels = self.training_arrays(domain_id)
        return DomainSample(input=inputs[index],
                            label=None if labels is None else int(labels[index]),
                            domain_id=domain_id)

    # -- evaluation view ---------------------------------------------------------------

    def evaluation_arrays(self, domain_id: int) -> Tuple[np.ndarray, np.ndarray]:
        """Inputs and ground-truth labels, including the target domain when they are known"""
        if domain_id == self.target_id:
            if self._target_eval_labels is None:
                raise ContractError("target domain has no evaluation labels")
            return self._inputs[domain_id], self._target_eval_labels
        return self._inputs[domain_id], self._labels[domain_id]

    def evaluation_sample(self, domain_id: int, index: int) -> DomainSample:
        inputs, labels = self.evaluation_arrays(domain_id)
        return DomainSample(input=inputs[index], label=int(labels[index]), domain_id=domain_id)

    def noisy_mask(self, domain_id: int) -> Optional[np.ndarray]:
        """Which source labels were deliberately corrupted by the generator"""
        if self._noisy_masks is None:
            return None
        return self._noisy_masks[domain_id]

    def subset(self, indices: Sequence[np.ndarray]) -> "MultiDomainDataset":
        """A new dataset keeping ``indices[k]`` rows of every domain ``k``"""
        inputs = [self._inputs[k][idx] for k, idx in enumerate(indices)]
        labels = [self._labels[k][idx] for k, idx in enumerate(indices[:-1])]
        eval_labels = None if self._target_eval_labels is None else self._target_eval_labels[indices[-1]]
        masks = None
        if self._noisy_masks is not None:
            masks = [None if m is None else m[idx] for m, idx in zip(self._noisy_masks, indices)]
        return MultiDomainDataset(self.domain_names, self.class_names, inputs, labels, eval_labels, masks)

    def __repr__(self) -> str:
        sizes = ", ".join(f"{n}={self.domain_size(k)}" for k, n in enumerate(self.domain_names))
        return f"MultiDomainDataset(classes={self.num_classes}, {sizes})"


# -- synthetic generator --------------------------------------------------------------

def _class_means(cfg: SyntheticShiftConfig) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(cfg.num_classes) / cfg.num_classes
    means = np.zeros((cfg.num_classes, cfg.feature_dim))
    means[:, 0] = cfg.class_radius * np.cos(angles)
    means[:, 1] = cfg.class_radius * np.sin(angles)
    return means


def _apply_shift(means: np.ndarray, noise: np.ndarray, kind: ShiftKind, magnitude: float) -> np.ndarray:
    if kind == ShiftKind.ROTATION:
        x = means + noise
        theta = np.deg2rad(magnitude)
        rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        x[:, :2] = x[:, :2] @ rotation.T
        return x
    if kind == ShiftKind.TRANSLATION:
        direction = np.ones(means.shape[1]) / np.sqrt(means.shape[1])
        return means + noise + magnitude * direction
    if kind == ShiftKind.COVARIANCE_SCALE:
        if 1.0 + magnitude <= 0.0:
            raise ConfigurationError(f"covariance-scale magnitude must exceed -1, got {magnitude}")
        return means + (1.0 + magnitude) * noise
    raise ConfigurationError(f"unknown shift kind: {kind}")


def generate_synthetic_msda(cfg) -> MultiDomainDataset:
    """Gaussian class blobs shared by every domain, each domain moved by its own shift.

    Class means sit on a circle of radius ``class_radius`` in the first two coordinates;
    all remaining coordinates carry only noise. Labels are balanced within each domain.
    Deterministic for a fixed ``cfg.seed``.
    """
    if not isinstance(cfg, SyntheticShiftConfig):
        try:
            cfg = SyntheticShiftConfig.model_validate(cfg)
        except ValidationError as e:
            raise ConfigurationError(f"invalid synthetic dataset config: {e}") from e

    num_domains = cfg.num_source_domains + 1
    domain_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(num_domains)]
    means = _class_means(cfg)

    inputs, labels, masks = [], [], []
    for k, rng in enumerate(domain_rngs):
        y = rng.permutation(np.arange(cfg.samples_per_domain) % cfg.num_classes)
        noise = rng.normal(0.0, cfg.noise_std, size=(cfg.samples_per_domain, cfg.feature_dim))
        x = _apply_shift(means[y], noise, cfg.shift_kind, cfg.shift_magnitudes[k])
        mask = np.zeros(cfg.samples_per_domain, dtype=bool)
        is_source = k < cfg.num_source_domains
        if is_source and cfg.label_noise_rate > 0.0:
            mask = rng.random(cfg.samples_per_domain) < cfg.label_noise_rate
            offsets = rng.integers(1, cfg.num_classes, size=cfg.samples_per_domain)
            y = np.where(mask, (y + offsets) % cfg.num_classes, y)
        inputs.append(x.astype(np.float32))
        labels.append(y)
        masks.append(mask)

    names = [f"source_{k}" for k in range(cfg.num_source_domains)] + ["target"]
    classes = [f"class_{c}" for c in range(cfg.num_classes)]
    dataset = MultiDomainDataset(names, classes, inputs, labels[:-1],
                                 target_eval_labels=labels[-1], noisy_masks=masks)
    logger.debug("Generated synthetic dataset %r with %s shifts %s", dataset, cfg.shift_kind.value,
                 cfg.shift_magnitudes)
    return dataset


# -- disk ingestion --------------------------------------------------------------------

class DatasetLayout(BaseModel):
    """How a dataset is laid out on disk.

    Without a manifest, ``root/<domain>/<class>/<file>`` holds source domains and
    ``root/<target_domain>/<file>`` (or ``.../<class>/<file>`` for evaluation labels)
    holds the target. Source domains default to every other directory, sorted.
    """
    target_domain: str
    source_domains: Optional[List[str]] = None
    manifest_path: Optional[str] = None
    image_size: Optional[int] = Field(None, gt=0)
    grayscale: bool = False


def _read_file(path: Path, layout: DatasetLayout) -> np.ndarray:
    try:
        if path.suffix.lower() in ARRAY_EXTENSIONS:
            return np.load(path).astype(np.float32)
        with Image.open(path) as image:
            image = image.convert("L" if layout.grayscale else "RGB")
            if layout.image_size:
                image = image.resize((layout.image_size, layout.image_size))
            array = np.asarray(image, dtype=np.float32) / 255.0
        return array[None] if array.ndim == 2 else array.transpose(2, 0, 1)
    except (OSError, ValueError, UnidentifiedImageError) as e:
        raise IngestionError(f"cannot read {path}: {e}") from e


def _list_files(directory: Path) -> List[Path]:
    extensions = IMAGE_EXTENSIONS + ARRAY_EXTENSIONS
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in extensions)


def _stack(arrays: List[np.ndarray], domain: str) -> np.ndarray:
    if not arrays:
        raise IngestionError(f"domain '{domain}' has no readable samples")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise IngestionError(f"domain '{domain}' mixes input shapes {sorted(shapes)}; set image_size")
    return np.stack(arrays)


def _load_manifest(manifest_path: Path) -> List[Dict[str, str]]:
    """Manifest lines look like ``path=art/dog/1.png domain=art class=dog``"""
    records = []
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IngestionError(f"cannot read manifest {manifest_path}: {e}") from e
    for line_number, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        record = {}
        for token in shlex.split(line):
            if "=" not in token:
                raise IngestionError(f"{manifest_path}:{line_number}: expected key=value, got '{token}'")
            key, value = token.split("=", 1)
            record[key.strip()] = value.strip()
        if "path" not in record or "domain" not in record:
            raise IngestionError(f"{manifest_path}:{line_number}: records need 'path' and 'domain'")
        records.append(record)
    return records


def _collect_from_directories(root: Path, layout: DatasetLayout) -> Dict[str, List[Tuple[Path, Optional[str]]]]:
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    domain_dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if layout.target_domain not in domain_dirs:
        raise IngestionError(f"target domain '{layout.target_domain}' not found under {root}")
    sources = layout.source_domains or [d for d in domain_dirs if d != layout.target_domain]

    entries: Dict[str, List[Tuple[Path, Optional[str]]]] = {}
    for domain in list(sources) + [layout.target_domain]:
        domain_dir = root / domain
        if not domain_dir.is_dir():
            raise IngestionError(f"domain directory {domain_dir} does not exist")
        class_dirs = sorted(p for p in domain_dir.iterdir() if p.is_dir())
        if class_dirs:
            entries[domain] = [(f, c.name) for c in class_dirs for f in _list_files(c)]
        elif domain == layout.target_domain:
            entries[domain] = [(f, None) for f in _list_files(domain_dir)]
        else:
            raise IngestionError(f"source domain '{domain}' has no class directories")
    return entries


def _collect_from_manifest(root: Path, layout: DatasetLayout) -> Dict[str, List[Tuple[Path, Optional[str]]]]:
    entries: Dict[str, List[Tuple[Path, Optional[str]]]] = {}
    for record in _load_manifest(Path(layout.manifest_path)):
        path = Path(record["path"])
        if not path.is_absolute():
            path = root / path
        entries.setdefault(record["domain"], []).append((path, record.get("class")))
    if layout.target_domain not in entries:
        raise IngestionError(f"manifest has no records for target domain '{layout.target_domain}'")
    if layout.source_domains:
        entries = {d: e for d, e in entries.items() if d in layout.source_domains or d == layout.target_domain}
    return entries


def load_multi_domain_dataset(root_path, layout) -> MultiDomainDataset:
    """Read a multi-domain dataset from disk.

    Source domains are ordered lexicographically and take ids ``0..K-1``; the target
    takes id ``K``. Class indices follow the sorted class-directory names, which must be
    identical across source domains. Labeled target sub-directories feed the
    evaluation-only label store.
    """
    if not isinstance(layout, DatasetLayout):
        try:
            layout = DatasetLayout.model_validate(layout)
        except ValidationError as e:
            raise ConfigurationError(f"invalid dataset layout: {e}") from e
    root = Path(root_path)
    if layout.manifest_path:
        entries = _collect_from_manifest(root, layout)
    else:
        entries = _collect_from_directories(root, layout)

    target = layout.target_domain
    sources = sorted(d for d in entries if d != target)
    if not sources:
        raise IngestionError("dataset needs at least one source domain")

    reference_classes = None
    for domain in sources:
        missing = [str(p) for p, c in entries[domain] if c is None]
        if missing:
            raise IngestionError(f"source domain '{domain}' has unlabeled samples, e.g. {missing[0]}")
        classes = sorted({c for _, c in entries[domain]})
        if reference_classes is None:
            reference_classes = classes
        elif classes != reference_classes:
            raise IngestionError(
                f"source domain '{domain}' has classes {classes}, expected {reference_classes} "
                f"(from '{sources[0]}')")
    class_index = {name: i for i, name in enumerate(reference_classes)}

    inputs, labels = [], []
    for domain in sources:
        inputs.append(_stack([_read_file(p, layout) for p, _ in entries[domain]], domain))
        labels.append(np.array([class_index[c] for _, c in entries[domain]], dtype=np.int64))

    target_entries = entries[target]
    inputs.append(_stack([_read_file(p, layout) for p, _ in target_entries], target))
    target_classes = [c for _, c in target_entries]
    eval_labels = None
    if all(c is not None for c in target_classes):
        unknown = sorted({c for c in target_classes if c not in class_index})
        if unknown:
            raise IngestionError(f"target domain '{target}' has classes unknown to the sources: {unknown}")
        eval_labels = np.array([class_index[c] for c in target_classes], dtype=np.int64)
    elif any(c is not None for c in target_classes):
        raise IngestionError(f"target domain '{target}' mixes labeled and unlabeled samples")

    dataset = MultiDomainDataset(sources + [target], reference_classes, inputs, labels, eval_labels)
    logger.info("Loaded %r from %s", dataset, root)
    return dataset


# -- batch iteration ------------------------------------------------------------------

class MultiDomainBatchIterator:
    """Endless stream of MultiDomainBatch objects with independent per-domain shuffles.

    Every domain walks through a fresh permutation of its rows; when a permutation is
    exhausted mid-batch the batch is completed from the next one. ``epoch()`` yields
    ``batches_per_epoch`` batches. Single consumer only.
    """

    def __init__(self, dataset: MultiDomainDataset, batch_size: int, seed: int,
                 domain_ids: Optional[Sequence[int]] = None):
        if batch_size <= 0:
            raise ConfigurationError(f"per-domain batch size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.domain_ids = list(range(dataset.num_domains)) if domain_ids is None else list(domain_ids)
        for d in self.domain_ids:
            if dataset.domain_size(d) == 0:
                raise ConfigurationError(f"domain {dataset.domain_names[d]} is empty")
        # one stream per dataset domain, so selecting a subset of domains keeps each stream
        child_seeds = np.random.SeedSequence(seed).spawn(dataset.num_domains)
        self._rngs = {d: np.random.default_rng(child_seeds[d]) for d in self.domain_ids}
        self._orders = {d: np.empty(0, dtype=np.int64) for d in self.domain_ids}
        self._positions = {d: 0 for d in self.domain_ids}

    @property
    def batches_per_epoch(self) -> int:
        largest = max(self.dataset.domain_size(d) for d in self.domain_ids)
        return math.ceil(largest / self.batch_size)

    def _draw(self, domain_id: int) -> np.ndarray:
        drawn = []
        needed = self.batch_size
        while needed > 0:
            order, position = self._orders[domain_id], self._positions[domain_id]
            if position == len(order):
                order = self._rngs[domain_id].permutation(self.dataset.domain_size(domain_id))
                self._orders[domain_id], position = order, 0
            take = min(needed, len(order) - position)
            drawn.append(order[position:position + take])
            self._positions[domain_id] = position + take
            needed -= take
        return np.concatenate(drawn)

    def __iter__(self) -> Iterator[MultiDomainBatch]:
        return self

    def __next__(self) -> MultiDomainBatch:
        per_domain, indices = [], []
        for d in self.domain_ids:
            idx = self._draw(d)
            inputs, labels = self.dataset.training_arrays(d)
            per_domain.append((torch.from_numpy(inputs[idx]),
                               None if labels is None else torch.from_numpy(labels[idx])))
            indices.append(idx)
        return MultiDomainBatch(per_domain, list(self.domain_ids), self.dataset.target_id, indices)

    def epoch(self) -> Iterator[MultiDomainBatch]:
        for _ in range(self.batches_per_epoch):
            yield next(self)


def iterate_batches(dataset: MultiDomainDataset, per_domain_batch_size: int, seed: int,
                    domain_ids: Optional[Sequence[int]] = None) -> MultiDomainBatchIterator:
    return MultiDomainBatchIterator(dataset, per_domain_batch_size, seed, domain_ids)


# -- splitting -------------------------------------------------------------------------

def _split_counts(size: int, fraction: float) -> int:
    return int(math.floor(fraction * size + 0.5))


def split_held_out(dataset: MultiDomainDataset, fraction: float, seed: int
                   ) -> Tuple[MultiDomainDataset, MultiDomainDataset]:
    """Split every domain into disjoint (train, validation) parts.

    ``fraction`` of each domain goes to the validation part, stratified by class where
    training labels exist. The target domain is split without looking at its hidden
    labels. Every class (or every unlabeled domain) must land in both parts.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"held-out fraction must lie in (0, 1), got {fraction}")

    child_seeds = np.random.SeedSequence(seed).spawn(dataset.num_domains)
    train_indices, val_indices = [], []
    for d in range(dataset.num_domains):
        rng = np.random.default_rng(child_seeds[d])
        _, labels = dataset.training_arrays(d)
        groups = [np.arange(dataset.domain_size(d))] if labels is None else \
            [np.flatnonzero(labels == c) for c in np.unique(labels)]
        train_part, val_part = [], []
        for group in groups:
            n_val = _split_counts(len(group), fraction)
            if n_val == 0 or n_val == len(group):
                raise ConfigurationError(
                    f"fraction {fraction} is below one-sample granularity for domain "
                    f"'{dataset.domain_names[d]}' (group of {len(group)} samples)")
            shuffled = rng.permutation(group)
            val_part.append(shuffled[:n_val])
            train_part.append(shuffled[n_val:])
        train_indices.append(np.sort(np.concatenate(train_part)))
        val_indices.append(np.sort(np.concatenate(val_part)))

    return dataset.subset(train_indices), dataset.subset(val_indices)
