# app/services/data_service.py
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.errors import DataError, OracleAccessError
from app.models import ShiftSpec

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
DOMAIN_COLUMN = "domain"


def _readonly(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if array is not None:
        array.setflags(write=False)
    return array


class DomainDataset:
    """
    Samples of one domain. Public labels are absent on the unlabeled target;
    target labels, when known, live in a sealed field reachable only through
    ``oracle_labels()``.
    """

    def __init__(self, domain_id: str, features: np.ndarray, labels: Optional[np.ndarray] = None,
                 split: str = "train", num_classes: Optional[int] = None,
                 oracle: Optional[np.ndarray] = None):
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2:
            raise DataError(f"{domain_id}: features must be an n x D matrix, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise DataError(f"{domain_id}: features contain non-finite values")
        if split not in ("train", "test"):
            raise DataError(f"{domain_id}: unknown split {split!r}")
        self.domain_id = domain_id
        self.split = split
        self.features = _readonly(features)
        self._labels = _readonly(self._check_labels(labels, features.shape[0], num_classes))
        self._oracle = _readonly(self._check_labels(oracle, features.shape[0], num_classes))
        known = [a for a in (self._labels, self._oracle) if a is not None and a.size]
        inferred = max(int(a.max()) for a in known) + 1 if known else None
        self.num_classes = num_classes if num_classes is not None else inferred

    def _check_labels(self, labels, n: int, num_classes: Optional[int]) -> Optional[np.ndarray]:
        if labels is None:
            return None
        labels = np.array(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DataError(f"{self.domain_id}: expected {n} labels, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise DataError(f"{self.domain_id}: negative label")
        if num_classes is not None and labels.size and labels.max() >= num_classes:
            raise DataError(f"{self.domain_id}: label {int(labels.max())} outside [0, {num_classes})")
        return labels

    @property
    def labels(self) -> Optional[np.ndarray]:
        return self._labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_oracle(self) -> bool:
        return self._oracle is not None

    def oracle_labels(self) -> np.ndarray:
        """Sealed target labels; only the oracle baseline, lambda estimation and evaluation may use them."""
        if self._labels is not None:
            return self._labels
        if self._oracle is None:
            raise OracleAccessError(f"{self.domain_id}: oracle labels are not available for this dataset")
        return self._oracle

    def sealed(self) -> "DomainDataset":
        """Copy with public labels moved into the oracle field (turns a source into a pseudo-target)."""
        return DomainDataset(self.domain_id, self.features, None, self.split, self.num_classes,
                             oracle=self.oracle_labels() if (self._labels is not None or self.has_oracle) else None)

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "DomainDataset":
        index = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            self.domain_id,
            self.features[index],
            None if self._labels is None else self._labels[index],
            split or self.split,
            self.num_classes,
            oracle=None if self._oracle is None else self._oracle[index],
        )

    def __repr__(self) -> str:
        kind = "labeled" if self._labels is not None else "unlabeled"
        return f"DomainDataset({self.domain_id!r}, n={self.n}, D={self.dim}, {kind}, split={self.split})"


class BatchBundle:
    """Per-source labeled mini-batches and a target mini-batch of exactly m rows each."""

    def __init__(self, source_x: List[np.ndarray], source_y: List[np.ndarray], target_x: np.ndarray,
                 target_indices: np.ndarray, source_indices: List[np.ndarray]):
        self.source_x = source_x
        self.source_y = source_y
        self.target_x = target_x
        self.target_indices = target_indices
        self.source_indices = source_indices
        self.augmented_x: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.target_x.shape[0]

    @property
    def num_sources(self) -> int:
        return len(self.source_x)


# --- synthetic generation -----------------------------------------------------

def _rotation(dim: int, degrees: float) -> np.ndarray:
    matrix = np.eye(dim)
    if degrees == 0.0:
        return matrix
    if dim < 2:
        raise DataError("rotations need at least two feature dimensions")
    theta = np.deg2rad(degrees)
    matrix[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    return matrix


def _base_means(spec: ShiftSpec) -> np.ndarray:
    if spec.class_means is not None:
        return np.asarray(spec.class_means, dtype=np.float64)
    means = np.zeros((spec.classes, spec.dim))
    angles = 2.0 * np.pi * np.arange(spec.classes) / spec.classes
    means[:, 0] = spec.mean_radius * np.cos(angles)
    if spec.dim > 1:
        means[:, 1] = spec.mean_radius * np.sin(angles)
    return means


def _covariance_factor(spec: ShiftSpec) -> np.ndarray:
    cov = (np.asarray(spec.class_cov, dtype=np.float64) if spec.class_cov is not None
           else np.eye(spec.dim) * spec.class_std ** 2)
    if not np.allclose(cov, cov.T):
        raise DataError("class covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DataError("class covariance is not positive definite") from None


def _sample_domain(spec: ShiftSpec, means: np.ndarray, factor: np.ndarray, degrees: float,
                   prior: np.ndarray, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.choice(spec.classes, size=n, p=prior)
    rotated = means @ _rotation(spec.dim, degrees).T
    noise = rng.standard_normal((n, spec.dim)) @ factor.T
    return rotated[labels] + noise, labels


def generate_domains(spec: ShiftSpec, seed: int) -> List[DomainDataset]:
    """
    Draw M labeled sources, the unlabeled target (labels sealed as oracle) and,
    when ``spec.test_samples`` > 0, a held-out target test split.

    The result is a pure function of (spec, seed).
    """
    means = _base_means(spec)
    factor = _covariance_factor(spec)
    domains = spec.num_sources + 1
    rotations = spec.rotations or [0.0] * domains
    uniform = [1.0 / spec.classes] * spec.classes
    priors = spec.priors or [uniform] * domains
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(domains + 1)]

    datasets = []
    for j in range(spec.num_sources):
        x, y = _sample_domain(spec, means, factor, rotations[j], np.asarray(priors[j]),
                              spec.samples_per_domain, streams[j])
        datasets.append(DomainDataset(f"source_{j}", x, y, "train", spec.classes))

    x, y = _sample_domain(spec, means, factor, rotations[-1], np.asarray(priors[-1]),
                          spec.samples_per_domain, streams[spec.num_sources])
    datasets.append(DomainDataset("target", x, None, "train", spec.classes, oracle=y))
    if spec.test_samples > 0:
        x, y = _sample_domain(spec, means, factor, rotations[-1], np.asarray(priors[-1]),
                              spec.test_samples, streams[domains])
        datasets.append(DomainDataset("target", x, None, "test", spec.classes, oracle=y))
    logger.info(f"Generated {spec.num_sources} source domains and target with seed {seed}")
    return datasets


def split_domains(datasets: Sequence[DomainDataset]) -> Tuple[List[DomainDataset], DomainDataset,
                                                              Optional[DomainDataset]]:
    """Separate the output of ``generate_domains`` into (sources, target train, target test)."""
    sources = [d for d in datasets if d.domain_id != "target"]
    target = next(d for d in datasets if d.domain_id == "target" and d.split == "train")
    test = next((d for d in datasets if d.domain_id == "target" and d.split == "test"), None)
    return sources, target, test


def select_sources(sources: Sequence[DomainDataset], indices: Optional[Sequence[int]]) -> List[DomainDataset]:
    if indices is None:
        return list(sources)
    if not indices:
        raise DataError("source subset is empty")
    for index in indices:
        if not 0 <= index < len(sources):
            raise DataError(f"source index {index} outside [0, {len(sources)})")
    return [sources[i] for i in indices]


def leave_one_out(sources: Sequence[DomainDataset], held_out: int) -> Tuple[List[DomainDataset], DomainDataset]:
    """Use source ``held_out`` as a pseudo-target: its labels become oracle-only."""
    if len(sources) < 2:
        raise DataError("leave-one-out needs at least two sources")
    remaining = [s for i, s in enumerate(sources) if i != held_out]
    return remaining, sources[held_out].sealed()


# --- CSV ingestion ------------------------------------------------------------

def _parse_frame(frame: pd.DataFrame, path: Union[str, Path], has_labels: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    columns = [c for c in frame.columns if c not in (LABEL_COLUMN, DOMAIN_COLUMN)]
    expected = [f"f{i}" for i in range(len(columns))]
    if columns != expected:
        raise DataError(f"{path}: feature columns must be named {expected[:3]}..., got {columns[:3]}...")
    if has_labels and LABEL_COLUMN not in frame.columns:
        raise DataError(f"{path}: has_labels set but no '{LABEL_COLUMN}' column")
    if frame[columns].isna().any(axis=None):
        row = int(np.flatnonzero(frame[columns].isna().any(axis=1).to_numpy())[0]) + 1
        raise DataError("ragged row (missing fields)", row=row)

    numeric = frame[columns].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=np.float64, na_value=np.nan)).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise DataError(f"non-numeric or non-finite feature value in {path}", row=row)
    # numpy string parsing round-trips %.17g output exactly
    features = frame[columns].to_numpy(dtype=str).astype(np.float64)

    labels = None
    if has_labels:
        raw = pd.to_numeric(frame[LABEL_COLUMN], errors="coerce")
        invalid = raw.isna() | (raw != raw.round())
        if invalid.any():
            row = int(np.flatnonzero(invalid.to_numpy())[0]) + 1
            raise DataError(f"label is not an integer in {path}", row=row)
        labels = raw.to_numpy(dtype=np.int64)
        if labels.min() < 0:
            row = int(np.flatnonzero(labels < 0)[0]) + 1
            raise DataError(f"label out of range in {path}", row=row)
    return features, labels


def _read_frame(path: Union[str, Path]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[], encoding="utf-8",
                            comment="#", skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: ragged rows ({e})") from None
    if frame.empty:
        raise DataError(f"{path}: no data rows")
    return frame


def load_csv(path: Union[str, Path], has_labels: bool, num_classes: Optional[int] = None,
             domain_id: Optional[str] = None, as_oracle: bool = False) -> DomainDataset:
    """
    Load one domain from a CSV file with header f0..f{D-1}[,label][,domain].

    Args:
        path: CSV file
        has_labels: whether a label column must be read
        num_classes: when given, labels must lie in [0, num_classes)
        domain_id: identifier for the dataset (defaults to the file stem)
        as_oracle: store the labels in the sealed oracle field (target files)
    """
    frame = _read_frame(path)
    features, labels = _parse_frame(frame, path, has_labels)
    if labels is not None and num_classes is not None and labels.max() >= num_classes:
        row = int(np.flatnonzero(labels >= num_classes)[0]) + 1
        raise DataError(f"label out of range [0, {num_classes}) in {path}", row=row)
    domain_id = domain_id or Path(path).stem
    if as_oracle:
        return DomainDataset(domain_id, features, None, "train", num_classes, oracle=labels)
    return DomainDataset(domain_id, features, labels, "train", num_classes)


def load_multi_domain_csv(path: Union[str, Path], has_labels: bool,
                          num_classes: Optional[int] = None) -> Dict[str, DomainDataset]:
    """Split a file with a 'domain' column into one dataset per domain, in first-seen order."""
    frame = _read_frame(path)
    if DOMAIN_COLUMN not in frame.columns:
        raise DataError(f"{path}: no '{DOMAIN_COLUMN}' column")
    features, labels = _parse_frame(frame, path, has_labels)
    domains = frame[DOMAIN_COLUMN].to_numpy()
    result: Dict[str, DomainDataset] = {}
    for name in pd.unique(domains):
        mask = domains == name
        result[str(name)] = DomainDataset(str(name), features[mask],
                                          None if labels is None else labels[mask], "train", num_classes)
    return result


def write_csv(dataset: DomainDataset, path: Union[str, Path], include_labels: bool = True) -> Path:
    """Write a dataset in the ingestion contract; target labels are written from the oracle field."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.dim)])
    if include_labels:
        frame[LABEL_COLUMN] = dataset.oracle_labels()
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    logger.info(f"Saved {dataset.n} rows of {dataset.domain_id} to {path}")
    return path


# --- mini-batch sampling ------------------------------------------------------

def _epoch_batch(n: int, m: int, seed: int, stream: int, iteration: int) -> np.ndarray:
    per_epoch = n // m
    epoch, position = divmod(iteration, per_epoch)
    order = np.random.default_rng([seed, stream, epoch]).permutation(n)
    return order[position * m:(position + 1) * m]


def sample_batches(sources: Sequence[DomainDataset], target: DomainDataset, m: int, seed: int,
                   iteration: int) -> BatchBundle:
    """
    Draw one mini-batch of m rows from every source and from the target.

    Each dataset is walked through a fresh permutation per epoch (sampling
    without replacement); the result depends only on (seed, iteration).
    """
    smallest = min([s.n for s in sources] + [target.n])
    if m < 1 or m > smallest:
        raise DataError(f"batch size {m} exceeds the smallest dataset ({smallest} rows)")
    source_x, source_y, source_idx = [], [], []
    for j, source in enumerate(sources):
        if source.labels is None:
            raise DataError(f"{source.domain_id}: source datasets must be labeled")
        idx = _epoch_batch(source.n, m, seed, j, iteration)
        source_idx.append(idx)
        source_x.append(source.features[idx])
        source_y.append(source.labels[idx])
    target_idx = _epoch_batch(target.n, m, seed, len(sources), iteration)
    return BatchBundle(source_x, source_y, target.features[target_idx], target_idx, source_idx)


class BatchSampler:
    """Iterates ``sample_batches`` with private iteration state."""

    def __init__(self, sources: Sequence[DomainDataset], target: DomainDataset, m: int, seed: int):
        self.sources = list(sources)
        self.target = target
        self.m = m
        self.seed = seed
        self.iteration = 0
        smallest = min([s.n for s in self.sources] + [target.n])
        if m > smallest:
            raise DataError(f"batch size {m} exceeds the smallest dataset ({smallest} rows)")
        self.iterations_per_epoch = smallest // m

    def next(self) -> BatchBundle:
        bundle = sample_batches(self.sources, self.target, self.m, self.seed, self.iteration)
        self.iteration += 1
        return bundle
