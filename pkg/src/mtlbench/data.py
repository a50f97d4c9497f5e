"""Union-dataset handling: ingestion, masking, normalization, splitting,
downsampling, batching, and a synthetic generator with controllable task
relatedness and imbalance.

A dataset stores one row per sample with a per-task availability mask;
targets are NaN wherever the mask is 0, so nothing can consume a label
that does not exist.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .losses import TASK_KINDS

REGRESSION_BINS = 10


@dataclass
class Sample:
    """One row: feature vector, per-task optional targets, availability mask."""

    features: np.ndarray
    targets: tuple
    mask: tuple


class Dataset:
    """Immutable union dataset over an arbitrary task list."""

    def __init__(self, features, targets, mask, task_names, task_kinds):
        features = np.asarray(features, dtype=np.float64)
        targets = np.array(targets, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if features.ndim != 2:
            raise ConfigError("features must be 2-D (samples x features)")
        n = features.shape[0]
        if targets.shape != (n, len(task_names)) or mask.shape != targets.shape:
            raise ConfigError("targets and mask must be (n_samples x n_tasks)")
        if len(task_names) != len(task_kinds):
            raise ConfigError("task_names and task_kinds must align")
        for kind in task_kinds:
            if kind not in TASK_KINDS:
                raise ConfigError(f"unknown task kind {kind!r}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ConfigError("mask entries must be 0 or 1")
        if n and not np.all(mask.sum(axis=1) >= 1):
            raise ConfigError("every sample must carry at least one label")
        if not np.all(np.isfinite(features)):
            raise ConfigError("features must be finite")
        if not np.all(np.isfinite(targets[mask == 1.0])):
            raise ConfigError("labeled targets must be finite")
        targets[mask == 0.0] = np.nan  # nothing may read an absent label
        self.features = features
        self.targets = targets
        self.mask = mask
        self.task_names = list(task_names)
        self.task_kinds = list(task_kinds)
        self.features.setflags(write=False)
        self.targets.setflags(write=False)
        self.mask.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def task_index(self, task: str) -> int:
        try:
            return self.task_names.index(task)
        except ValueError:
            raise ConfigError(f"unknown task {task!r}; tasks are {self.task_names}") from None

    def kind_of(self, task: str) -> str:
        return self.task_kinds[self.task_index(task)]

    def labeled_counts(self) -> dict[str, int]:
        return {t: int(self.mask[:, i].sum()) for i, t in enumerate(self.task_names)}

    def sample(self, i: int) -> Sample:
        row_mask = self.mask[i]
        targets = tuple(float(self.targets[i, j]) if row_mask[j] else None
                        for j in range(len(self.task_names)))
        return Sample(self.features[i].copy(), targets, tuple(int(b) for b in row_mask))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx].copy(), self.targets[idx].copy(),
                       self.mask[idx].copy(), self.task_names, self.task_kinds)

    def task_subset(self, task: str) -> "Dataset":
        """Samples carrying a label for ``task`` (all their labels retained)."""
        t = self.task_index(task)
        return self.subset(np.flatnonzero(self.mask[:, t] == 1.0))

    def project(self, tasks: list[str]) -> "Dataset":
        """Restrict to the given task columns; rows left without any label drop."""
        cols = [self.task_index(t) for t in tasks]
        mask = self.mask[:, cols]
        rows = mask.sum(axis=1) >= 1
        return Dataset(self.features[rows].copy(), self.targets[np.ix_(rows, cols)].copy(),
                       mask[rows].copy(), [self.task_names[c] for c in cols],
                       [self.task_kinds[c] for c in cols])

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.targets.copy(), self.mask.copy(),
                       self.task_names, self.task_kinds)

    def labeled_arrays(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        """(features, targets) restricted to rows labeled for ``task``."""
        t = self.task_index(task)
        sel = self.mask[:, t] == 1.0
        return self.features[sel], self.targets[sel, t]


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class CsvSchema:
    feature_columns: list[str]
    task_names: list[str]
    task_kinds: list[str]
    non_negative_columns: tuple = ()

    @property
    def header(self) -> list[str]:
        return list(self.feature_columns) + list(self.task_names)


ALLOY_ELEMENTS = ["Al", "Ti", "Cr", "Fe", "Co", "Ni", "Cu", "Zr", "Mo", "W",
                  "Mn", "Si", "Mg", "Re", "Ta"]
ALLOY_DESCRIPTORS = ["r_avg", "delta", "dH_mix", "EN_avg", "dEN", "N"]


def alloy_schema() -> CsvSchema:
    """The 21-feature alloy schema: 15 atomic fractions + 6 physical descriptors."""
    return CsvSchema(
        feature_columns=ALLOY_ELEMENTS + ALLOY_DESCRIPTORS,
        task_names=["resistivity", "hardness", "amorphous"],
        task_kinds=["regression", "regression", "classification"],
        non_negative_columns=tuple(ALLOY_ELEMENTS),
    )


def generic_schema(feature_dim: int, task_names, task_kinds) -> CsvSchema:
    return CsvSchema([f"x{i}" for i in range(feature_dim)], list(task_names), list(task_kinds))


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Load a union dataset; empty target cells become mask 0.

    Fails closed: any malformed row aborts the load with an error listing
    every offending row (1-based data-row numbers).
    """
    if schema is None:
        schema = alloy_schema()
    nn_idx = [schema.feature_columns.index(c) for c in schema.non_negative_columns]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if [h.strip() for h in header] != schema.header:
            unknown = [h for h in header if h.strip() not in schema.header]
            if unknown:
                raise DataFormatError(f"{path}: unknown columns {unknown}")
            raise DataFormatError(
                f"{path}: header does not match schema; expected {schema.header}")

        n_feat = len(schema.feature_columns)
        n_task = len(schema.task_names)
        feats, targs, masks, problems = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            issue = None
            if len(row) != n_feat + n_task:
                issue = f"expected {n_feat + n_task} cells, got {len(row)}"
            else:
                try:
                    f = [float(c) for c in row[:n_feat]]
                    if any(not math.isfinite(v) for v in f):
                        issue = "non-finite feature value"
                    else:
                        for i in nn_idx:
                            if f[i] < 0.0:
                                issue = f"negative value in column {schema.feature_columns[i]!r}"
                                break
                except ValueError:
                    issue = "unparseable feature value"
            if issue is None:
                y = [math.nan] * n_task
                m = [0.0] * n_task
                for j in range(n_task):
                    cell = row[n_feat + j].strip()
                    if cell == "":
                        continue
                    try:
                        v = float(cell)
                    except ValueError:
                        issue = f"unparseable value for task {schema.task_names[j]!r}"
                        break
                    if schema.task_kinds[j] == "classification" and v not in (0.0, 1.0):
                        issue = f"label for {schema.task_names[j]!r} must be 0 or 1, got {cell}"
                        break
                    y[j] = v
                    m[j] = 1.0
                if issue is None and sum(m) == 0:
                    issue = "row has no labels"
            if issue is not None:
                problems.append((row_no, issue))
            else:
                feats.append(f)
                targs.append(y)
                masks.append(m)
        if problems:
            listing = "; ".join(f"row {r}: {msg}" for r, msg in problems)
            raise DataFormatError(
                f"{path}: {len(problems)} malformed row(s), nothing loaded ({listing})")
        if not feats:
            raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(targs), np.array(masks),
                   schema.task_names, schema.task_kinds)


def save_csv(ds: Dataset, path, schema: CsvSchema | None = None) -> None:
    """Write a dataset in the ingestion format (missing labels as empty cells)."""
    if schema is None:
        schema = generic_schema(ds.feature_dim, ds.task_names, ds.task_kinds)
    if len(schema.feature_columns) != ds.feature_dim or schema.task_names != ds.task_names:
        raise ConfigError("schema does not match dataset layout")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.header)
        for i in range(len(ds)):
            cells = [repr(float(v)) for v in ds.features[i]]
            for j, kind in enumerate(ds.task_kinds):
                if ds.mask[i, j] == 0.0:
                    cells.append("")
                elif kind == "classification":
                    cells.append(str(int(ds.targets[i, j])))
                else:
                    cells.append(repr(float(ds.targets[i, j])))
            writer.writerow(cells)


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant_columns: np.ndarray = field(default=None)


def fit_normalize(train: Dataset) -> NormalizationStats:
    """Per-feature mean/std from the training split (population std).

    Zero-variance columns get std 1 and a warning so normalization stays
    defined.
    """
    if len(train) == 0:
        raise ConfigError("cannot fit normalization on an empty dataset")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    constant = std <= 1e-12
    if constant.any():
        cols = np.flatnonzero(constant).tolist()
        warnings.warn(f"constant feature column(s) {cols}: std forced to 1", stacklevel=2)
        std = std.copy()
        std[constant] = 1.0
    return NormalizationStats(mean=mean, std=std, constant_columns=constant)


def apply_normalize(ds: Dataset, stats: NormalizationStats) -> Dataset:
    return ds.with_features((ds.features - stats.mean) / stats.std)


# ---------------------------------------------------------------------------
# Splitting and downsampling


def _holdout_counts(n: int, ratios) -> tuple[int, int, int]:
    # Holdouts round up, train keeps the remainder: 52,388 at 70/15/15
    # gives 36,670 / 7,859 / 7,859.
    n_val = math.ceil(ratios[1] * n)
    n_test = math.ceil(ratios[2] * n)
    while n_val + n_test > n:
        if n_test >= n_val:
            n_test -= 1
        else:
            n_val -= 1
    return n - n_val - n_test, n_val, n_test


def _largest_remainder(quotas: np.ndarray, total: int, capacity: np.ndarray) -> np.ndarray:
    """Integer allocation matching ``total`` with per-bin capacity limits."""
    base = np.minimum(np.floor(quotas).astype(int), capacity)
    short = total - base.sum()
    if short > 0:
        order = np.argsort(-(quotas - np.floor(quotas)), kind="stable")
        for b in order:
            if short == 0:
                break
            if base[b] < capacity[b]:
                base[b] += 1
                short -= 1
        if short > 0:  # spill into any remaining capacity
            for b in range(len(base)):
                take = min(short, capacity[b] - base[b])
                base[b] += take
                short -= take
                if short == 0:
                    break
    return base


def _strata_for_group(ds: Dataset, idx: np.ndarray, pattern: tuple, bins: int) -> list[np.ndarray]:
    """Stratify a mask-pattern group by its first available task."""
    task_pos = next(j for j, bit in enumerate(pattern) if bit)
    values = ds.targets[idx, task_pos]
    if ds.task_kinds[task_pos] == "classification":
        return [idx[values == v] for v in np.unique(values)]
    if len(idx) < bins:
        warnings.warn(
            f"availability group {pattern} has {len(idx)} samples, fewer than "
            f"{bins} quantile bins; splitting unstratified", stacklevel=3)
        return [idx]
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(idx), dtype=int)
    ranks[order] = np.arange(len(idx))
    bin_ids = ranks * bins // len(idx)
    return [idx[bin_ids == b] for b in range(bins)]


def stratified_split(ds: Dataset, ratios=(0.70, 0.15, 0.15), seed: int = 0,
                     bins: int = REGRESSION_BINS):
    """Split into (train, val, test) per availability group, stratified within.

    Samples are grouped by their mask pattern; within a group,
    classification labels stratify by class and regression targets by
    quantile bin. Group-level split sizes follow the round-up-holdouts
    rule; strata receive them by largest remainder, so per-bin counts match
    the ratios within one sample.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    patterns = [tuple(int(b) for b in row) for row in ds.mask]
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(patterns):
        groups.setdefault(p, []).append(i)

    out = {0: [], 1: [], 2: []}
    for gi, pattern in enumerate(sorted(groups)):
        idx = np.asarray(groups[pattern], dtype=np.intp)
        rng = np.random.default_rng(np.random.SeedSequence([seed, gi]))
        n = len(idx)
        n_train, n_val, n_test = _holdout_counts(n, ratios)
        strata = _strata_for_group(ds, idx, pattern, bins)
        sizes = np.array([len(s) for s in strata])
        val_alloc = _largest_remainder(sizes * (n_val / n), n_val, sizes)
        test_alloc = _largest_remainder(sizes * (n_test / n), n_test, sizes - val_alloc)
        for s, stratum in enumerate(strata):
            shuffled = rng.permutation(stratum)
            a, b = val_alloc[s], test_alloc[s]
            out[1].extend(shuffled[:a])
            out[2].extend(shuffled[a:a + b])
            out[0].extend(shuffled[a + b:])
    parts = []
    for k in range(3):
        part_idx = np.sort(np.asarray(out[k], dtype=np.intp))
        parts.append(ds.subset(part_idx))
    return tuple(parts)


def downsample_task(ds: Dataset, task: str, n: int, seed: int = 0) -> Dataset:
    """Keep a uniform without-replacement subset of ``n`` samples labeled for
    ``task``; samples lacking that label are retained unchanged."""
    t = ds.task_index(task)
    labeled = np.flatnonzero(ds.mask[:, t] == 1.0)
    if n < 1:
        raise ValueError(f"downsample size must be at least 1, got {n}")
    if n > len(labeled):
        raise ValueError(
            f"cannot keep {n} samples of task {task!r}: only {len(labeled)} are labeled")
    rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
    chosen = rng.choice(labeled, size=n, replace=False)
    others = np.flatnonzero(ds.mask[:, t] == 0.0)
    keep = np.sort(np.concatenate([others, chosen]))
    return ds.subset(keep)


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass
class SyntheticSpec:
    """Controls the synthetic union dataset.

    Each task's latent score is
        relatedness * shared_teacher(x) + (1 - relatedness) * private_teacher(x)
    plus Gaussian noise; teachers are fixed random two-layer tanh networks
    with outputs standardized against a calibration sample. Per-task labels
    occupy disjoint sample blocks, giving the union structure.
    """

    feature_dim: int
    task_names: list[str]
    task_kinds: list[str]
    task_counts: list[int]
    relatedness: float
    teacher_width: int = 16
    noise_std: float = 0.1
    classification_balance: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.relatedness <= 1.0:
            raise ConfigError("relatedness must be in [0,1]")
        if not 0.0 < self.classification_balance < 1.0:
            raise ConfigError("classification_balance must be in (0,1)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if len({len(self.task_names), len(self.task_kinds), len(self.task_counts)}) != 1:
            raise ConfigError("task names, kinds and counts must align")
        if any(c < 1 for c in self.task_counts):
            raise ConfigError("task counts must be at least 1")
        for kind in self.task_kinds:
            if kind not in TASK_KINDS:
                raise ConfigError(f"unknown task kind {kind!r}")


class SyntheticTeachers:
    """Fixed random teacher networks shared by dataset and probe evaluations.

    Each teacher reads a private slice of a single random orthogonal basis,
    so at relatedness 0 the latent functions depend on mutually orthogonal
    input directions: features learned for one task carry no information
    about another.
    """

    CALIBRATION_SAMPLES = 4096

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        d, w = spec.feature_dim, spec.teacher_width
        n_teachers = 1 + len(spec.task_names)
        k = max(1, d // n_teachers)
        basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
        self._nets = []
        for i in range(n_teachers):
            sub = basis[:, (i * k) % d:(i * k) % d + k]
            if sub.shape[1] < k:  # wrap-around for tiny feature dims
                sub = basis[:, :k]
            self._nets.append(self._draw(rng, sub, w))
        calib = rng.normal(size=(self.CALIBRATION_SAMPLES, d))
        self._moments = []
        for net in self._nets:
            raw = self._raw(net, calib)
            std = raw.std()
            self._moments.append((raw.mean(), std if std > 1e-12 else 1.0))

    @staticmethod
    def _draw(rng, subspace, w):
        k = subspace.shape[1]
        mix = rng.normal(scale=1.5 / np.sqrt(k), size=(k, w))
        return (subspace @ mix,
                rng.normal(scale=0.7, size=w),
                rng.normal(scale=1.0 / np.sqrt(w), size=w))

    @staticmethod
    def _raw(net, x):
        w1, b1, a = net
        return np.tanh(x @ w1 + b1) @ a

    def _standardized(self, k: int, x: np.ndarray) -> np.ndarray:
        mean, std = self._moments[k]
        return (self._raw(self._nets[k], x) - mean) / std

    def latent(self, x: np.ndarray, task_index: int) -> np.ndarray:
        """Noise-free latent score for one task on arbitrary inputs."""
        rho = self.spec.relatedness
        shared = self._standardized(0, x)
        if rho == 1.0:
            return shared
        private = self._standardized(1 + task_index, x)
        return rho * shared + (1.0 - rho) * private

    def latent_matrix(self, x: np.ndarray) -> np.ndarray:
        return np.column_stack([self.latent(x, t) for t in range(len(self.spec.task_names))])


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw the synthetic union dataset described by ``spec``."""
    teachers = SyntheticTeachers(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    total = sum(spec.task_counts)
    X = rng.normal(size=(total, spec.feature_dim))
    scores = teachers.latent_matrix(X) + spec.noise_std * rng.normal(size=(total, len(spec.task_names)))
    targets = np.zeros_like(scores)
    mask = np.zeros_like(scores)
    start = 0
    for j, count in enumerate(spec.task_counts):
        block = slice(start, start + count)
        s = scores[block, j]
        if spec.task_kinds[j] == "classification":
            threshold = np.quantile(s, 1.0 - spec.classification_balance)
            targets[block, j] = (s > threshold).astype(np.float64)
        else:
            targets[block, j] = s
        mask[block, j] = 1.0
        start += count
    return Dataset(X, targets, mask, spec.task_names, spec.task_kinds)


# ---------------------------------------------------------------------------
# Batching


def iter_batches(ds: Dataset, batch_size: int = 32, rng=None, shuffle: bool = True):
    """Yield (features, targets, mask) batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be at least 1, got {batch_size}")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ConfigError("shuffled batching needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.targets[idx], ds.mask[idx]
