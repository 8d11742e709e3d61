"""Multi-modal dataset model: CSV ingestion, imputation, normalisation,
stratified splitting, and synthetic data generation."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, ParameterError, ParseError, SchemaError


@dataclass(frozen=True)
class ModalitySchema:
    """Ordered modality layout of a flat feature table."""

    modalities: tuple  # ((name, dim), ...)
    label_column: str = "label"
    class_names: tuple = ()
    meta_columns: tuple = ()  # feature columns usable for meta-graph construction

    def __post_init__(self):
        if len(self.modalities) < 1:
            raise SchemaError("schema needs at least one modality")
        names = [n for n, _ in self.modalities]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate modality names: {names}")
        for n, d in self.modalities:
            if d < 1:
                raise SchemaError(f"modality {n!r} has non-positive dimension {d}")

    @property
    def n_modalities(self):
        return len(self.modalities)

    @property
    def dims(self):
        return [d for _, d in self.modalities]

    @property
    def names(self):
        return [n for n, _ in self.modalities]

    @property
    def d_in(self):
        return sum(self.dims)

    def to_dict(self):
        return {
            "modalities": [{"name": n, "dim": d} for n, d in self.modalities],
            "label_column": self.label_column,
            "class_names": list(self.class_names),
            "meta_columns": list(self.meta_columns),
        }

    @classmethod
    def from_dict(cls, obj):
        try:
            mods = tuple((m["name"], int(m["dim"])) for m in obj["modalities"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(
            modalities=mods,
            label_column=obj.get("label_column", "label"),
            class_names=tuple(obj.get("class_names", ())),
            meta_columns=tuple(obj.get("meta_columns", ())),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class MultiModalDataset:
    """Per-modality feature matrices (d_m x N) with labels and missing mask."""

    schema: ModalitySchema
    modalities: list  # list of float64 arrays, each (d_m, N)
    labels: np.ndarray  # (N,) int
    missing: list = None  # list of bool arrays, same shapes; None = fully observed
    feature_names: list = None  # per modality, list of column names

    def __post_init__(self):
        ns = {x.shape[1] for x in self.modalities}
        if len(ns) != 1:
            raise DataError(f"modalities disagree on sample count: {sorted(ns)}")
        for (name, d), x in zip(self.schema.modalities, self.modalities):
            if x.shape[0] != d:
                raise SchemaError(f"modality {name!r}: schema dim {d} != data dim {x.shape[0]}")
        if self.labels.shape != (self.n,):
            raise DataError(f"labels shape {self.labels.shape} != ({self.n},)")
        if self.feature_names is None:
            self.feature_names = [
                [f"{name}_{i}" for i in range(d)] for name, d in self.schema.modalities
            ]

    @property
    def n(self):
        return self.modalities[0].shape[1]

    @property
    def n_classes(self):
        if self.schema.class_names:
            return len(self.schema.class_names)
        return int(self.labels.max()) + 1

    @property
    def has_missing(self):
        return self.missing is not None and any(m.any() for m in self.missing)

    def stacked(self):
        """All features as one (d_in, N) matrix, modalities in schema order."""
        return np.concatenate(self.modalities, axis=0)

    def flat_feature_names(self):
        return [c for cols in self.feature_names for c in cols]

    def meta_matrix(self):
        """Rows of the designated meta columns, or None if the schema has none."""
        if not self.schema.meta_columns:
            return None
        flat = self.stacked()
        names = self.flat_feature_names()
        rows = []
        for col in self.schema.meta_columns:
            if col not in names:
                raise SchemaError(f"meta column {col!r} not among features")
            rows.append(flat[names.index(col)])
        return np.array(rows)


def load_csv(features_path, schema_path):
    """Load a feature table; empty cells become missing entries."""
    schema = ModalitySchema.load(schema_path)
    with open(features_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty features file: {features_path}")
        rows = list(reader)
    if schema.label_column not in header:
        raise SchemaError(f"label column {schema.label_column!r} missing from {features_path}")
    label_idx = header.index(schema.label_column)
    feat_cols = [i for i in range(len(header)) if i != label_idx]
    if len(feat_cols) != schema.d_in:
        raise SchemaError(
            f"schema dimensions sum to {schema.d_in} but file has {len(feat_cols)} feature columns"
        )
    n = len(rows)
    if n == 0:
        raise DataError(f"no data rows in {features_path}")
    values = np.zeros((schema.d_in, n))
    missing = np.zeros((schema.d_in, n), dtype=bool)
    raw_labels = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"row {r + 2}: expected {len(header)} cells, got {len(row)}")
        raw_labels.append(row[label_idx].strip())
        for j, c in enumerate(feat_cols):
            cell = row[c].strip()
            if cell == "":
                missing[j, r] = True
            else:
                try:
                    values[j, r] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"row {r + 2}, column {header[c]!r}: non-numeric cell {cell!r}"
                    )
    labels = _encode_labels(raw_labels, schema)
    offsets = np.cumsum([0] + schema.dims)
    mods = [values[offsets[i]:offsets[i + 1]] for i in range(schema.n_modalities)]
    masks = [missing[offsets[i]:offsets[i + 1]] for i in range(schema.n_modalities)]
    fnames = [header[c] for c in feat_cols]
    per_mod_names = [fnames[offsets[i]:offsets[i + 1]] for i in range(schema.n_modalities)]
    return MultiModalDataset(schema, mods, labels, masks, per_mod_names)


def _encode_labels(raw, schema):
    if schema.class_names:
        lut = {name: i for i, name in enumerate(schema.class_names)}
        out = np.empty(len(raw), dtype=np.int64)
        for i, v in enumerate(raw):
            if v in lut:
                out[i] = lut[v]
            else:
                try:
                    out[i] = int(v)
                except ValueError:
                    raise DataError(f"unknown class label {v!r}; classes: {schema.class_names}")
        if out.min() < 0 or out.max() >= len(schema.class_names):
            raise DataError(f"label index outside [0, {len(schema.class_names)})")
        return out
    try:
        return np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError:
        names = sorted(set(raw))
        lut = {v: i for i, v in enumerate(names)}
        return np.array([lut[v] for v in raw], dtype=np.int64)


def impute_mean(ds):
    """Replace every missing entry by its feature's observed mean."""
    if not ds.has_missing:
        return replace(ds, missing=None)
    mods, names = [], ds.feature_names
    for m, (x, mask) in enumerate(zip(ds.modalities, ds.missing)):
        x = x.copy()
        for j in range(x.shape[0]):
            miss = mask[j]
            if not miss.any():
                continue
            if miss.all():
                raise DataError(f"feature {names[m][j]!r} has no observed values to impute from")
            x[j, miss] = x[j, ~miss].mean()
        mods.append(x)
    return replace(ds, modalities=mods, missing=None)


def zscore(ds, train_idx=None):
    """Standardise each feature; statistics from `train_idx` columns if given.

    Features with near-zero spread are zeroed out.
    """
    if ds.has_missing:
        raise DataError("zscore requires an imputed dataset (missing values remain)")
    cols = slice(None) if train_idx is None else np.asarray(train_idx)
    mods = []
    for x in ds.modalities:
        ref = x[:, cols]
        mu = ref.mean(axis=1, keepdims=True)
        sd = ref.std(axis=1, keepdims=True)
        out = np.where(sd < 1e-12, 0.0, (x - mu) / np.where(sd < 1e-12, 1.0, sd))
        mods.append(out)
    return replace(ds, modalities=mods, missing=None)


@dataclass(frozen=True)
class SplitPlan:
    """K disjoint (train, test) index pairs covering [0, N)."""

    folds: tuple  # ((train, test), ...)
    k: int
    seed: int


def stratified_kfold(labels, k, seed):
    """Deterministic stratified K-fold; per-fold class counts within +-1."""
    labels = np.asarray(labels)
    n = labels.size
    if k < 2:
        raise ParameterError(f"need at least 2 folds, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds sample count {n}")
    rng = np.random.default_rng(seed)
    test_buckets = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            warnings.warn(
                f"class {cls} has {idx.size} < {k} members; stratification is best-effort"
            )
        idx = rng.permutation(idx)
        for i, sample in enumerate(idx):
            test_buckets[(offset + i) % k].append(int(sample))
        offset = (offset + idx.size) % k
    folds = []
    everything = np.arange(n)
    for bucket in test_buckets:
        test = np.array(sorted(bucket), dtype=np.int64)
        train = np.setdiff1d(everything, test)
        folds.append((train, test))
    return SplitPlan(tuple(folds), k, seed)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic multi-modal generator settings.

    pattern:
      "all"            every modality carries class centers
      "none"           no class signal anywhere
      [names...]       only the listed modalities carry class centers
      "complementary"  each modality has a single offset direction shared by
                       its two assigned classes, so one modality alone can at
                       best split one class from the rest; additionally every
                       patient has one randomly chosen modality swamped by
                       heavy noise.  Classes are only identifiable jointly.
    """

    n: int = 200
    classes: int = 3
    modality_dims: tuple = (8, 8, 8)
    separation: float = 4.0
    noise: float = 1.0
    pattern: object = "all"
    missing_rate: float = 0.0
    corruption: float = 6.0  # noise multiplier for the per-patient corrupted modality
    meta_dims: int = 0  # extra discrete meta columns appended as a "meta" modality
    seed: int = 0

    def __post_init__(self):
        if self.separation < 0:
            raise ParameterError(f"separation must be >= 0, got {self.separation}")
        if self.noise <= 0:
            raise ParameterError(f"noise must be > 0, got {self.noise}")
        if self.classes < 2:
            raise ParameterError(f"need >= 2 classes, got {self.classes}")
        if self.n < self.classes:
            raise ParameterError(f"n={self.n} smaller than class count {self.classes}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ParameterError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.corruption < 0:
            raise ParameterError(f"corruption must be >= 0, got {self.corruption}")
        if self.pattern == "complementary" and len(self.modality_dims) < 2:
            raise ParameterError("complementary pattern needs at least 2 modalities")

    @classmethod
    def from_dict(cls, obj):
        try:
            obj = dict(obj)
            if "modality_dims" in obj:
                obj["modality_dims"] = tuple(int(d) for d in obj["modality_dims"])
            if "pattern" in obj and isinstance(obj["pattern"], list):
                obj["pattern"] = tuple(obj["pattern"])
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic config: {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _synth_schema(cfg):
    mods = [(f"mod{m + 1}", d) for m, d in enumerate(cfg.modality_dims)]
    meta_cols = ()
    if cfg.meta_dims > 0:
        mods.append(("meta", cfg.meta_dims))
        meta_cols = tuple(f"meta_{i}" for i in range(cfg.meta_dims))
    classes = tuple(f"c{c}" for c in range(cfg.classes))
    return ModalitySchema(tuple(mods), "label", classes, meta_cols)


def _carriers(classes, n_mods):
    """Boolean (classes, n_mods) table: which modalities carry which class.

    Each class gets exactly two carrier modalities (cyclically assigned), so
    no modality sees class centers for every class once C >= n_mods >= 3.
    """
    table = np.zeros((classes, n_mods), dtype=bool)
    for c in range(classes):
        table[c, c % n_mods] = True
        table[c, (c + 1) % n_mods] = True
    return table


def synth_centers(cfg):
    """Class-conditional mean per (class, modality) for blob generation.

    Uninformative modalities share one center across classes.  Complementary
    mode gives each modality one direction of norm `separation`, used as the
    center for its carrier classes; all other classes sit at the origin.
    """
    centers = []
    complementary = cfg.pattern == "complementary"
    carriers = _carriers(cfg.classes, len(cfg.modality_dims)) if complementary else None
    for m, d in enumerate(cfg.modality_dims):
        rng = np.random.default_rng([cfg.seed, 17, m])
        per_class = rng.normal(size=(cfg.classes, d))
        shared = rng.normal(size=d)
        if complementary:
            delta = shared / max(np.linalg.norm(shared), 1e-12) * cfg.separation
            centers.append(np.outer(carriers[:, m].astype(float), delta))
        elif _is_informative(cfg.pattern, m, len(cfg.modality_dims)):
            centers.append(per_class * cfg.separation)
        else:
            centers.append(np.tile(shared, (cfg.classes, 1)))
    return centers


def _is_informative(pattern, m, n_mods):
    if pattern == "all":
        return True
    if pattern in ("none", "complementary"):
        return False
    return f"mod{m + 1}" in pattern or m in pattern


def synth_generate(cfg):
    """Draw a MultiModalDataset per the generator config; deterministic in seed."""
    schema = _synth_schema(cfg)
    n_mods = len(cfg.modality_dims)
    rng = np.random.default_rng([cfg.seed, 29])
    labels = np.resize(np.arange(cfg.classes), cfg.n)
    labels = rng.permutation(labels).astype(np.int64)

    mods = []
    centers = synth_centers(cfg)
    for m, d in enumerate(cfg.modality_dims):
        mu = centers[m][labels].T  # (d, n)
        mods.append(mu + cfg.noise * rng.normal(size=(d, cfg.n)))
    if cfg.pattern == "complementary":
        # one modality per patient is unreliable: its features are swamped by
        # heavy zero-mean noise, so classifiers must weigh modalities per patient
        bad_rng = np.random.default_rng([cfg.seed, 31])
        bad = bad_rng.integers(0, n_mods, size=cfg.n)
        for m in range(n_mods):
            hit = bad == m
            if hit.any():
                extra = bad_rng.normal(size=(cfg.modality_dims[m], int(hit.sum())))
                mods[m][:, hit] += cfg.corruption * cfg.noise * extra

    if cfg.meta_dims > 0:
        meta_rng = np.random.default_rng([cfg.seed, 37])
        # discrete, weakly label-correlated columns (popGCN-style meta features)
        meta = np.where(
            meta_rng.random((cfg.meta_dims, cfg.n)) < 0.7,
            labels[None, :] % 3,
            meta_rng.integers(0, 3, size=(cfg.meta_dims, cfg.n)),
        ).astype(np.float64)
        mods.append(meta)

    missing = None
    if cfg.missing_rate > 0:
        miss_rng = np.random.default_rng([cfg.seed, 41])
        missing = [miss_rng.random(x.shape) < cfg.missing_rate for x in mods]
    return MultiModalDataset(schema, mods, labels, missing)


def save_dataset(ds, features_path, schema_path):
    """Write features CSV (empty cell = missing) and the schema JSON."""
    ds.schema.save(schema_path)
    flat = ds.stacked()
    mask = (
        np.concatenate(ds.missing, axis=0)
        if ds.missing is not None
        else np.zeros(flat.shape, dtype=bool)
    )
    names = ds.flat_feature_names()
    classes = ds.schema.class_names
    with open(features_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names + [ds.schema.label_column])
        for i in range(ds.n):
            row = ["" if mask[j, i] else repr(float(flat[j, i])) for j in range(flat.shape[0])]
            row.append(classes[ds.labels[i]] if classes else str(int(ds.labels[i])))
            w.writerow(row)
