"""Tabular data handling.

Schemas and CSV I/O, per-column feature encoding (one-hot, z-score,
mode-specific), train/test splitting, group-conditional batching, and a
synthetic biased benchmark whose true counterfactuals are available in
closed form.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.mixture import BayesianGaussianMixture

Array = np.ndarray

COLUMN_KINDS = ("categorical", "continuous")
TASKS = ("classification", "regression")


class DataError(ValueError):
    """Schema violation or malformed data."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise DataError(f"unknown column kind {self.kind!r} for {self.name!r}")


@dataclass(frozen=True)
class DatasetSchema:
    """Column layout plus the sensitive/target designation."""

    columns: tuple[ColumnSpec, ...]
    sensitive_column: str
    target_column: str | None
    task: str

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names")
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.sensitive_column not in names:
            raise DataError(f"missing column: {self.sensitive_column}")
        if self.column(self.sensitive_column).kind != "categorical":
            raise DataError("sensitive column must be categorical")
        if self.target_column is not None:
            if self.target_column not in names:
                raise DataError(f"missing column: {self.target_column}")
            if self.target_column == self.sensitive_column:
                raise DataError("target column must differ from sensitive column")

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise DataError(f"missing column: {name}")

    @property
    def feature_columns(self) -> tuple[ColumnSpec, ...]:
        """All columns except the target; the sensitive column is a feature."""
        return tuple(c for c in self.columns if c.name != self.target_column)

    def feature_only(self) -> "DatasetSchema":
        return DatasetSchema(self.feature_columns, self.sensitive_column, None, self.task)


@dataclass
class Dataset:
    """Column-major rows: categorical cells are str, continuous are float."""

    schema: DatasetSchema
    columns: dict[str, list]

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if set(self.columns) != {c.name for c in self.schema.columns}:
            raise DataError("dataset columns do not match schema")
        if len(lengths) > 1:
            raise DataError("ragged columns")
        if self.n == 0:
            raise DataError("dataset has no rows")

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values())))

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(self.schema, {k: [v[i] for i in idx] for k, v in self.columns.items()})


# ---------------------------------------------------------------------------
# Schema and CSV files
# ---------------------------------------------------------------------------


def load_schema(path) -> DatasetSchema:
    """Read a schema INI: a [dataset] section plus a [columns] list in order."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep column-name case
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("dataset") or not parser.has_section("columns"):
        raise DataError(f"{path}: schema file needs [dataset] and [columns] sections")
    meta = parser["dataset"]
    target = meta.get("target", "").strip() or None
    columns = tuple(ColumnSpec(name, kind.strip())
                    for name, kind in parser["columns"].items())
    return DatasetSchema(columns, meta.get("sensitive", "").strip(), target,
                         meta.get("task", "").strip())


def save_schema(schema: DatasetSchema, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["dataset"] = {"task": schema.task, "sensitive": schema.sensitive_column}
    if schema.target_column is not None:
        parser["dataset"]["target"] = schema.target_column
    parser["columns"] = {c.name: c.kind for c in schema.columns}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def load_csv(path, schema: DatasetSchema) -> Dataset:
    """Parse a UTF-8 CSV with header; bad cells are rejected with their row index.

    Row indices in errors are 1-based over data rows (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in schema.columns:
            if col.name not in header:
                raise DataError(f"missing column: {col.name}")
        extra = set(header) - {c.name for c in schema.columns}
        if extra:
            raise DataError(f"unexpected column: {sorted(extra)[0]}")
        positions = {c.name: header.index(c.name) for c in schema.columns}

        columns: dict[str, list] = {c.name: [] for c in schema.columns}
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"row {i}: expected {len(header)} cells, got {len(row)}")
            for col in schema.columns:
                cell = row[positions[col.name]]
                if col.kind == "continuous":
                    try:
                        columns[col.name].append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"column {col.name!r}, row {i}: "
                            f"cannot parse {cell!r} as continuous") from None
                else:
                    columns[col.name].append(cell)
    if not columns[schema.columns[0].name]:
        raise DataError(f"{path}: no data rows")
    return Dataset(schema, columns)


def save_csv(ds: Dataset, path) -> None:
    names = [c.name for c in ds.schema.columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(ds.n):
            writer.writerow([_format_cell(ds.columns[n][i]) for n in names])


def _format_cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# Feature encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneHotCodec:
    values: tuple[str, ...]

    @property
    def width(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ZScoreCodec:
    mean: float
    std: float

    width = 1


@dataclass(frozen=True)
class ModeSpecificCodec:
    """Gaussian-mixture codec: (residual within assigned mode, one-hot mode id).

    Residuals are scaled by 4 standard deviations so typical values land
    in [-1, 1]. Modes are ordered by mean.
    """

    means: tuple[float, ...]
    stds: tuple[float, ...]
    weights: tuple[float, ...]

    @property
    def width(self) -> int:
        return 1 + len(self.means)

    def assign(self, values: Array) -> Array:
        """Most-responsible mode per value: argmax of weight * normal density."""
        v = values[:, None]
        mu = np.asarray(self.means)[None, :]
        sd = np.asarray(self.stds)[None, :]
        log_resp = (np.log(np.asarray(self.weights))[None, :]
                    - np.log(sd) - 0.5 * ((v - mu) / sd) ** 2)
        return np.argmax(log_resp, axis=1)


Codec = OneHotCodec | ZScoreCodec | ModeSpecificCodec


@dataclass
class FeatureEncoder:
    """Fitted per-column codecs over a schema's feature columns."""

    schema: DatasetSchema
    codecs: dict[str, Codec]
    column_spans: dict[str, tuple[int, int]] = field(init=False)
    dim: int = field(init=False)

    def __post_init__(self):
        spans, start = {}, 0
        for col in self.schema.feature_columns:
            width = self.codecs[col.name].width
            spans[col.name] = (start, start + width)
            start += width
        self.column_spans = spans
        self.dim = start

    @property
    def sensitive_span(self) -> tuple[int, int]:
        return self.column_spans[self.schema.sensitive_column]

    @property
    def groups(self) -> tuple[str, ...]:
        return self.codecs[self.schema.sensitive_column].values

    def group_onehot(self, group: str) -> Array:
        out = np.zeros(len(self.groups))
        out[self.groups.index(group)] = 1.0
        return out


def fit_encoder(ds: Dataset, continuous_mode: str = "zscore",
                max_modes: int = 10, seed: int = 0) -> FeatureEncoder:
    """Fit one codec per feature column.

    Categorical columns get sorted one-hot vocabularies. Continuous
    columns get z-score or a mode-specific Gaussian-mixture codec with
    up to max_modes components; components below weight 0.01 are pruned.
    """
    if continuous_mode not in ("zscore", "mode_specific"):
        raise DataError(f"unknown continuous_mode {continuous_mode!r}")
    if max_modes < 1:
        raise DataError("max_modes must be >= 1")
    codecs: dict[str, Codec] = {}
    for col in ds.schema.feature_columns:
        values = ds.columns[col.name]
        if col.kind == "categorical":
            codecs[col.name] = OneHotCodec(tuple(sorted(set(values))))
        elif continuous_mode == "zscore":
            arr = np.asarray(values, dtype=np.float64)
            std = float(arr.std())
            if std == 0.0:
                raise DataError(f"column {col.name!r} is constant; z-score undefined")
            codecs[col.name] = ZScoreCodec(float(arr.mean()), std)
        else:
            codecs[col.name] = _fit_mode_specific(
                np.asarray(values, dtype=np.float64), max_modes, seed)
    sensitive = codecs[ds.schema.sensitive_column]
    if len(sensitive.values) < 2:
        raise DataError("sensitive column needs at least 2 distinct values")
    if ds.schema.task == "classification" and ds.schema.target_column is not None:
        labels = set(ds.columns[ds.schema.target_column])
        if len(labels) != 2:
            raise DataError(f"classification target must be binary, got {sorted(labels)}")
    return FeatureEncoder(ds.schema, codecs)


def _fit_mode_specific(values: Array, max_modes: int, seed: int) -> ModeSpecificCodec:
    if np.unique(values).size == 1:
        # all points identical: single-mode fallback with unit scale
        return ModeSpecificCodec((float(values[0]),), (1.0,), (1.0,))
    n_components = int(min(max_modes, np.unique(values).size))
    # variational weights: redundant components collapse below the 0.01
    # pruning threshold instead of splitting real modes
    gm = BayesianGaussianMixture(n_components=n_components, covariance_type="diag",
                                 reg_covar=1e-6, max_iter=500, random_state=seed)
    gm.fit(values[:, None])
    means = gm.means_[:, 0]
    stds = np.sqrt(gm.covariances_[:, 0])
    weights = gm.weights_
    keep = weights >= 0.01
    if not keep.any():
        keep = weights == weights.max()
    means, stds, weights = means[keep], stds[keep], weights[keep]
    weights = weights / weights.sum()
    order = np.argsort(means)
    return ModeSpecificCodec(tuple(float(m) for m in means[order]),
                             tuple(max(float(s), 1e-6) for s in stds[order]),
                             tuple(float(w) for w in weights[order]))


@dataclass
class EncodedDataset:
    """Numeric matrix over feature columns plus aligned labels/targets."""

    matrix: Array
    sensitive_labels: Array  # str array, one group id per row
    targets: Array | None
    column_spans: dict[str, tuple[int, int]]
    sensitive_column: str
    task: str

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.sensitive_labels.tolist())))

    @property
    def sensitive_span(self) -> tuple[int, int]:
        return self.column_spans[self.sensitive_column]


def encode(enc: FeatureEncoder, ds: Dataset) -> EncodedDataset:
    """Encode all feature columns into one matrix; targets are kept separate."""
    if {c.name for c in ds.schema.columns} != {c.name for c in enc.schema.columns}:
        raise DataError("dataset columns do not match the fitted encoder")
    matrix = np.zeros((ds.n, enc.dim))
    for col in enc.schema.feature_columns:
        start, stop = enc.column_spans[col.name]
        codec = enc.codecs[col.name]
        values = ds.columns[col.name]
        if isinstance(codec, OneHotCodec):
            index = {v: i for i, v in enumerate(codec.values)}
            for r, v in enumerate(values):
                if v not in index:
                    raise DataError(f"unseen value {v!r} in column {col.name!r}")
                matrix[r, start + index[v]] = 1.0
        elif isinstance(codec, ZScoreCodec):
            arr = np.asarray(values, dtype=np.float64)
            matrix[:, start] = (arr - codec.mean) / codec.std
        else:
            arr = np.asarray(values, dtype=np.float64)
            modes = codec.assign(arr)
            mu = np.asarray(codec.means)[modes]
            sd = np.asarray(codec.stds)[modes]
            matrix[:, start] = (arr - mu) / (4.0 * sd)
            matrix[np.arange(ds.n), start + 1 + modes] = 1.0

    labels = np.asarray(ds.columns[ds.schema.sensitive_column])
    targets = None
    if ds.schema.target_column is not None:
        raw = ds.columns[ds.schema.target_column]
        if ds.schema.task == "classification":
            vocab = sorted(set(raw))
            index = {v: i for i, v in enumerate(vocab)}
            targets = np.asarray([index[v] for v in raw], dtype=np.float64)
        else:
            targets = np.asarray(raw, dtype=np.float64)
    return EncodedDataset(matrix, labels, targets, dict(enc.column_spans),
                          enc.schema.sensitive_column, ds.schema.task)


def decode(enc: FeatureEncoder, matrix: Array) -> Dataset:
    """Invert encoded rows back to raw feature values.

    One-hot spans decode by argmax (ties to the lowest index); soft
    spans from a generator therefore decode to their most likely value.
    Returns a Dataset over the feature-only schema.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.shape[1] != enc.dim:
        raise DataError(f"row width {matrix.shape[1]} != encoded dim {enc.dim}")
    columns: dict[str, list] = {}
    for col in enc.schema.feature_columns:
        start, stop = enc.column_spans[col.name]
        codec = enc.codecs[col.name]
        block = matrix[:, start:stop]
        if isinstance(codec, OneHotCodec):
            picks = np.argmax(block, axis=1)
            columns[col.name] = [codec.values[p] for p in picks]
        elif isinstance(codec, ZScoreCodec):
            columns[col.name] = (block[:, 0] * codec.std + codec.mean).tolist()
        else:
            modes = np.argmax(block[:, 1:], axis=1)
            mu = np.asarray(codec.means)[modes]
            sd = np.asarray(codec.stds)[modes]
            columns[col.name] = (mu + 4.0 * sd * block[:, 0]).tolist()
    return Dataset(enc.schema.feature_only(), columns)


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------


def split(ds: Dataset, ratio: tuple[int, int], seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/test split, sizes within one row of the exact ratio."""
    train_parts, test_parts = ratio
    if train_parts < 1 or test_parts < 1:
        raise DataError("both ratio parts must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n)
    n_train = round(ds.n * train_parts / (train_parts + test_parts))
    n_train = min(max(n_train, 1), ds.n - 1)
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])


@dataclass
class GroupBatch:
    group: str
    indices: Array
    with_replacement: bool

    @property
    def size(self) -> int:
        return len(self.indices)


def sample_group_batch(ed: EncodedDataset, group: str, batch_size: int,
                       rng: np.random.Generator) -> GroupBatch:
    """Sample batch_size rows from one sensitive group.

    Falls back to sampling with replacement (flagged) when the group is
    smaller than the batch.
    """
    members = np.flatnonzero(ed.sensitive_labels == group)
    if members.size == 0:
        raise DataError(f"unknown group {group!r}")
    replace = members.size < batch_size
    picked = rng.choice(members, size=batch_size, replace=replace)
    return GroupBatch(group, picked, replace)


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

# Frozen generator constants: observables mix a 4-d latent through SYNTH_A,
# group membership shifts them by SYNTH_B, and the label thresholds a linear
# score in the latent plus a group term scaled by `bias`.
SYNTH_A = np.array([
    [-1.13906003, 1.01098277, -0.69652939, -0.20733859, -0.06027465, -0.59270772],
    [-1.09423416, 0.51911424, 0.28884649, -1.56229045, 1.87792772, 0.77479752],
    [-0.60750974, 0.72175862, -0.37356254, -0.04855161, 0.63107548, -1.00533451],
    [0.46068601, 1.11918320, 1.05783845, -0.23975881, 0.72233547, -1.29726619],
])
SYNTH_B = np.array([-0.02755057, 0.07828306, -0.23400438, -0.01422688,
                    0.30038432, 0.45598414])
SYNTH_W = np.array([1.21680721, 1.29706327, -1.50110872, -1.89306093])
SYNTH_FEATURE_NOISE = 0.15
SYNTH_LABEL_NOISE = 1.0
SYNTH_GROUPS = ("g0", "g1")


def synth_schema() -> DatasetSchema:
    cols = tuple(ColumnSpec(f"x{i}", "continuous") for i in range(6))
    cols += (ColumnSpec("group", "categorical"), ColumnSpec("label", "categorical"))
    return DatasetSchema(cols, "group", "label", "classification")


@dataclass
class SynthTruth:
    """Ground truth behind a synthetic draw: latents and exact counterfactuals.

    The counterfactual of a row keeps its latent and noise draws and
    flips the group, so counterfactual features AND labels are exact.
    """

    latent: Array
    label_noise: Array
    cf_features: Array
    cf_labels: Array
    cf_groups: list[str]


def synth_generate_with_truth(n: int, bias: float,
                              seed: int) -> tuple[Dataset, SynthTruth]:
    if n < 10:
        raise DataError("n < 10")
    if bias < 0:
        raise DataError("bias must be >= 0")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, 4))
    member = (rng.random(n) < 0.5).astype(np.float64)  # 1 = group g1
    noise = rng.standard_normal((n, 6)) * SYNTH_FEATURE_NOISE
    label_noise = rng.standard_normal(n) * SYNTH_LABEL_NOISE

    x = latent @ SYNTH_A + member[:, None] * SYNTH_B + noise
    sign = 2.0 * member - 1.0
    score = latent @ SYNTH_W
    y = (score + bias * sign + label_noise > 0).astype(int)

    # flipped group, same latent and same noise draws
    cf_member = 1.0 - member
    cf_x = latent @ SYNTH_A + cf_member[:, None] * SYNTH_B + noise
    cf_y = (score + bias * -sign + label_noise > 0).astype(int)

    columns: dict[str, list] = {f"x{i}": x[:, i].tolist() for i in range(6)}
    columns["group"] = [SYNTH_GROUPS[int(m)] for m in member]
    columns["label"] = [str(v) for v in y]
    ds = Dataset(synth_schema(), columns)
    truth = SynthTruth(latent, label_noise, cf_x, cf_y,
                       [SYNTH_GROUPS[int(m)] for m in cf_member])
    return ds, truth


def synth_generate(n: int, bias: float, seed: int) -> Dataset:
    """Biased classification benchmark; deterministic per seed."""
    return synth_generate_with_truth(n, bias, seed)[0]
