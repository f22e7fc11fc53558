"""Downstream probes and fairness metrics.

Given trained encoder snapshots, this module fits lightweight probes on the
embeddings (logistic for classification, ridge for regression) and scores
prediction quality together with three group- and individual-level fairness
gaps plus the leakage of the sensitive attribute from the embedding itself.

Probes are deliberately simple and fully deterministic: logistic regression
by full-batch gradient descent with a fixed iteration budget, ridge by the
closed-form normal equations. All metric functions are pure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .cvae import CvaeModel
from .faircl import EncoderStack, counterfactual_rows, embed
from .tabular import DataError, Dataset, FeatureEncoder, encode

Array = np.ndarray


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeModel:
    """Linear probe over embeddings: sigmoid link or identity link."""

    kind: str  # "logistic" | "ridge"
    weights: Array
    bias: float
    l2: float

    def decision(self, x: Array) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.weights.shape[0]:
            raise DataError(
                f"probe expects {self.weights.shape[0]} features, got {x.shape[1]}")
        return x @ self.weights + self.bias

    def scores(self, x: Array) -> Array:
        """Probabilities in (0,1) for logistic, real values for ridge."""
        z = self.decision(x)
        if self.kind == "logistic":
            return _sigmoid(z)
        return z

    def predict(self, x: Array) -> Array:
        """Hard 0/1 labels for logistic probes, thresholded at 0.5."""
        if self.kind != "ridge":
            return (self.scores(x) >= 0.5).astype(np.float64)
        return self.scores(x)


def _sigmoid(z: Array) -> Array:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def _largest_eigenvalue(m: Array, iters: int = 50) -> float:
    # deterministic power iteration; m is symmetric PSD and small
    v = np.ones(m.shape[0]) / np.sqrt(m.shape[0])
    for _ in range(iters):
        mv = m @ v
        norm = np.linalg.norm(mv)
        if norm == 0.0:
            return 0.0
        v = mv / norm
    return float(v @ m @ v)


def fit_probe(x: Array, y: Array, kind: str = "logistic", l2: float = 1e-4,
              iters: int = 2000) -> ProbeModel:
    """Fit a linear probe.

    Logistic: full-batch gradient descent for a fixed budget with step size
    1/L, where L bounds the loss curvature. Ridge: normal equations with an
    l2 ridge on centered data.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise DataError(f"probe data mismatch: {x.shape[0]} rows vs {y.shape[0]} targets")
    if x.shape[0] == 0:
        raise DataError("cannot fit a probe on an empty matrix")
    n, d = x.shape

    if kind == "logistic":
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise DataError("logistic probe labels must be in {0, 1}")
        w = np.zeros(d)
        b = 0.0
        gram = x.T @ x
        lip = _largest_eigenvalue(gram) / (4.0 * n) + l2
        # the bias column contributes at most n/4 to the curvature
        lip += 0.25
        lr = 1.0 / lip
        for _ in range(iters):
            p = _sigmoid(x @ w + b)
            resid = p - y
            w -= lr * (x.T @ resid / n + l2 * w)
            b -= lr * float(np.mean(resid))
        return ProbeModel("logistic", w, b, l2)

    if kind == "ridge":
        x_mean = x.mean(axis=0)
        y_mean = float(y.mean())
        xc = x - x_mean
        yc = y - y_mean
        m = xc.T @ xc + l2 * np.eye(d)
        if l2 <= 0.0 and (not np.isfinite(np.linalg.cond(m)) or
                          np.linalg.cond(m) > 1e12):
            raise DataError("singular normal equations; use an l2 penalty > 0")
        try:
            w = np.linalg.solve(m, xc.T @ yc)
        except np.linalg.LinAlgError as exc:
            raise DataError("singular normal equations; use an l2 penalty > 0") from exc
        b = y_mean - float(x_mean @ w)
        return ProbeModel("ridge", w, b, l2)

    raise DataError(f"unknown probe kind: {kind}")


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------


def _average_ranks(values: Array) -> Array:
    # 1-based ranks with ties sharing their average rank
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = (starts + 1 + ends) / 2.0
    return avg[inverse]


def auc(scores: Array, labels: Array) -> float:
    """Probability a positive outscores a negative, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise DataError("scores and labels must have the same length")
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(preds: Array, targets: Array) -> float:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.size == 0:
        raise DataError("rmse of empty input")
    if preds.shape != targets.shape:
        raise DataError("predictions and targets must have the same length")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def _group_ids(groups: Array) -> tuple[list, list[Array]]:
    groups = np.asarray(groups).ravel()
    ids = sorted(np.unique(groups).tolist())
    if len(ids) < 2:
        raise DataError("need at least 2 sensitive groups")
    return ids, [groups == g for g in ids]


def delta_dp(preds: Array, groups: Array) -> float:
    """Mean absolute rate gap over unordered group pairs."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    ids, masks = _group_ids(groups)
    rates = [float(preds[m].mean()) for m in masks]
    gaps = [abs(a - b) for a, b in combinations(rates, 2)]
    return float(np.mean(gaps))


def delta_eo(preds: Array, labels: Array, groups: Array) -> float:
    """Rate gaps conditioned on the true label, averaged over both labels.

    Empty (group, label) cells are skipped with a warning; pairs touching
    an empty cell do not contribute.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    ids, masks = _group_ids(groups)
    gaps: list[float] = []
    for y in (0.0, 1.0):
        rates: dict[int, float] = {}
        for gi, mask in enumerate(masks):
            cell = mask & (labels == y)
            if not cell.any():
                warnings.warn(f"delta_eo: empty cell group={ids[gi]!r} label={int(y)}; skipped")
                continue
            rates[gi] = float(preds[cell].mean())
        for a, b in combinations(sorted(rates), 2):
            gaps.append(abs(rates[a] - rates[b]))
    if not gaps:
        raise DataError("delta_eo: every group pair had an empty label cell")
    return float(np.mean(gaps))


def delta_cp(preds_original: Array, preds_counterfactual: Array) -> float:
    """Mean absolute prediction shift between a row and its generated twin."""
    a = np.asarray(preds_original, dtype=np.float64).ravel()
    b = np.asarray(preds_counterfactual, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError("counterfactual predictions must align with the originals")
    if a.size == 0:
        raise DataError("delta_cp of empty input")
    return float(np.mean(np.abs(a - b)))


def leakage_auc(embeddings: Array, sensitive_labels: Array, l2: float = 1e-4,
                iters: int = 2000, train_frac: float = 0.7, seed: int = 0) -> float:
    """Held-out AUC of a logistic probe predicting the group from embeddings.

    Uses an internal stratified split so callers can hand in one matrix.
    Multi-group data scores one-vs-rest per group and reports the mean.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(sensitive_labels).ravel()
    if embeddings.shape[0] != labels.shape[0]:
        raise DataError("embeddings and sensitive labels must align")
    ids, masks = _group_ids(labels)
    rng = np.random.default_rng(seed)
    train_idx: list[Array] = []
    test_idx: list[Array] = []
    for g, mask in zip(ids, masks):
        members = np.flatnonzero(mask)
        if members.size < 2:
            raise DataError(f"group {g!r} has fewer than 2 rows; cannot split")
        members = rng.permutation(members)
        n_train = min(max(1, round(train_frac * members.size)), members.size - 1)
        train_idx.append(members[:n_train])
        test_idx.append(members[n_train:])
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)

    targets = ids[1:] if len(ids) == 2 else ids
    aucs = []
    for g in targets:
        y = (labels == g).astype(np.float64)
        probe = fit_probe(embeddings[tr], y[tr], "logistic", l2, iters)
        aucs.append(auc(probe.scores(embeddings[te]), y[te]))
    return float(np.mean(aucs))


# ---------------------------------------------------------------------------
# run-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    logistic_l2: float = 1e-4
    logistic_iters: int = 2000
    ridge_l2: float = 1e-2

    def validate(self) -> None:
        if self.logistic_iters < 1:
            raise DataError("logistic_iters must be >= 1")
        if self.logistic_l2 < 0 or self.ridge_l2 < 0:
            raise DataError("penalties must be nonnegative")


@dataclass
class MetricsReport:
    """Per-snapshot metric values plus their mean."""

    task: str
    metric_names: tuple[str, ...]
    per_snapshot: list[dict[str, float]] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[dict[str, object]]:
        out: list[dict[str, object]] = []
        for i, vals in enumerate(self.per_snapshot, start=1):
            out.append({"snapshot": str(i), **vals})
        out.append({"snapshot": "mean", **self.mean})
        return out

    def summary(self) -> str:
        lines = [f"task: {self.task}  snapshots: {len(self.per_snapshot)}"]
        for name in self.metric_names:
            vals = [row[name] for row in self.per_snapshot]
            lines.append(f"{name}: mean {self.mean[name]:.4f}  "
                         f"min {min(vals):.4f}  max {max(vals):.4f}")
        return "\n".join(lines)


def evaluate_run(snapshots: list[EncoderStack], stack_encoder: FeatureEncoder,
                 ds_train: Dataset, ds_test: Dataset,
                 generator: CvaeModel | None = None,
                 probe: ProbeConfig | None = None,
                 rng: np.random.Generator | None = None) -> MetricsReport:
    """Score every snapshot on held-out data and average the results.

    Each snapshot embeds train and test rows, a fresh probe is fitted on the
    train embeddings, and all applicable metrics are computed on test. The
    counterfactual shift uses generated twins of the test rows pushed through
    the same snapshot and probe; without a generator the column is omitted.
    """
    if not snapshots:
        raise DataError("evaluate_run needs at least one snapshot")
    probe = probe or ProbeConfig()
    probe.validate()
    rng = rng if rng is not None else np.random.default_rng(0)

    ed_train = encode(stack_encoder, ds_train)
    ed_test = encode(stack_encoder, ds_test)
    task = ed_train.task

    cf_matrix = None
    if generator is not None:
        cf_matrix = counterfactual_rows(generator, stack_encoder, ds_test, rng)

    if task == "classification":
        names = ["auc", "delta_dp", "delta_eo"]
    else:
        names = ["rmse", "delta_dp"]
    if cf_matrix is not None:
        names.append("delta_cp")
    names.append("leakage_auc")

    per_snapshot: list[dict[str, float]] = []
    for stack in snapshots:
        z_train = embed(stack, ed_train.matrix)
        z_test = embed(stack, ed_test.matrix)
        row: dict[str, float] = {}
        if task == "classification":
            model = fit_probe(z_train, ed_train.targets, "logistic",
                              probe.logistic_l2, probe.logistic_iters)
            probs = model.scores(z_test)
            hard = model.predict(z_test)
            row["auc"] = auc(probs, ed_test.targets)
            row["delta_dp"] = delta_dp(hard, ed_test.sensitive_labels)
            row["delta_eo"] = delta_eo(hard, ed_test.targets, ed_test.sensitive_labels)
            if cf_matrix is not None:
                row["delta_cp"] = delta_cp(probs, model.scores(embed(stack, cf_matrix)))
        else:
            model = fit_probe(z_train, ed_train.targets, "ridge", probe.ridge_l2)
            preds = model.scores(z_test)
            row["rmse"] = rmse(preds, ed_test.targets)
            row["delta_dp"] = delta_dp(preds, ed_test.sensitive_labels)
            if cf_matrix is not None:
                row["delta_cp"] = delta_cp(preds, model.scores(embed(stack, cf_matrix)))
        row["leakage_auc"] = leakage_auc(z_test, ed_test.sensitive_labels,
                                         probe.logistic_l2, probe.logistic_iters)
        per_snapshot.append(row)

    mean = {name: float(np.mean([r[name] for r in per_snapshot])) for name in names}
    return MetricsReport(task, tuple(names), per_snapshot, mean)


# ---------------------------------------------------------------------------
# density data for plots
# ---------------------------------------------------------------------------


@dataclass
class DensityData:
    edges: Array  # n_bins + 1 boundaries
    by_group: dict[str, Array]  # group -> probability mass per bin

    def rows(self) -> list[dict[str, object]]:
        out: list[dict[str, object]] = []
        for group in sorted(self.by_group):
            probs = self.by_group[group]
            for i, p in enumerate(probs):
                out.append({"group": group, "bin_lo": float(self.edges[i]),
                            "bin_hi": float(self.edges[i + 1]), "prob": float(p)})
        return out


def density_data(preds: Array, groups: Array, n_bins: int = 20,
                 value_range: tuple[float, float] | None = None) -> DensityData:
    """Per-group normalized histograms of predictions.

    Defaults to the [0,1] probability range; pass an explicit range for
    regression outputs. Every group's masses sum to 1.
    """
    if n_bins < 2:
        raise DataError("n_bins must be >= 2")
    preds = np.asarray(preds, dtype=np.float64).ravel()
    groups = np.asarray(groups).ravel()
    if preds.size == 0:
        raise DataError("density_data of empty input")
    if preds.shape != groups.shape:
        raise DataError("predictions and groups must align")
    if value_range is None:
        value_range = (0.0, 1.0)
    lo, hi = value_range
    if not hi > lo:
        raise DataError("value range must be increasing")
    edges = np.linspace(lo, hi, n_bins + 1)
    by_group: dict[str, Array] = {}
    for g in sorted(np.unique(groups).tolist()):
        vals = np.clip(preds[groups == g], lo, hi)
        counts, _ = np.histogram(vals, bins=edges)
        by_group[str(g)] = counts / counts.sum()
    return DensityData(edges, by_group)
