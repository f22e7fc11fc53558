"""Fairness-aware encoder training.

The encoder stack is a backbone trunk, a projection onto the served
representation, and two small heads: one for the contrastive objective,
one for self-distillation. Per same-group batch, the contrastive loss
pulls each row's embedding toward its generated counterfactual twin and
pushes the batch's embedding cloud toward a shared Gaussian prior via
sliced Wasserstein distance. The distillation loss matches a perturbed
row's (student) embedding to the frozen original (teacher) embedding.

Losses are pure functions of (stack, batch, frozen noise) so every one
of them is finite-difference checkable; the trainer draws the noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import cvae as cvae_io
from . import neural as nn
from .cvae import CvaeModel, TrainingDiverged, flip_targets, group_indices, make_counterfactual
from .neural import AdamState, MlpParams, MlpSpec, Tensor, mlp_spec
from .tabular import DataError, Dataset, EncodedDataset, FeatureEncoder, decode, encode, sample_group_batch

Array = np.ndarray

AUGMENTATIONS = ("tabmix", "gaussian", "dropout")


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    hidden: int = 256
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-6
    n_projections: int = 50
    snapshot_count: int = 10
    use_self_kd: bool = True
    use_align: bool = True
    use_distribution: bool = True
    augmentation: str = "tabmix"

    def validate(self) -> None:
        for name in ("embed_dim", "hidden", "epochs", "batch_size",
                     "n_projections", "snapshot_count"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise DataError("lr must be positive")
        if self.weight_decay < 0:
            raise DataError("weight_decay must be >= 0")
        if self.augmentation not in AUGMENTATIONS:
            raise DataError(f"augmentation must be one of {AUGMENTATIONS}")


@dataclass(frozen=True)
class PriorSpec:
    """Standard Gaussian prior in embedding space, plus SWD settings."""

    embed_dim: int
    n_projections: int = 50
    swd_power: int = 2

    def __post_init__(self):
        if self.n_projections < 1:
            raise DataError("n_projections must be >= 1")


class EncoderStack:
    """Backbone + projection trunk with contrastive and distillation heads.

    The representation served downstream is projection(backbone(x)); the
    contrastive loss acts through contrast_head, distillation through
    distill_head.
    """

    def __init__(self, in_dim: int, config: EncoderConfig, rng: np.random.Generator):
        config.validate()
        h, e = config.hidden, config.embed_dim
        self.backbone_spec = mlp_spec(in_dim, h, h, h, final_activation="relu")
        self.projection_spec = mlp_spec(h, h, e)
        self.contrast_spec = mlp_spec(e, h, e)
        self.distill_spec = mlp_spec(e, h, e)
        self.backbone = nn.init_mlp(self.backbone_spec, rng)
        self.projection = nn.init_mlp(self.projection_spec, rng)
        self.contrast_head = nn.init_mlp(self.contrast_spec, rng)
        self.distill_head = nn.init_mlp(self.distill_spec, rng)
        self.config = config
        self.in_dim = in_dim
        self.embed_dim = e

    def params(self) -> list[Tensor]:
        return (self.backbone.tensors() + self.projection.tensors()
                + self.contrast_head.tensors() + self.distill_head.tensors())

    def represent(self, x) -> Tensor:
        """Graph forward of the served representation projection(backbone(x))."""
        return nn.mlp_forward(self.projection, self.projection_spec,
                              nn.mlp_forward(self.backbone, self.backbone_spec, x))

    def contrast(self, x) -> Tensor:
        return nn.mlp_forward(self.contrast_head, self.contrast_spec,
                              self.represent(x))

    def distill(self, x) -> Tensor:
        return nn.mlp_forward(self.distill_head, self.distill_spec,
                              self.represent(x))

    def represent_data(self, x: Array) -> Array:
        """Graph-free representation, used for teacher passes and embed()."""
        hidden = nn.mlp_forward_data(self.backbone, self.backbone_spec, x)
        return nn.mlp_forward_data(self.projection, self.projection_spec, hidden)

    def stacks(self) -> dict[str, tuple[MlpSpec, MlpParams]]:
        return {
            "backbone": (self.backbone_spec, self.backbone),
            "projection": (self.projection_spec, self.projection),
            "contrast_head": (self.contrast_spec, self.contrast_head),
            "distill_head": (self.distill_spec, self.distill_head),
        }

    def clone_arrays(self) -> dict[str, list[Array]]:
        return {name: [a.copy() for a in params.arrays()]
                for name, (_, params) in self.stacks().items()}

    def load_arrays(self, arrays: dict[str, list[Array]]) -> None:
        for name, (spec, _) in self.stacks().items():
            rebuilt = nn.mlp_from_arrays(spec, arrays[name])
            setattr(self, {"backbone": "backbone", "projection": "projection",
                           "contrast_head": "contrast_head",
                           "distill_head": "distill_head"}[name], rebuilt)


def embed(stack: EncoderStack, matrix: Array) -> Array:
    """Served embeddings, one row per input row; deterministic."""
    matrix = np.atleast_2d(matrix)
    if matrix.shape[1] != stack.in_dim:
        raise DataError(f"row width {matrix.shape[1]} != encoder input {stack.in_dim}")
    return stack.represent_data(matrix)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixMask:
    """Span-consistent keep-mask: 1 keeps the anchor's value, 0 takes the partner's."""

    keep: Array  # (d,) of {0.0, 1.0}
    k: int       # number of replaced (non-sensitive) columns


def nonsensitive_columns(spans: dict[str, tuple[int, int]],
                         sensitive_column: str) -> list[str]:
    return [name for name in spans if name != sensitive_column]


def make_mix_mask(spans: dict[str, tuple[int, int]], sensitive_column: str,
                  dim: int, rng: np.random.Generator) -> MixMask:
    """Replace ceil(half) of the non-sensitive columns, chosen uniformly."""
    names = nonsensitive_columns(spans, sensitive_column)
    k = math.ceil(0.5 * len(names))
    picked = rng.choice(len(names), size=k, replace=False)
    keep = np.ones(dim)
    for i in picked:
        start, stop = spans[names[i]]
        keep[start:stop] = 0.0
    return MixMask(keep, k)


def tabmix(x_i: Array, x_j: Array, mask: MixMask) -> Array:
    """keep*x_i + (1-keep)*x_j; the sensitive span always comes from x_i."""
    if x_i.shape != x_j.shape:
        raise DataError("tabmix rows must have equal width")
    return mask.keep * x_i + (1.0 - mask.keep) * x_j


def _check_span_consistent(mask: MixMask, spans: dict[str, tuple[int, int]],
                           sensitive_column: str) -> None:
    for name, (start, stop) in spans.items():
        vals = set(mask.keep[start:stop].tolist())
        if len(vals) > 1:
            raise DataError(f"mask not constant over span {name!r}")
        if name == sensitive_column and vals != {1.0}:
            raise DataError("mask must keep the sensitive span")


def perturb_batch(x: Array, ed: EncodedDataset, batch_indices: Array,
                  mode: str, rng: np.random.Generator) -> Array:
    """Perturbed copies of x for the distillation branch.

    tabmix: per row, replace half of the non-sensitive columns with the
    same columns of a partner row drawn from the rest of the dataset.
    gaussian: add N(0, 0.1^2) to continuous values of non-sensitive spans.
    dropout: zero half of the non-sensitive spans per row.
    """
    spans = ed.column_spans
    out = np.empty_like(x)
    if mode == "tabmix":
        for r in range(x.shape[0]):
            partner = int(rng.integers(0, ed.n - 1))
            if partner >= batch_indices[r]:
                partner += 1  # partner drawn from the dataset minus the anchor
            mask = make_mix_mask(spans, ed.sensitive_column, ed.dim, rng)
            out[r] = tabmix(x[r], ed.matrix[partner], mask)
        return out
    if mode == "gaussian":
        noise = rng.normal(0.0, 0.1, size=x.shape)
        scale = np.zeros(ed.dim)
        for name, (start, stop) in spans.items():
            if name == ed.sensitive_column:
                continue
            if stop - start == 1:
                scale[start] = 1.0       # z-scored value
            elif stop - start > 1:
                scale[start] = 1.0       # mode-specific residual only
        return x + noise * scale
    if mode == "dropout":
        for r in range(x.shape[0]):
            mask = make_mix_mask(spans, ed.sensitive_column, ed.dim, rng)
            out[r] = x[r] * mask.keep
        return out
    raise DataError(f"unknown augmentation {mode!r}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def swd_loss(z: Tensor, directions: Array, sorted_prior_projections: Array) -> Tensor:
    """Mean over directions of the squared-gap 1-D transport cost.

    directions: (embed_dim, P) unit columns. sorted_prior_projections:
    (n, P), each column ascending. Differentiable through the sort of
    the sample projections.
    """
    projections = nn.matmul(z, Tensor(directions))
    gaps = nn.sort_columns(projections) - Tensor(sorted_prior_projections)
    return nn.tmean(nn.square(gaps))


def draw_swd_noise(n: int, prior: PriorSpec,
                   rng: np.random.Generator) -> tuple[Array, Array]:
    """Unit projection directions and sorted projections of a fresh prior sample."""
    directions = rng.standard_normal((prior.embed_dim, prior.n_projections))
    norms = np.linalg.norm(directions, axis=0, keepdims=True)
    directions = directions / np.where(norms > 0, norms, 1.0)
    prior_sample = rng.standard_normal((n, prior.embed_dim))
    prior_projections = np.sort(prior_sample @ directions, axis=0)
    return directions, prior_projections


def swd(sample, prior: PriorSpec, rng: np.random.Generator,
        prior_sample: Array | None = None) -> Tensor:
    """Sliced Wasserstein-2 cost between a sample and the Gaussian prior.

    A prior_sample may be supplied (e.g. to share draws with the sample
    itself); otherwise an equal-size sample is drawn fresh from rng.
    """
    z = sample if isinstance(sample, Tensor) else Tensor(sample)
    if z.data.ndim != 2 or z.data.shape[0] < 2:
        raise DataError("swd needs at least 2 sample rows")
    directions, prior_projections = draw_swd_noise(z.data.shape[0], prior, rng)
    if prior_sample is not None:
        prior_projections = np.sort(np.atleast_2d(prior_sample) @ directions, axis=0)
    return swd_loss(z, directions, prior_projections)


def align_loss(emb_x, emb_pos) -> Tensor:
    """Mean Euclidean distance between anchor and positive embeddings."""
    a = emb_x if isinstance(emb_x, Tensor) else Tensor(emb_x)
    b = emb_pos if isinstance(emb_pos, Tensor) else Tensor(emb_pos)
    if a.data.shape != b.data.shape:
        raise DataError("align_loss embeddings must have equal shape")
    return nn.tmean(nn.l2norm_rows(a - b))


def fair_contrastive_loss(stack: EncoderStack, batch: Array, counterfactuals: Array,
                          prior: PriorSpec, directions: Array,
                          sorted_prior_projections: Array,
                          use_align: bool = True,
                          use_distribution: bool = True,
                          sensitive_span: tuple[int, int] | None = None) -> Tensor:
    """Counterfactual alignment plus distance-to-prior of the batch cloud.

    The batch must be single-group (checked when sensitive_span is
    given); the SWD term is computed once on the whole batch, since
    every anchor shares the same negative set.
    """
    if sensitive_span is not None:
        start, stop = sensitive_span
        if np.unique(batch[:, start:stop], axis=0).shape[0] > 1:
            raise DataError("fair_contrastive_loss batch mixes sensitive groups")
    emb = stack.contrast(batch)
    total = None
    if use_align:
        total = align_loss(emb, stack.contrast(counterfactuals))
    if use_distribution:
        term = swd_loss(emb, directions, sorted_prior_projections)
        total = term if total is None else total + term
    if total is None:
        total = nn.tmean(emb * 0.0)  # both terms ablated: constant zero
    return total


def self_kd_loss(stack: EncoderStack, x: Array, x_pert: Array) -> Tensor:
    """Negative cosine between student (perturbed) and frozen teacher embeddings."""
    student = stack.distill(x_pert)
    teacher = stack.represent_data(x)  # no graph: stop-gradient by construction
    t_norms = np.linalg.norm(teacher, axis=1, keepdims=True)
    s_norms = nn.l2norm_rows(student)
    if np.any(t_norms < 1e-12) or np.any(s_norms.data < 1e-12):
        raise DataError("zero-norm embedding in self_kd_loss")
    dots = nn.tsum(student * Tensor(teacher / t_norms), axis=1, keepdims=True)
    return -nn.tmean(dots / s_norms)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EncoderHistory:
    epochs: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    align: list[float] = field(default_factory=list)
    distribution: list[float] = field(default_factory=list)
    self_kd: list[float] = field(default_factory=list)
    group_mean_gap: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        keys = ("epochs", "total", "align", "distribution", "self_kd",
                "group_mean_gap")
        return [dict(zip(keys, vals)) for vals in
                zip(self.epochs, self.total, self.align, self.distribution,
                    self.self_kd, self.group_mean_gap)]


@dataclass
class TrainedEncoder:
    stack: EncoderStack
    snapshots: list[dict[str, list[Array]]]  # parameter arrays of the last epochs
    history: EncoderHistory


def check_generator_compatible(generator: CvaeModel, enc: FeatureEncoder) -> None:
    """Fail before training when the generator was fitted on different data."""
    g = generator.feature_encoder
    if g.schema.columns != enc.schema.columns:
        raise DataError("generator encoding mismatch: column layout differs")
    if g.schema.sensitive_column != enc.schema.sensitive_column:
        raise DataError("generator encoding mismatch: sensitive column differs")
    if g.groups != enc.groups:
        raise DataError("generator encoding mismatch: group vocabulary differs")


def counterfactual_rows(generator: CvaeModel, stack_encoder: FeatureEncoder,
                        ds_rows: Dataset, rng: np.random.Generator,
                        target_idx: Array | None = None) -> Array:
    """Generate counterfactual twins and re-encode them for the stack.

    Rows cross the encoding bridge: generator-space encoding in, decoded
    raw values out, stack-space encoding returned.
    """
    gen_ed = encode(generator.feature_encoder, ds_rows)
    gidx = group_indices(generator, gen_ed.sensitive_labels)
    if target_idx is None:
        target_idx = flip_targets(generator.feature_encoder.groups, gidx, rng)
    flipped = make_counterfactual(generator, gen_ed.matrix, gidx, target_idx, rng)
    raw = decode(generator.feature_encoder, flipped)
    cf_ed = encode(stack_encoder, _with_schema(raw, ds_rows.schema, ds_rows))
    return cf_ed.matrix


def _with_schema(feature_rows: Dataset, schema, original: Dataset) -> Dataset:
    """Reattach the original target column so the stack encoder accepts the rows."""
    if schema.target_column is None:
        return feature_rows
    columns = dict(feature_rows.columns)
    columns[schema.target_column] = list(original.columns[schema.target_column])
    return Dataset(schema, columns)


def train_encoder(stack: EncoderStack, ed: EncodedDataset, ds: Dataset,
                  stack_encoder: FeatureEncoder, generator: CvaeModel,
                  rng: np.random.Generator, log_every: int = 0) -> TrainedEncoder:
    """Train with round-robin group batches; keep the last epochs' snapshots.

    Per step: draw one group's batch, generate counterfactual twins,
    build perturbed rows for distillation, and take one Adam step on
    contrastive + distillation losses.
    """
    cfg = stack.config
    check_generator_compatible(generator, stack_encoder)
    prior = PriorSpec(cfg.embed_dim, cfg.n_projections)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = stack.params()
    groups = ed.groups
    history = EncoderHistory()
    snapshots: list[dict[str, list[Array]]] = []
    steps_per_epoch = max(1, math.ceil(ed.n / cfg.batch_size))
    step_counter = 0

    for epoch in range(1, cfg.epochs + 1):
        sums = dict(total=0.0, align=0.0, distribution=0.0, self_kd=0.0)
        for _ in range(steps_per_epoch):
            group = groups[step_counter % len(groups)]
            step_counter += 1
            batch = sample_group_batch(ed, group, cfg.batch_size, rng)
            x = ed.matrix[batch.indices]

            cf = counterfactual_rows(generator, stack_encoder,
                                     ds.subset(batch.indices), rng)
            directions, prior_proj = draw_swd_noise(len(batch.indices), prior, rng)

            nn.zero_grads(params)
            loss = fair_contrastive_loss(stack, x, cf, prior, directions,
                                         prior_proj, cfg.use_align,
                                         cfg.use_distribution,
                                         sensitive_span=ed.sensitive_span)
            parts = {
                "align": float(align_loss(Tensor(_contrast_data(stack, x)),
                                          Tensor(_contrast_data(stack, cf))).data)
                if cfg.use_align else 0.0,
                "distribution": 0.0,
                "self_kd": 0.0,
            }
            if cfg.use_distribution:
                parts["distribution"] = float(swd_loss(
                    Tensor(_contrast_data(stack, x)), directions, prior_proj).data)
            if cfg.use_self_kd:
                x_pert = perturb_batch(x, ed, batch.indices,
                                       cfg.augmentation, rng)
                kd = self_kd_loss(stack, x, x_pert)
                parts["self_kd"] = float(kd.data)
                loss = loss + kd
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite encoder loss at epoch {epoch}, group {group}")
            nn.backward(loss)
            nn.adam_step(opt, params)

            sums["total"] += float(loss.data) / steps_per_epoch
            for key in ("align", "distribution", "self_kd"):
                sums[key] += parts[key] / steps_per_epoch

        emb_all = embed(stack, ed.matrix)
        means = [emb_all[ed.sensitive_labels == g].mean(axis=0) for g in groups]
        gap = float(np.mean([np.linalg.norm(means[i] - means[j])
                             for i in range(len(groups))
                             for j in range(i + 1, len(groups))]))
        history.epochs.append(epoch)
        history.total.append(sums["total"])
        history.align.append(sums["align"])
        history.distribution.append(sums["distribution"])
        history.self_kd.append(sums["self_kd"])
        history.group_mean_gap.append(gap)

        if epoch > cfg.epochs - cfg.snapshot_count:
            snapshots.append(stack.clone_arrays())
        if log_every and epoch % log_every == 0:
            print(f"[encoder] epoch {epoch}/{cfg.epochs} total={sums['total']:.4f} "
                  f"gap={gap:.4f}")

    return TrainedEncoder(stack, snapshots, history)


def _contrast_data(stack: EncoderStack, x: Array) -> Array:
    rep = stack.represent_data(x)
    return nn.mlp_forward_data(stack.contrast_head, stack.contrast_spec, rep)


def stack_from_snapshot(in_dim: int, config: EncoderConfig,
                        arrays: dict[str, list[Array]]) -> EncoderStack:
    stack = EncoderStack(in_dim, replace(config), np.random.default_rng(0))
    stack.load_arrays(arrays)
    return stack


def save_stack(path, stack: EncoderStack, feature_encoder: FeatureEncoder) -> None:
    """Self-contained snapshot: encoder config, feature encoding, all arrays."""
    meta = {
        "version": cvae_io.CHECKPOINT_VERSION,
        "kind": "encoder_stack",
        "config": vars(stack.config),
        "in_dim": stack.in_dim,
        "feature_encoder": cvae_io._encoder_to_json(feature_encoder),
    }
    arrays = {}
    for name, (_, params) in stack.stacks().items():
        for i, arr in enumerate(params.arrays()):
            arrays[f"{name}_{i}"] = arr
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_stack(path) -> tuple[EncoderStack, FeatureEncoder]:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        if meta.get("kind") != "encoder_stack":
            raise DataError(f"{path} is not an encoder snapshot")
        if meta.get("version") != cvae_io.CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        enc = cvae_io._encoder_from_json(meta["feature_encoder"])
        config = EncoderConfig(**meta["config"])
        stack = EncoderStack(int(meta["in_dim"]), config, np.random.default_rng(0))
        arrays = {}
        for name, (spec, _) in stack.stacks().items():
            n = 2 * len(spec.widths)
            arrays[name] = [blob[f"{name}_{i}"] for i in range(n)]
        stack.load_arrays(arrays)
    return stack, enc
