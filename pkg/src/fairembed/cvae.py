"""Counterfactual sample generator.

A conditional VAE over encoded feature rows: the encoder infers a
latent from the full row, the decoder reconstructs the non-sensitive
spans from (latent, group one-hot), and an adversarial discriminator
scrubs group information out of the latent. A cyclic loss ties the
double-flipped reconstruction back to the original row, so decoding a
latent under the flipped group yields that row's counterfactual twin.

All losses are pure functions of (model, batch, frozen noise); training
wrappers draw the noise. That keeps every loss finite-difference
checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from .neural import AdamState, MlpParams, MlpSpec, Tensor, mlp_spec
from .tabular import (
    DataError,
    EncodedDataset,
    FeatureEncoder,
    ModeSpecificCodec,
    OneHotCodec,
    ZScoreCodec,
)

Array = np.ndarray

LOGVAR_MIN, LOGVAR_MAX = -6.0, 6.0


class TrainingDiverged(RuntimeError):
    """Raised when a loss or parameter goes non-finite mid-run."""


@dataclass
class CvaeConfig:
    latent_dim: int = 16
    hidden: int = 256
    epochs: int = 600
    batch_size: int = 256
    lr: float = 1e-3
    recon_weight: float = 2.0
    kl_weight: float = 1.0
    adv_weight: float = 1.0
    cyc_weight: float = 1.0

    def validate(self) -> None:
        counts = dict(latent_dim=self.latent_dim, hidden=self.hidden,
                      epochs=self.epochs, batch_size=self.batch_size)
        for name, v in counts.items():
            if v < 1:
                raise DataError(f"{name} must be >= 1, got {v}")
        if self.lr <= 0:
            raise DataError("lr must be positive")
        weights = dict(recon_weight=self.recon_weight, kl_weight=self.kl_weight,
                       adv_weight=self.adv_weight, cyc_weight=self.cyc_weight)
        for name, v in weights.items():
            if v < 0:
                raise DataError(f"{name} must be >= 0, got {v}")


class CvaeModel:
    """Encoder / decoder / discriminator stacks over one feature encoding."""

    def __init__(self, enc: FeatureEncoder, config: CvaeConfig,
                 rng: np.random.Generator):
        config.validate()
        self.encoder_spec = mlp_spec(enc.dim, config.hidden, config.hidden,
                                     2 * config.latent_dim)
        n_groups = len(enc.groups)
        sens_start, sens_stop = enc.sensitive_span
        out_dim = enc.dim - (sens_stop - sens_start)
        self.decoder_spec = mlp_spec(config.latent_dim + n_groups,
                                     config.hidden, out_dim)
        self.disc_spec = mlp_spec(config.latent_dim, config.hidden, n_groups)
        self.encoder = nn.init_mlp(self.encoder_spec, rng)
        self.decoder = nn.init_mlp(self.decoder_spec, rng)
        self.disc = nn.init_mlp(self.disc_spec, rng)
        self.config = config
        self.feature_encoder = enc
        self.latent_dim = config.latent_dim
        # non-sensitive spans, remapped to decoder-output coordinates
        self.output_spans = _nonsensitive_spans(enc)

    def generator_params(self) -> list[Tensor]:
        return self.encoder.tensors() + self.decoder.tensors()

    def all_params(self) -> list[Tensor]:
        return self.generator_params() + self.disc.tensors()


def _nonsensitive_spans(enc: FeatureEncoder) -> list[tuple[str, str, int, int]]:
    """(column, kind, start, stop) for each non-sensitive span, in decoder output order.

    Kind distinguishes how a span is scored and materialized: "categorical"
    spans are logits end to end; "mode_specific" spans are a continuous
    residual in column 0 followed by mode-id logits; "zscore" spans are a
    single mean.
    """
    spans, offset = [], 0
    for col in enc.schema.feature_columns:
        if col.name == enc.schema.sensitive_column:
            continue
        codec = enc.codecs[col.name]
        if isinstance(codec, OneHotCodec):
            kind = "categorical"
        elif isinstance(codec, ModeSpecificCodec):
            kind = "mode_specific"
        else:
            kind = "zscore"
        spans.append((col.name, kind, offset, offset + codec.width))
        offset += codec.width
    return spans


def strip_sensitive(model: CvaeModel, x: Array) -> Array:
    start, stop = model.feature_encoder.sensitive_span
    return np.concatenate([x[:, :start], x[:, stop:]], axis=1)


def insert_sensitive(model: CvaeModel, nonsens: Tensor, group_onehots: Array) -> Tensor:
    """Rebuild a full-width row tensor with the given sensitive one-hots."""
    start, _ = model.feature_encoder.sensitive_span
    return nn.concat_cols([
        nn.slice_cols(nonsens, 0, start),
        Tensor(group_onehots),
        nn.slice_cols(nonsens, start, nonsens.data.shape[1]),
    ])


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def cvae_encode(model: CvaeModel, x, eps: Array) -> tuple[Tensor, Tensor, Tensor]:
    """Reparameterized latent: u = mu + exp(logvar/2) * eps, logvar clamped."""
    out = nn.mlp_forward(model.encoder, model.encoder_spec, x)
    k = model.latent_dim
    mu = nn.slice_cols(out, 0, k)
    logvar = nn.clip(nn.slice_cols(out, k, 2 * k), LOGVAR_MIN, LOGVAR_MAX)
    u = mu + nn.exp(logvar * 0.5) * Tensor(eps)
    return u, mu, logvar


def encode_latent_data(model: CvaeModel, x: Array, eps: Array) -> Array:
    """Plain-numpy reparameterized latent, for graph-free passes."""
    out = nn.mlp_forward_data(model.encoder, model.encoder_spec, x)
    k = model.latent_dim
    mu, logvar = out[:, :k], np.clip(out[:, k:], LOGVAR_MIN, LOGVAR_MAX)
    return mu + np.exp(logvar * 0.5) * eps


def cvae_decode(model: CvaeModel, u: Tensor, group_onehots: Array) -> Tensor:
    """Non-sensitive reconstruction: logits for one-hot spans, means elsewhere."""
    if group_onehots.shape[1] != len(model.feature_encoder.groups):
        raise DataError("group one-hot width mismatch")
    joined = nn.concat_cols([u, Tensor(group_onehots)])
    return nn.mlp_forward(model.decoder, model.decoder_spec, joined)


def soften(model: CvaeModel, decoded: Tensor) -> Tensor:
    """Softmax all logit sub-spans of a decoder output, keep means as-is.

    Used on the inner pass of the cyclic loss so the second encoding
    stays differentiable; hard argmax happens only when materializing rows.
    """
    parts = []
    for _, kind, start, stop in model.output_spans:
        block = nn.slice_cols(decoded, start, stop)
        if kind == "categorical":
            parts.append(nn.softmax_rows(block))
        elif kind == "mode_specific":
            parts.append(nn.slice_cols(block, 0, 1))
            parts.append(nn.softmax_rows(nn.slice_cols(block, 1, stop - start)))
        else:
            parts.append(block)
    return nn.concat_cols(parts)


def _argmax_onehot(block: Array) -> None:
    picks = np.argmax(block, axis=1)
    block[:] = 0.0
    block[np.arange(block.shape[0]), picks] = 1.0


def harden(model: CvaeModel, decoded: Array) -> Array:
    """Materialize a decoder output: argmax every logit sub-span, keep means."""
    out = decoded.copy()
    for _, kind, start, stop in model.output_spans:
        if kind == "categorical":
            _argmax_onehot(out[:, start:stop])
        elif kind == "mode_specific":
            _argmax_onehot(out[:, start + 1:stop])
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def recon_nll(model: CvaeModel, decoded: Tensor, target_nonsens: Array) -> Tensor:
    """Per-row NLL summed over spans, averaged over the batch.

    Cross-entropy on logit sub-spans (one-hot columns and mode
    indicators), squared error on continuous values.
    """

    def ce(block, target):
        return nn.tsum(nn.log_softmax_rows(block) * Tensor(-target), axis=1)

    def sq(block, target):
        return nn.tsum(nn.square(block - Tensor(target)), axis=1)

    total = None
    for _, kind, start, stop in model.output_spans:
        block = nn.slice_cols(decoded, start, stop)
        target = target_nonsens[:, start:stop]
        if kind == "categorical":
            span_nll = ce(block, target)
        elif kind == "mode_specific":
            span_nll = (sq(nn.slice_cols(block, 0, 1), target[:, :1])
                        + ce(nn.slice_cols(block, 1, stop - start), target[:, 1:]))
        else:
            span_nll = sq(block, target)
        total = span_nll if total is None else total + span_nll
    return nn.tmean(total)


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(q(u|x) || N(0,I)) = 0.5 * sum(mu^2 + e^logvar - logvar - 1), batch mean."""
    per_row = nn.tsum(nn.square(mu) + nn.exp(logvar) - logvar - 1.0, axis=1)
    return nn.tmean(per_row) * 0.5


def loss_vae(model: CvaeModel, x: Array, group_onehots: Array, eps: Array) -> Tensor:
    """KL + weighted reconstruction NLL of the non-sensitive spans."""
    u, mu, logvar = cvae_encode(model, x, eps)
    decoded = cvae_decode(model, u, group_onehots)
    kl = kl_standard_normal(mu, logvar)
    recon = recon_nll(model, decoded, strip_sensitive(model, x))
    return model.config.kl_weight * kl + model.config.recon_weight * recon


def loss_adv(model: CvaeModel, u: Tensor, group_idx: Array) -> Tensor:
    """Cross-entropy of the latent discriminator against the true group."""
    logits = nn.mlp_forward(model.disc, model.disc_spec, u)
    onehot = np.eye(len(model.feature_encoder.groups))[group_idx]
    return nn.tmean(nn.tsum(nn.log_softmax_rows(logits) * Tensor(-onehot), axis=1))


def _cyc_nll(model: CvaeModel, u1: Tensor, x: Array, group_onehots: Array,
             flipped_onehots: Array, eps2: Array) -> Tensor:
    flipped_soft = soften(model, cvae_decode(model, u1, flipped_onehots))
    full_flipped = insert_sensitive(model, flipped_soft, flipped_onehots)
    u2, _, _ = cvae_encode(model, full_flipped, eps2)
    decoded_back = cvae_decode(model, u2, group_onehots)
    return recon_nll(model, decoded_back, strip_sensitive(model, x))


def loss_cyc(model: CvaeModel, x: Array, group_onehots: Array,
             flipped_onehots: Array, eps1: Array, eps2: Array) -> Tensor:
    """Double-flip reconstruction NLL.

    x is encoded under its group, decoded under the flipped group (soft
    outputs), re-encoded, decoded under the original group, and scored
    against the original row. Gradients flow through both passes.
    """
    u1, _, _ = cvae_encode(model, x, eps1)
    return _cyc_nll(model, u1, x, group_onehots, flipped_onehots, eps2)


def generator_loss(model: CvaeModel, x: Array, group_idx: Array,
                   flipped_idx: Array, eps1: Array, eps2: Array) -> Tensor:
    """Full generator objective: VAE + cyclic - adversarial.

    The adversarial term enters negated: the generator is rewarded when
    the discriminator cannot recover the group from the latent.
    """
    groups_eye = np.eye(len(model.feature_encoder.groups))
    onehots = groups_eye[group_idx]
    flipped = groups_eye[flipped_idx]
    u, mu, logvar = cvae_encode(model, x, eps1)
    decoded = cvae_decode(model, u, onehots)
    kl = kl_standard_normal(mu, logvar)
    recon = recon_nll(model, decoded, strip_sensitive(model, x))
    adv = loss_adv(model, u, group_idx)
    cyc = loss_cyc(model, x, onehots, flipped, eps1, eps2)
    cfg = model.config
    return (cfg.kl_weight * kl + cfg.recon_weight * recon
            - cfg.adv_weight * adv + cfg.cyc_weight * cyc)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def flip_targets(groups: tuple[str, ...], group_idx: Array,
                 rng: np.random.Generator) -> Array:
    """Flipped group per row: the other group when binary, else uniform over the rest."""
    n_groups = len(groups)
    if n_groups == 2:
        return 1 - group_idx
    offsets = rng.integers(1, n_groups, size=len(group_idx))
    return (group_idx + offsets) % n_groups


def make_counterfactual(model: CvaeModel, x: Array, group_idx: Array,
                        target_idx: Array, rng: np.random.Generator) -> Array:
    """Generate counterfactual rows: encode, decode under the target group.

    Output rows are materialized (hard one-hots, continuous means) and
    their sensitive span is exactly one-hot(target group).
    """
    x = np.atleast_2d(x)
    group_idx = np.asarray(group_idx)
    target_idx = np.asarray(target_idx)
    if np.any(target_idx == group_idx):
        raise DataError("counterfactual target equals the original group")
    eps = rng.standard_normal((x.shape[0], model.latent_dim))
    u, _, _ = cvae_encode(model, x, eps)
    onehots = np.eye(len(model.feature_encoder.groups))[target_idx]
    decoded = harden(model, cvae_decode(model, u, onehots).data)
    start, _ = model.feature_encoder.sensitive_span
    return np.concatenate([decoded[:, :start], onehots, decoded[:, start:]], axis=1)


def group_indices(model: CvaeModel, labels: Array) -> Array:
    index = {g: i for i, g in enumerate(model.feature_encoder.groups)}
    try:
        return np.asarray([index[g] for g in labels])
    except KeyError as exc:
        raise DataError(f"unknown group {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class GeneratorHistory:
    epochs: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    adv: list[float] = field(default_factory=list)
    cyc: list[float] = field(default_factory=list)
    disc_accuracy: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        keys = ("epochs", "total", "recon", "kl", "adv", "cyc", "disc_accuracy")
        return [dict(zip(keys, vals)) for vals in
                zip(self.epochs, self.total, self.recon, self.kl,
                    self.adv, self.cyc, self.disc_accuracy)]


def train_generator(model: CvaeModel, ed: EncodedDataset, rng: np.random.Generator,
                    log_every: int = 0) -> GeneratorHistory:
    """Alternating adversarial training: one discriminator step, one generator step.

    The discriminator sees detached latents; the generator minimizes
    VAE + cyclic - adversarial on the same batch.
    """
    cfg = model.config
    group_idx_all = group_indices(model, ed.sensitive_labels)
    gen_opt = AdamState(lr=cfg.lr)
    disc_opt = AdamState(lr=cfg.lr)
    gen_params = model.generator_params()
    disc_params = model.disc.tensors()
    history = GeneratorHistory()
    groups_eye = np.eye(len(model.feature_encoder.groups))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(ed.n)
        sums = dict(total=0.0, recon=0.0, kl=0.0, adv=0.0, cyc=0.0)
        disc_hits = 0
        for batch_start in range(0, ed.n, cfg.batch_size):
            idx = order[batch_start:batch_start + cfg.batch_size]
            x = ed.matrix[idx]
            gidx = group_idx_all[idx]
            fidx = flip_targets(model.feature_encoder.groups, gidx, rng)
            eps1 = rng.standard_normal((len(idx), cfg.latent_dim))
            eps2 = rng.standard_normal((len(idx), cfg.latent_dim))

            # discriminator on detached latents
            u_data = encode_latent_data(model, x, eps1)
            nn.zero_grads(disc_params)
            d_loss = loss_adv(model, Tensor(u_data), gidx)
            nn.backward(d_loss)
            nn.adam_step(disc_opt, disc_params)
            disc_logits = nn.mlp_forward_data(model.disc, model.disc_spec, u_data)
            disc_hits += int((np.argmax(disc_logits, axis=1) == gidx).sum())

            # generator step (discriminator params held fixed)
            nn.zero_grads(gen_params)
            u, mu, logvar = cvae_encode(model, x, eps1)
            decoded = cvae_decode(model, u, groups_eye[gidx])
            kl = kl_standard_normal(mu, logvar)
            recon = recon_nll(model, decoded, strip_sensitive(model, x))
            adv = loss_adv(model, u, gidx)
            cyc = _cyc_nll(model, u, x, groups_eye[gidx], groups_eye[fidx], eps2)
            total = (cfg.kl_weight * kl + cfg.recon_weight * recon
                     - cfg.adv_weight * adv + cfg.cyc_weight * cyc)
            if not np.isfinite(total.data):
                raise TrainingDiverged(
                    f"non-finite generator loss at epoch {epoch}, "
                    f"batch {batch_start // cfg.batch_size}")
            nn.backward(total)
            nn.adam_step(gen_opt, gen_params)

            w = len(idx) / ed.n
            for key, val in dict(total=total, recon=recon, kl=kl,
                                 adv=adv, cyc=cyc).items():
                sums[key] += float(val.data) * w

        history.epochs.append(epoch)
        history.total.append(sums["total"])
        history.recon.append(sums["recon"])
        history.kl.append(sums["kl"])
        history.adv.append(sums["adv"])
        history.cyc.append(sums["cyc"])
        history.disc_accuracy.append(disc_hits / ed.n)
        if log_every and epoch % log_every == 0:
            print(f"[generator] epoch {epoch}/{cfg.epochs} "
                  f"total={sums['total']:.4f} recon={sums['recon']:.4f} "
                  f"disc_acc={history.disc_accuracy[-1]:.3f}")
    return history


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _encoder_to_json(enc: FeatureEncoder) -> str:
    cols = [[c.name, c.kind] for c in enc.schema.columns]
    codecs = {}
    for name, codec in enc.codecs.items():
        if isinstance(codec, OneHotCodec):
            codecs[name] = {"kind": "onehot", "values": list(codec.values)}
        elif isinstance(codec, ZScoreCodec):
            codecs[name] = {"kind": "zscore", "mean": codec.mean, "std": codec.std}
        elif isinstance(codec, ModeSpecificCodec):
            codecs[name] = {"kind": "mode_specific", "means": list(codec.means),
                            "stds": list(codec.stds), "weights": list(codec.weights)}
    return json.dumps({
        "columns": cols,
        "sensitive": enc.schema.sensitive_column,
        "target": enc.schema.target_column,
        "task": enc.schema.task,
        "codecs": codecs,
    }, sort_keys=True)


def _encoder_from_json(blob: str) -> FeatureEncoder:
    from .tabular import ColumnSpec, DatasetSchema

    raw = json.loads(blob)
    schema = DatasetSchema(tuple(ColumnSpec(n, k) for n, k in raw["columns"]),
                           raw["sensitive"], raw["target"], raw["task"])
    codecs = {}
    for name, c in raw["codecs"].items():
        if c["kind"] == "onehot":
            codecs[name] = OneHotCodec(tuple(c["values"]))
        elif c["kind"] == "zscore":
            codecs[name] = ZScoreCodec(c["mean"], c["std"])
        else:
            codecs[name] = ModeSpecificCodec(tuple(c["means"]), tuple(c["stds"]),
                                             tuple(c["weights"]))
    return FeatureEncoder(schema, codecs)


def save_generator(path, model: CvaeModel) -> None:
    """Write a self-contained checkpoint: config, feature encoder, all arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": "generator",
        "config": vars(model.config),
        "feature_encoder": _encoder_to_json(model.feature_encoder),
    }
    arrays = {}
    for stack_name, params in (("encoder", model.encoder),
                               ("decoder", model.decoder),
                               ("disc", model.disc)):
        for i, arr in enumerate(params.arrays()):
            arrays[f"{stack_name}_{i}"] = arr
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_generator(path) -> CvaeModel:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        if meta.get("kind") != "generator":
            raise DataError(f"{path} is not a generator checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        enc = _encoder_from_json(meta["feature_encoder"])
        config = CvaeConfig(**meta["config"])
        model = CvaeModel(enc, config, np.random.default_rng(0))
        for stack_name, spec in (("encoder", model.encoder_spec),
                                 ("decoder", model.decoder_spec),
                                 ("disc", model.disc_spec)):
            n = 2 * len(spec.widths)
            arrays = [blob[f"{stack_name}_{i}"] for i in range(n)]
            setattr(model, "disc" if stack_name == "disc" else stack_name,
                    nn.mlp_from_arrays(spec, arrays))
    return model
