"""Command-line pipeline.

Subcommands cover the full workflow: generate synthetic benchmark data,
train the counterfactual generator, train the fair encoder, export
embeddings, evaluate snapshots, and merge evaluation runs into one table.

Exit codes: 0 success, 1 validation or IO error, 2 runtime abort (NaN).
Every numeric artifact is a pure function of the inputs and --seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cvae import (
    CvaeConfig,
    CvaeModel,
    TrainingDiverged,
    load_generator,
    save_generator,
    train_generator,
)
from .evaluation import (
    MetricsReport,
    ProbeConfig,
    auc,
    delta_cp,
    delta_dp,
    delta_eo,
    density_data,
    evaluate_run,
    fit_probe,
    leakage_auc,
    rmse,
)
from .faircl import (
    AUGMENTATIONS,
    EncoderConfig,
    EncoderStack,
    check_generator_compatible,
    counterfactual_rows,
    embed,
    load_stack,
    save_stack,
    stack_from_snapshot,
    train_encoder,
)
from .svgplot import SvgFigure
from .tabular import (
    DataError,
    Dataset,
    encode,
    fit_encoder,
    load_csv,
    load_schema,
    save_csv,
    save_schema,
    split,
    synth_generate,
)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    generator: CvaeConfig = field(default_factory=CvaeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> None:
        if self.seed < 0:
            raise DataError("seed must be >= 0")
        self.generator.validate()
        self.encoder.validate()
        self.probe.validate()

    def as_dict(self) -> dict:
        return {"seed": self.seed, "generator": vars(self.generator),
                "encoder": vars(self.encoder), "probe": vars(self.probe)}


_CONFIG_SECTIONS = {"run": None, "generator": CvaeConfig,
                    "encoder": EncoderConfig, "probe": ProbeConfig}


def load_config(path) -> RunConfig:
    """Read an INI run configuration; unknown sections or keys are errors."""
    import configparser

    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not Path(path).is_file():
        raise DataError(f"config file not found: {path}")
    parser.read(path)
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _CONFIG_SECTIONS:
            raise DataError(f"unknown config section: [{section}]")
        if section == "run":
            for key, raw in parser.items(section):
                if key != "seed":
                    raise DataError(f"unknown key in [run]: {key}")
                cfg.seed = int(raw)
            continue
        target = getattr(cfg, section)
        valid = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in valid:
                raise DataError(f"unknown key in [{section}]: {key}")
            current = getattr(target, key)
            if isinstance(current, bool):
                value: object = parser.getboolean(section, key)
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
            setattr(target, key, value)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(cfg.as_dict(), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig,
                    artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "artifacts": sorted(artifacts),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_rows_csv(path, names: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "n/a")) for k in names})


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _load_dataset(data_path, schema_path) -> Dataset:
    for p in (data_path, schema_path):
        if not Path(p).is_file():
            raise DataError(f"file not found: {p}")
    return load_csv(data_path, load_schema(schema_path))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _base_config(args)
    out = _out_dir(args)
    ds = synth_generate(args.n, args.bias, cfg.seed)
    data_path = out / "synth_data.csv"
    schema_path = out / "synth_schema.ini"
    save_csv(ds, data_path)
    save_schema(ds.schema, schema_path)
    enc = fit_encoder(ds, continuous_mode="zscore")
    ed = encode(enc, ds)
    gap = delta_dp(ed.targets, ed.sensitive_labels)
    print(f"wrote {data_path} ({ds.n} rows)")
    print(f"raw label delta_dp: {gap:.4f}")
    _write_manifest(out, "synth", cfg, [data_path.name, schema_path.name])
    return 0


def cmd_fit_generator(args) -> int:
    cfg = _base_config(args)
    for name in ("epochs", "batch_size", "latent_dim", "hidden", "lr"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.generator, name, value)
    cfg.validate()
    ds = _load_dataset(args.data, args.schema)
    out = _out_dir(args)

    enc = fit_encoder(ds, continuous_mode="mode_specific", seed=cfg.seed)
    ed = encode(enc, ds)
    root = np.random.SeedSequence(cfg.seed)
    init_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(2))
    model = CvaeModel(enc, cfg.generator, init_rng)
    history = train_generator(model, ed, train_rng, log_every=args.log_every)

    ckpt = out / "generator.npz"
    save_generator(ckpt, model)
    loss_csv = out / "generator_loss.csv"
    rows = history.rows()
    _write_rows_csv(loss_csv, list(rows[0].keys()), rows)
    print(f"wrote {ckpt}")
    _write_manifest(out, "fit-generator", cfg, [ckpt.name, loss_csv.name])
    return 0


def cmd_fit_encoder(args) -> int:
    cfg = _base_config(args)
    for name in ("epochs", "batch_size", "embed_dim", "hidden",
                 "n_projections", "snapshot_count"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.encoder, name, value)
    if args.no_self_kd:
        cfg.encoder.use_self_kd = False
    if args.no_align:
        cfg.encoder.use_align = False
    if args.no_distribution:
        cfg.encoder.use_distribution = False
    if args.aug is not None:
        cfg.encoder.augmentation = args.aug
    cfg.validate()
    if not Path(args.generator).is_file():
        raise DataError(f"file not found: {args.generator}")
    ds = _load_dataset(args.data, args.schema)
    out = _out_dir(args)

    generator = load_generator(args.generator)
    stack_enc = fit_encoder(ds, continuous_mode="zscore")
    check_generator_compatible(generator, stack_enc)
    ed = encode(stack_enc, ds)

    root = np.random.SeedSequence(cfg.seed)
    init_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(2))
    stack = EncoderStack(ed.dim, cfg.encoder, init_rng)
    result = train_encoder(stack, ed, ds, stack_enc, generator, train_rng,
                           log_every=args.log_every)

    artifacts = []
    for i, arrays in enumerate(result.snapshots, start=1):
        snap = stack_from_snapshot(ed.dim, cfg.encoder, arrays)
        path = out / f"snapshot_{i:02d}.npz"
        save_stack(path, snap, stack_enc)
        artifacts.append(path.name)
    loss_csv = out / "encoder_loss.csv"
    rows = result.history.rows()
    _write_rows_csv(loss_csv, list(rows[0].keys()), rows)
    artifacts.append(loss_csv.name)
    print(f"wrote {len(result.snapshots)} snapshots to {out}")
    _write_manifest(out, "fit-encoder", cfg, artifacts)
    return 0


def cmd_embed(args) -> int:
    if not Path(args.snapshot).is_file():
        raise DataError(f"file not found: {args.snapshot}")
    stack, enc = load_stack(args.snapshot)
    ds = _load_dataset(args.data, args.schema)
    ed = encode(enc, ds)
    z = embed(stack, ed.matrix)
    names = [f"z{i}" for i in range(z.shape[1])]
    rows = [dict(zip(names, map(float, row))) for row in z]
    _write_rows_csv(args.out, names, rows)
    print(f"wrote {args.out} ({z.shape[0]} rows x {z.shape[1]} dims)")
    return 0


def _snapshot_paths(snap_dir: Path) -> list[Path]:
    paths = sorted(snap_dir.glob("snapshot_*.npz"))
    if not paths:
        raise DataError(f"no snapshot_*.npz files in {snap_dir}")
    return paths


def _evaluate_raw(ds_train: Dataset, ds_test: Dataset, enc, generator,
                  probe_cfg: ProbeConfig, rng) -> MetricsReport:
    """Probe on the encoded features themselves: the no-embedding baseline."""
    ed_train = encode(enc, ds_train)
    ed_test = encode(enc, ds_test)
    task = ed_train.task
    cf_matrix = None
    if generator is not None:
        cf_matrix = counterfactual_rows(generator, enc, ds_test, rng)

    row: dict[str, float] = {}
    if task == "classification":
        model = fit_probe(ed_train.matrix, ed_train.targets, "logistic",
                          probe_cfg.logistic_l2, probe_cfg.logistic_iters)
        probs = model.scores(ed_test.matrix)
        hard = model.predict(ed_test.matrix)
        row["auc"] = auc(probs, ed_test.targets)
        row["delta_dp"] = delta_dp(hard, ed_test.sensitive_labels)
        row["delta_eo"] = delta_eo(hard, ed_test.targets, ed_test.sensitive_labels)
        if cf_matrix is not None:
            row["delta_cp"] = delta_cp(probs, model.scores(cf_matrix))
    else:
        model = fit_probe(ed_train.matrix, ed_train.targets, "ridge",
                          probe_cfg.ridge_l2)
        preds = model.scores(ed_test.matrix)
        row["rmse"] = rmse(preds, ed_test.targets)
        row["delta_dp"] = delta_dp(preds, ed_test.sensitive_labels)
        if cf_matrix is not None:
            row["delta_cp"] = delta_cp(preds, model.scores(cf_matrix))
    row["leakage_auc"] = leakage_auc(ed_test.matrix, ed_test.sensitive_labels,
                                     probe_cfg.logistic_l2,
                                     probe_cfg.logistic_iters)
    return MetricsReport(task, tuple(row.keys()), [row], dict(row))


def _parse_split(text: str) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise DataError(f"split must look like 2:1, got {text!r}")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise DataError(f"split must be two integers, got {text!r}") from exc
    return a, b


def _density_figure(report_task: str, probs, groups) -> SvgFigure:
    if report_task == "classification":
        dens = density_data(probs, groups, n_bins=20)
        x_label = "predicted probability"
    else:
        lo, hi = float(np.min(probs)), float(np.max(probs))
        if hi <= lo:
            hi = lo + 1.0
        dens = density_data(probs, groups, n_bins=20, value_range=(lo, hi))
        x_label = "predicted value"
    fig = SvgFigure(title="Prediction density by group", x_label=x_label,
                    y_label="probability mass")
    for group in sorted(dens.by_group):
        fig.add_step_histogram(dens.edges, dens.by_group[group], group)
    return fig


def cmd_evaluate(args) -> int:
    cfg = _base_config(args)
    cfg.validate()
    ds = _load_dataset(args.data, args.schema)
    out = _out_dir(args)
    generator = None
    if args.generator is not None:
        if not Path(args.generator).is_file():
            raise DataError(f"file not found: {args.generator}")
        generator = load_generator(args.generator)

    root = np.random.SeedSequence(cfg.seed)
    split_rng, eval_rng = (np.random.default_rng(s) for s in root.spawn(2))
    ds_train, ds_test = split(ds, _parse_split(args.split), split_rng)

    if args.raw:
        enc = fit_encoder(ds, continuous_mode="zscore")
        report = _evaluate_raw(ds_train, ds_test, enc, generator,
                               cfg.probe, eval_rng)
        last_stack = None
    else:
        if args.snapshots is None:
            raise DataError("either --snapshots or --raw is required")
        paths = _snapshot_paths(Path(args.snapshots))
        stacks, enc = [], None
        for p in paths:
            stack, enc = load_stack(p)
            stacks.append(stack)
        report = evaluate_run(stacks, enc, ds_train, ds_test, generator,
                              cfg.probe, eval_rng)
        last_stack = stacks[-1]

    metrics_csv = out / "metrics.csv"
    names = ["snapshot", *report.metric_names]
    _write_rows_csv(metrics_csv, names, report.rows())
    summary_path = out / "summary.txt"
    summary_path.write_text(report.summary() + "\n")

    # plots: per-group prediction density from the newest probe, and the
    # leakage trajectory across snapshots
    ed_train = encode(enc, ds_train)
    ed_test = encode(enc, ds_test)
    if last_stack is not None:
        z_train = embed(last_stack, ed_train.matrix)
        z_test = embed(last_stack, ed_test.matrix)
    else:
        z_train, z_test = ed_train.matrix, ed_test.matrix
    if report.task == "classification":
        probe = fit_probe(z_train, ed_train.targets, "logistic",
                          cfg.probe.logistic_l2, cfg.probe.logistic_iters)
    else:
        probe = fit_probe(z_train, ed_train.targets, "ridge", cfg.probe.ridge_l2)
    preds = probe.scores(z_test)
    density_svg = out / "density.svg"
    _density_figure(report.task, preds, ed_test.sensitive_labels).save(density_svg)

    leak_fig = SvgFigure(title="Sensitive-attribute leakage by snapshot",
                         x_label="snapshot", y_label="leakage AUC")
    xs = np.arange(1, len(report.per_snapshot) + 1)
    leak_fig.add_polyline(xs, [r["leakage_auc"] for r in report.per_snapshot],
                          "leakage")
    leakage_svg = out / "leakage.svg"
    leak_fig.save(leakage_svg)

    print(report.summary())
    _write_manifest(out, "evaluate", cfg,
                    [metrics_csv.name, summary_path.name, density_svg.name,
                     leakage_svg.name])
    return 0


def cmd_report(args) -> int:
    names: list[str] = []
    rows: list[dict[str, object]] = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.csv"
        if not path.is_file():
            raise DataError(f"no metrics.csv in {run_dir}")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            mean_row = None
            for record in reader:
                if record.get("snapshot") == "mean":
                    mean_row = record
        if mean_row is None:
            raise DataError(f"no mean row in {path}")
        mean_row.pop("snapshot", None)
        for key in mean_row:
            if key not in names:
                names.append(key)
        rows.append({"run": Path(run_dir).name, **mean_row})

    header = ["run", *names]
    _write_rows_csv(args.out, header, rows)
    widths = {h: max(len(h), *(len(str(r.get(h, "n/a"))) for r in rows))
              for h in header}
    print("  ".join(h.ljust(widths[h]) for h in header))
    for row in rows:
        print("  ".join(str(row.get(h, "n/a")).ljust(widths[h]) for h in header))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairembed",
        description="Fair tabular representation learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--bias", type=float, default=2.0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-generator", help="train the counterfactual generator")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_fit_generator)

    p = sub.add_parser("fit-encoder", help="train the fair encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--n-projections", dest="n_projections", type=int, default=None)
    p.add_argument("--snapshot-count", dest="snapshot_count", type=int, default=None)
    p.add_argument("--no-self-kd", action="store_true")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--no-distribution", action="store_true")
    p.add_argument("--aug", choices=sorted(AUGMENTATIONS), default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_fit_encoder)

    p = sub.add_parser("embed", help="export embeddings from a snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", help="score snapshots on held-out data")
    p.add_argument("--snapshots", default=None,
                   help="directory holding snapshot_*.npz")
    p.add_argument("--raw", action="store_true",
                   help="probe the encoded features directly")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--generator", default=None)
    p.add_argument("--split", default="2:1")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge evaluation runs into one table")
    p.add_argument("--out", required=True)
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
