"""End-to-end command tests on a miniature pipeline."""

import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from fairembed.cli import RunConfig, config_hash, load_config, main
from fairembed.faircl import load_stack


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Tiny but complete run: data, generator, encoder snapshots, evaluation."""
    root = tmp_path_factory.mktemp("pipeline")
    data_dir = root / "data"
    gen_dir = root / "gen"
    enc_dir = root / "enc"
    eval_dir = root / "eval"
    assert run_cli("synth", "--n", 80, "--bias", 1.5, "--seed", 3,
                   "--out", data_dir) == 0
    data = data_dir / "synth_data.csv"
    schema = data_dir / "synth_schema.ini"
    assert run_cli("fit-generator", "--data", data, "--schema", schema,
                   "--out", gen_dir, "--epochs", 2, "--batch-size", 32,
                   "--latent-dim", 3, "--hidden", 8, "--seed", 4) == 0
    assert run_cli("fit-encoder", "--data", data, "--schema", schema,
                   "--generator", gen_dir / "generator.npz", "--out", enc_dir,
                   "--epochs", 4, "--batch-size", 32, "--embed-dim", 4,
                   "--hidden", 8, "--n-projections", 4, "--snapshot-count", 3,
                   "--seed", 5) == 0
    assert run_cli("evaluate", "--snapshots", enc_dir, "--data", data,
                   "--schema", schema, "--generator", gen_dir / "generator.npz",
                   "--out", eval_dir, "--seed", 6) == 0
    return {"root": root, "data": data, "schema": schema, "gen": gen_dir,
            "enc": enc_dir, "eval": eval_dir}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_writes_files_and_sanity_line(tmp_path, capsys):
    out = tmp_path / "s"
    assert run_cli("synth", "--n", 2000, "--bias", 2.0, "--seed", 0,
                   "--out", out) == 0
    printed = capsys.readouterr().out
    assert (out / "synth_data.csv").is_file()
    assert (out / "synth_schema.ini").is_file()
    gap = float(printed.split("raw label delta_dp:")[1].strip())
    assert gap > 0.2


def test_synth_same_seed_identical_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("synth", "--n", 50, "--seed", 9, "--out", a) == 0
    assert run_cli("synth", "--n", 50, "--seed", 9, "--out", b) == 0
    for name in ("synth_data.csv", "synth_schema.ini", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_too_small_is_validation_error(tmp_path, capsys):
    assert run_cli("synth", "--n", 5, "--out", tmp_path / "x") == 1
    assert "n < 10" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# fit-generator
# ---------------------------------------------------------------------------


def test_fit_generator_artifacts(pipeline):
    gen = pipeline["gen"]
    assert (gen / "generator.npz").is_file()
    rows = read_csv(gen / "generator_loss.csv")
    assert len(rows) == 2  # one per epoch
    manifest = json.loads((gen / "manifest.json").read_text())
    assert manifest["command"] == "fit-generator"
    assert "generator.npz" in manifest["artifacts"]
    assert manifest["seed"] == 4


def test_fit_generator_zero_epochs_rejected(pipeline, capsys):
    code = run_cli("fit-generator", "--data", pipeline["data"],
                   "--schema", pipeline["schema"],
                   "--out", pipeline["root"] / "bad", "--epochs", 0)
    assert code == 1
    assert "epochs" in capsys.readouterr().err


def test_fit_generator_divergence_exit_code(pipeline, tmp_path):
    with np.errstate(all="ignore"):
        code = run_cli("fit-generator", "--data", pipeline["data"],
                       "--schema", pipeline["schema"], "--out", tmp_path,
                       "--epochs", 4, "--batch-size", 32, "--latent-dim", 3,
                       "--hidden", 8, "--lr", 1e30)
    assert code == 2


# ---------------------------------------------------------------------------
# fit-encoder
# ---------------------------------------------------------------------------


def test_fit_encoder_snapshot_files(pipeline):
    snaps = sorted(pipeline["enc"].glob("snapshot_*.npz"))
    assert len(snaps) == 3  # snapshot-count for this run
    assert (pipeline["enc"] / "encoder_loss.csv").is_file()
    rows = read_csv(pipeline["enc"] / "encoder_loss.csv")
    assert len(rows) == 4  # one per epoch


def test_fit_encoder_seed_reproduces_snapshot_arrays(pipeline, tmp_path):
    out2 = tmp_path / "enc2"
    assert run_cli("fit-encoder", "--data", pipeline["data"],
                   "--schema", pipeline["schema"],
                   "--generator", pipeline["gen"] / "generator.npz",
                   "--out", out2, "--epochs", 4, "--batch-size", 32,
                   "--embed-dim", 4, "--hidden", 8, "--n-projections", 4,
                   "--snapshot-count", 3, "--seed", 5) == 0
    for name in ("snapshot_01.npz", "snapshot_03.npz"):
        s1, _ = load_stack(pipeline["enc"] / name)
        s2, _ = load_stack(out2 / name)
        for a, b in zip(s1.params(), s2.params()):
            assert np.array_equal(a.data, b.data)
    assert ((pipeline["enc"] / "encoder_loss.csv").read_bytes()
            == (out2 / "encoder_loss.csv").read_bytes())


def test_fit_encoder_rejects_mismatched_generator(pipeline, tmp_path, capsys):
    other = tmp_path / "other_data"
    assert run_cli("synth", "--n", 40, "--seed", 1, "--out", other) == 0
    # schema with renamed columns so encodings cannot match
    schema_text = (other / "synth_schema.ini").read_text()
    renamed = schema_text.replace("x0", "y0")
    (other / "renamed.ini").write_text(renamed)
    (other / "renamed.csv").write_text(
        (other / "synth_data.csv").read_text().replace("x0", "y0"))
    code = run_cli("fit-encoder", "--data", other / "renamed.csv",
                   "--schema", other / "renamed.ini",
                   "--generator", pipeline["gen"] / "generator.npz",
                   "--out", tmp_path / "enc_bad", "--epochs", 500)
    assert code == 1
    assert "mismatch" in capsys.readouterr().err
    assert not list((tmp_path / "enc_bad").glob("snapshot_*.npz"))


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def test_embed_exports_rows(pipeline, tmp_path):
    out = tmp_path / "emb.csv"
    assert run_cli("embed", "--snapshot", pipeline["enc"] / "snapshot_01.npz",
                   "--data", pipeline["data"], "--schema", pipeline["schema"],
                   "--out", out) == 0
    rows = read_csv(out)
    assert len(rows) == 80
    assert list(rows[0].keys()) == [f"z{i}" for i in range(4)]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_outputs(pipeline):
    ev = pipeline["eval"]
    rows = read_csv(ev / "metrics.csv")
    assert [r["snapshot"] for r in rows] == ["1", "2", "3", "mean"]
    for name in ("auc", "delta_dp", "delta_eo", "delta_cp", "leakage_auc"):
        vals = [float(r[name]) for r in rows[:-1]]
        assert float(rows[-1][name]) == pytest.approx(np.mean(vals))
    assert (ev / "summary.txt").read_text().startswith("task: classification")


def test_evaluate_svgs_valid_and_labeled(pipeline):
    density = (pipeline["eval"] / "density.svg").read_text()
    body = density.split("\n", 1)[1]
    root = ET.fromstring(body)
    assert root.tag.endswith("svg")
    assert "g0" in density and "g1" in density
    leakage = (pipeline["eval"] / "leakage.svg").read_text()
    ET.fromstring(leakage.split("\n", 1)[1])
    assert "leakage" in leakage


def test_evaluate_raw_mode(pipeline, tmp_path):
    out = tmp_path / "raw_eval"
    assert run_cli("evaluate", "--raw", "--data", pipeline["data"],
                   "--schema", pipeline["schema"], "--out", out,
                   "--seed", 6) == 0
    rows = read_csv(out / "metrics.csv")
    assert [r["snapshot"] for r in rows] == ["1", "mean"]
    assert "auc" in rows[0] and "delta_cp" not in rows[0]


def test_evaluate_requires_snapshots_or_raw(pipeline, tmp_path, capsys):
    code = run_cli("evaluate", "--data", pipeline["data"],
                   "--schema", pipeline["schema"], "--out", tmp_path / "x")
    assert code == 1
    assert "--snapshots or --raw" in capsys.readouterr().err


def test_evaluate_determinism(pipeline, tmp_path):
    a, b = tmp_path / "e1", tmp_path / "e2"
    for out in (a, b):
        assert run_cli("evaluate", "--snapshots", pipeline["enc"],
                       "--data", pipeline["data"], "--schema", pipeline["schema"],
                       "--generator", pipeline["gen"] / "generator.npz",
                       "--out", out, "--seed", 11) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_merges_runs_in_order(pipeline, tmp_path, capsys):
    raw_out = tmp_path / "raw_eval"
    assert run_cli("evaluate", "--raw", "--data", pipeline["data"],
                   "--schema", pipeline["schema"], "--out", raw_out,
                   "--seed", 6) == 0
    capsys.readouterr()
    merged = tmp_path / "report.csv"
    assert run_cli("report", "--out", merged, pipeline["eval"], raw_out) == 0
    rows = read_csv(merged)
    assert len(rows) == 2
    assert rows[0]["run"] == pipeline["eval"].name
    assert rows[1]["run"] == raw_out.name
    # raw run has no counterfactual column: filled, not an error
    assert rows[1]["delta_cp"] == "n/a"
    assert float(rows[0]["delta_cp"]) >= 0.0
    table = capsys.readouterr().out
    assert "n/a" in table


def test_report_missing_metrics_file(tmp_path, capsys):
    assert run_cli("report", "--out", tmp_path / "r.csv", tmp_path) == 1
    assert "metrics.csv" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(
        "[run]\nseed = 7\n\n"
        "[generator]\nepochs = 5\nlatent_dim = 4\n\n"
        "[encoder]\nembed_dim = 8\nuse_self_kd = false\naugmentation = dropout\n\n"
        "[probe]\nlogistic_iters = 100\n")
    cfg = load_config(path)
    assert cfg.seed == 7
    assert cfg.generator.epochs == 5
    assert cfg.generator.latent_dim == 4
    assert cfg.generator.batch_size == 256  # untouched default
    assert cfg.encoder.embed_dim == 8
    assert cfg.encoder.use_self_kd is False
    assert cfg.encoder.augmentation == "dropout"
    assert cfg.probe.logistic_iters == 100


def test_load_config_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[encoder]\nlearning_rate_schedule = cosine\n")
    with pytest.raises(Exception, match="unknown key"):
        load_config(bad)
    bad.write_text("[misc]\nx = 1\n")
    with pytest.raises(Exception, match="unknown config section"):
        load_config(bad)


def test_config_hash_stability(tmp_path):
    assert config_hash(RunConfig()) == config_hash(RunConfig())
    other = RunConfig(seed=1)
    assert config_hash(other) != config_hash(RunConfig())


def test_cli_flags_override_config(tmp_path, capsys):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nseed = 7\n")
    out = tmp_path / "s"
    assert run_cli("synth", "--n", 20, "--config", path, "--seed", 8,
                   "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 8


def test_unknown_flag_is_validation_error(capsys):
    assert run_cli("synth", "--n", 20, "--frobnicate") == 1


def test_help_exits_zero(capsys):
    assert run_cli("--help") == 0
    assert "fit-encoder" in capsys.readouterr().out
