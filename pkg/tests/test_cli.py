import json

import numpy as np
import pandas as pd
import pytest

from pydantic import ValidationError

from app.cli import build_parser, main
from app.models.dto import RunSpec
from app.services import checkpoint_store, trainer
from app.services.dataset_service import load_csv, synthesize, train_validation_split

TINY_FLAGS = [
    "--hidden", "8",
    "--time-steps", "2",
    "--epochs", "2",
    "--batch-size", "32",
    "--no-augment",
    "--no-soup",
    "--set", "n_linear=4",
    "--set", "height=4",
    "--set", "width=4",
    "--set", "coord_dim=4",
    "--set", "gcn_widths=4,4,4",
]


def test_synth_writes_a_loadable_csv(tmp_path):
    out = tmp_path / "toy.csv"
    assert main(["synth", "100", "5", "4", "--seed", "3", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["f0", "f1", "f2", "f3", "f4", "y0", "y1", "y2", "y3"]
    assert len(frame) == 100
    loaded = load_csv(out)
    expected = synthesize(100, 5, 4, seed=3)
    assert np.array_equal(loaded.features, expected.features)
    assert np.array_equal(loaded.targets, expected.targets)
    assert (tmp_path / "toy.csv.truth.npz").exists()


def test_cv_reports_are_byte_identical_for_a_fixed_seed(tmp_path):
    args = ["cv", "--synth", "60", "4", "3", "--algo", "uniform", "--k", "3", "--repeats", "2", "--seed", "7"]
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    for name in ("cv_uniform.json", "cv_uniform.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cv_uniform_report(tmp_path):
    args = ["cv", "--synth", "60", "4", "3", "--algo", "uniform", "--k", "3", "--repeats", "1", "--seed", "7"]
    assert main(args + ["--output-dir", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "cv_uniform.json").read_text())
    report = payload[0]
    assert report["algorithm"] == "uniform"
    assert report["n_splits"] == 3
    assert report["n_samples"] == 60
    assert 0.0 < report["intersection"]["mean"] <= 1.0
    assert report["kl"]["mean"] >= 0.0


def test_cv_reads_the_dataset_sidecar(tmp_path):
    data = tmp_path / "toy.csv"
    main(["synth", "40", "3", "3", "--seed", "1", "--out", str(data)])
    (tmp_path / "toy.csv.cfg").write_text("name = toy\nk = 4\nrepeats = 1\n", encoding="utf-8")
    assert main(["cv", "--data", str(data), "--algo", "uniform", "--output-dir", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "cv_uniform.json").read_text())[0]
    assert report["dataset"] == "toy"
    assert report["n_splits"] == 4


def test_train_then_eval(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--synth", "64", "5", "3", "--seed", "2", "--output-dir", str(run)] + TINY_FLAGS) == 0
    assert (run / "model.npz").exists()
    history = pd.read_csv(run / "history.csv")
    assert history["epoch"].tolist() == [1, 2]
    assert (history["schema_version"] == 1).all()
    meta, _ = checkpoint_store.load(run / "model.npz")
    train_set, val_set = train_validation_split(synthesize(64, 5, 3, seed=2), 2)
    model = checkpoint_store.load_model(run / "model.npz")
    assert meta.val_kl == pytest.approx(trainer.validation_kl(model, model.params, val_set), rel=1e-12)
    assert main(["eval", "--synth", "64", "5", "3", "--checkpoint", str(run / "model.npz"), "--output-dir", str(run)]) == 0
    report = json.loads((run / "eval.json").read_text())[0]
    assert report["algorithm"] == "idr"
    assert report["n_samples"] == 64


def test_eval_with_mismatched_labels_fails(tmp_path):
    run = tmp_path / "run"
    main(["train", "--synth", "64", "5", "3", "--output-dir", str(run)] + TINY_FLAGS)
    code = main(["eval", "--synth", "64", "5", "4", "--checkpoint", str(run / "model.npz"), "--output-dir", str(run)])
    assert code == 1
    assert not (run / "eval.json").exists()


def test_baseline_train_and_eval(tmp_path):
    run = tmp_path / "maxent"
    assert main(["train", "--algo", "bfgsll", "--synth", "80", "4", "3", "--output-dir", str(run)]) == 0
    assert main(["eval", "--synth", "80", "4", "3", "--checkpoint", str(run / "model.npz"), "--output-dir", str(run)]) == 0
    assert json.loads((run / "eval.json").read_text())[0]["algorithm"] == "bfgsll"


def test_convert_then_evaluate_spiking_model(tmp_path):
    run = tmp_path / "run"
    main(["train", "--synth", "64", "5", "3", "--output-dir", str(run)] + TINY_FLAGS)
    ckpt = str(run / "model.npz")
    assert main(["convert-snn", "--synth", "64", "5", "3", "--checkpoint", ckpt, "--t-sim", "16", "--output-dir", str(run)]) == 0
    energy = json.loads((run / "energy.json").read_text())
    assert energy["t_sim"] == 16
    assert energy["ann_macs"] > 0
    snn = str(run / "snn.npz")
    assert main(["eval-snn", "--synth", "64", "5", "3", "--checkpoint", snn, "--output-dir", str(run)]) == 0
    agreement = json.loads((run / "snn_agreement.json").read_text())
    assert agreement["t_sim"] == 16
    assert agreement["ann_snn_kl"] >= 0.0
    assert json.loads((run / "eval_snn.json").read_text())[0]["algorithm"] == "idr-snn"


def test_unknown_set_key_fails(tmp_path):
    assert main(["cv", "--synth", "30", "3", "3", "--set", "epoch=3", "--output-dir", str(tmp_path)]) == 1


def test_set_without_equals_fails(tmp_path):
    assert main(["cv", "--synth", "30", "3", "3", "--set", "epochs", "--output-dir", str(tmp_path)]) == 1


def test_parser_requires_a_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_cv_idr_reports_are_byte_identical_with_threads(tmp_path):
    args = ["cv", "--synth", "48", "5", "3", "--algo", "idr", "--k", "2", "--repeats", "1", "--jobs", "2", "--seed", "7"]
    assert main(args + TINY_FLAGS + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + TINY_FLAGS + ["--output-dir", str(tmp_path / "b")]) == 0
    for name in ("cv_idr.json", "cv_idr.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_sidecar_fails_cleanly(tmp_path):
    data = tmp_path / "toy.csv"
    main(["synth", "40", "3", "3", "--out", str(data)])
    (tmp_path / "toy.csv.cfg").write_text("k = 1\n", encoding="utf-8")
    assert main(["cv", "--data", str(data), "--algo", "uniform", "--output-dir", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out" / "cv_uniform.json").exists()


def test_a_dataset_source_is_required(tmp_path):
    assert main(["cv", "--algo", "uniform", "--output-dir", str(tmp_path)]) == 1


def test_run_spec_needs_exactly_one_source():
    with pytest.raises(ValidationError):
        RunSpec(subcommand="cv", output_dir="runs")
    with pytest.raises(ValidationError):
        RunSpec(subcommand="cv", output_dir="runs", data="a.csv", synth=(10, 2, 3))
    assert RunSpec(subcommand="cv", output_dir="runs", synth=(10, 2, 3)).synth == (10, 2, 3)
