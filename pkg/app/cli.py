"""``ldl-idr`` command-line entry point.

Configuration precedence for training subcommands: built-in defaults <
``--preset`` < ``--config`` file < explicit flags. Logs go to stderr; the
written artifacts are the only other output.
"""

import argparse
import json
import sys
import uuid
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import structlog
from pydantic import ValidationError
from structlog.contextvars import bind_contextvars, clear_contextvars

from app.core.config import settings
from app.core.errors import ConfigError, IdrError, SchemaError
from app.logging import configure_logging
from app.models.dto import LdlDataset, RunSpec
from app.services import baseline, checkpoint_store, experiment_service, metrics, snn_service, trainer
from app.services.dataset_service import load_csv, load_sidecar, synthesize, train_validation_split, write_csv
from app.services.idr_model import IdrModel, stack_time_inference

logger = structlog.get_logger(__name__)


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _output_dir(args) -> Path:
    out = Path(args.output_dir) if args.output_dir else settings.OUTPUT_DIR
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    return settings.DEFAULT_SEED if args.seed is None else args.seed

# --- Data and configuration ---

def _flag_values(args) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for flag in ("epochs", "batch_size", "learning_rate", "weight_decay", "patience", "head", "hidden", "time_steps"):
        if getattr(args, flag, None) is not None:
            values[flag] = getattr(args, flag)
    if getattr(args, "no_augment", False):
        values["augment"] = False
    if getattr(args, "no_early_stopping", False):
        values["early_stopping"] = False
    if getattr(args, "no_soup", False):
        values["greedy_soup"] = False
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    return values


def _run_spec(args) -> RunSpec:
    seed = _seed(args)
    preset = experiment_service.preset_values(experiment_service.get_preset(args.preset)) if getattr(args, "preset", None) else {}
    config = experiment_service.load_run_config(args.config) if getattr(args, "config", None) else {}
    flags = _flag_values(args)
    cfg, weights, model = experiment_service.build_configs(preset, config, flags, {"seed": seed})
    try:
        return RunSpec(
            subcommand=args.command,
            data=getattr(args, "data", None),
            synth=tuple(args.synth) if getattr(args, "synth", None) else None,
            algo=getattr(args, "algo", "idr"),
            train=cfg,
            weights=weights,
            model_overrides=model,
            output_dir=str(_output_dir(args)),
            seed=seed,
            k=getattr(args, "k", None) or 5,
            repeats=getattr(args, "repeats", None) or 10,
            jobs=getattr(args, "jobs", None) or settings.DEFAULT_JOBS,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid run specification: {e}")


def _dataset(spec: RunSpec) -> LdlDataset:
    if spec.data:
        return load_csv(spec.data)
    n, d, n_labels = spec.synth
    return synthesize(n, d, n_labels, spec.seed)


def _apply_sidecar(spec: RunSpec, args) -> RunSpec:
    """Dataset sidecar values fill in whatever the command line left unset."""
    if not spec.data:
        return spec
    sidecar = load_sidecar(Path(spec.data))
    update = {}
    if args.k is None and sidecar.k:
        update["k"] = sidecar.k
    if args.repeats is None and sidecar.repeats:
        update["repeats"] = sidecar.repeats
    if args.seed is None and sidecar.split_seed is not None:
        update["seed"] = sidecar.split_seed
    elif args.seed is None and sidecar.seed is not None:
        update["seed"] = sidecar.seed
    return spec.model_copy(update=update) if update else spec


def _check_compatible(model: IdrModel, dataset: LdlDataset) -> None:
    if (model.config.d_in, model.config.n_labels) != (dataset.d, dataset.n_labels):
        raise SchemaError(
            f"checkpoint expects d={model.config.d_in}, L={model.config.n_labels}; dataset has d={dataset.d}, L={dataset.n_labels}",
            checkpoint=[model.config.d_in, model.config.n_labels],
            dataset=[dataset.d, dataset.n_labels],
        )


def _predictor(path: str, dataset: LdlDataset):
    meta, _ = checkpoint_store.load(path)
    if meta.kind == "idr":
        model = checkpoint_store.load_model(path)
        _check_compatible(model, dataset)
        return "idr", model.predict
    if meta.kind == "bfgsll":
        fitted = baseline.load_model(path)
        if (fitted.d, fitted.n_labels) != (dataset.d, dataset.n_labels):
            raise SchemaError(f"checkpoint expects d={fitted.d}, L={fitted.n_labels}; dataset has d={dataset.d}, L={dataset.n_labels}")
        return "bfgsll", lambda x: baseline.bfgsll_predict(fitted, x)
    raise SchemaError(f"{path}: {meta.kind} checkpoints are evaluated with eval-snn")

# --- Subcommands ---

def cmd_synth(args) -> int:
    seed = _seed(args)
    dataset = synthesize(args.n, args.d, args.labels, seed)
    out = Path(args.out) if args.out else _output_dir(args) / f"{dataset.name}.csv"
    write_csv(dataset, out)
    Path(f"{out}.cfg").write_text(f"name = {dataset.name}\nseed = {seed}\n", encoding="utf-8")
    np.savez(
        Path(f"{out}.truth.npz"),
        weight=dataset.ground_truth.weight,
        bias=dataset.ground_truth.bias,
        schema_version=np.array(settings.SCHEMA_VERSION),
    )
    logger.info("synth_written", path=str(out), n=dataset.n, d=dataset.d, labels=dataset.n_labels)
    return 0


def cmd_train(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    out = Path(spec.output_dir)
    train_set, val_set = train_validation_split(dataset, spec.seed)
    if spec.algo == "bfgsll":
        fitted = baseline.bfgsll_fit(train_set)
        baseline.save_model(out / "model.npz", fitted)
        return 0
    if spec.algo != "idr":
        raise ConfigError(f"{spec.algo} has nothing to train")
    mcfg = trainer.build_model_config(dataset, spec.model_overrides)
    model = IdrModel.initialize(mcfg, spec.seed)
    result = trainer.train(model, train_set, val_set, spec.train, spec.weights)
    # the saved parameters may be a soup or an earlier best epoch
    val_kl = trainer.validation_kl(result.model, result.model.params, val_set)
    checkpoint_store.save_model(out / "model.npz", result.model, epoch=result.history[-1].epoch, val_kl=val_kl)
    trainer.write_history(result.history, out / "history.csv")
    return 0


def cmd_eval(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    algo, predict = _predictor(args.checkpoint, dataset)
    scores = metrics.evaluate_batch(dataset.targets, predict(dataset.features))
    report = metrics.aggregate([scores], algo, dataset.name)
    metrics.write_reports([report], spec.output_dir, stem="eval")
    return 0


def cmd_cv(args) -> int:
    spec = _apply_sidecar(_run_spec(args), args)
    dataset = _dataset(spec)
    train_cfg = spec.train.model_copy(update={"seed": spec.seed})
    algorithm = trainer.make_algorithm(spec.algo, train_cfg, spec.weights, spec.model_overrides)
    report, _ = trainer.cross_validate(dataset, algorithm, spec.k, spec.repeats, spec.seed, spec.jobs)
    metrics.write_reports([report], spec.output_dir, stem=f"cv_{spec.algo}")
    return 0


def _calibration_batch(dataset: LdlDataset, size: Optional[int]) -> np.ndarray:
    return dataset.features if not size else dataset.features[:size]


def cmd_convert_snn(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    model = checkpoint_store.load_model(args.checkpoint)
    _check_compatible(model, dataset)
    batch = _calibration_batch(dataset, args.calibration_size)
    profile = snn_service.calibrate(model, batch, args.percentile)
    snn = snn_service.convert(model, profile)
    out = Path(spec.output_dir)
    snn_service.save_snn(out / "snn.npz", model, snn, profile, args.t_sim)
    report = snn_service.energy_report(snn, stack_time_inference(batch, model.config), args.t_sim, args.e_mac, args.e_ac)
    (out / "energy.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_eval_snn(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    model, snn, t_default = snn_service.load_snn(args.checkpoint)
    _check_compatible(model, dataset)
    t_sim = args.t_sim or t_default
    batch = _calibration_batch(dataset, args.calibration_size)
    targets = dataset.targets[: batch.shape[0]]
    snn_pred = snn_service.snn_predict(model, snn, batch, t_sim)
    ann_pred = model.predict(batch)
    report = metrics.aggregate([metrics.evaluate_batch(targets, snn_pred)], "idr-snn", dataset.name)
    metrics.write_reports([report], spec.output_dir, stem="eval_snn")
    agreement = {
        "schema_version": settings.SCHEMA_VERSION,
        "t_sim": t_sim,
        "ann_snn_kl": float(metrics.evaluate_batch(ann_pred, snn_pred)[:, 3].mean()),
        "decoding_error": snn_service.decoding_errors(model, snn, batch, [t_sim])[t_sim],
    }
    _write_json(Path(spec.output_dir) / "snn_agreement.json", agreement)
    return 0


def cmd_energy(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    model, snn, t_default = snn_service.load_snn(args.checkpoint)
    _check_compatible(model, dataset)
    batch = _calibration_batch(dataset, args.calibration_size)
    report = snn_service.energy_report(
        snn, stack_time_inference(batch, model.config), args.t_sim or t_default, args.e_mac, args.e_ac
    )
    path = Path(spec.output_dir) / "energy.json"
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_ablation(args) -> int:
    spec = _apply_sidecar(_run_spec(args), args)
    dataset = _dataset(spec)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    reports = experiment_service.run_ablation(
        dataset,
        variants,
        spec.train.model_copy(update={"seed": spec.seed}),
        spec.weights,
        spec.model_overrides,
        spec.k,
        spec.repeats,
        spec.seed,
        spec.jobs,
    )
    metrics.write_reports(reports, spec.output_dir, stem="ablation")
    return 0


def cmd_convergence(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    result = experiment_service.head_convergence(
        dataset, spec.train, spec.weights, spec.model_overrides, spec.seed, args.target_loss
    )
    _write_json(Path(spec.output_dir) / "head_convergence.json", {"schema_version": settings.SCHEMA_VERSION, **result})
    return 0


def cmd_inspect(args) -> int:
    spec = _run_spec(args)
    dataset = _dataset(spec)
    model = checkpoint_store.load_model(args.checkpoint)
    _check_compatible(model, dataset)
    samples = [int(s) for s in args.samples.split(",") if s.strip()]
    frame = experiment_service.inspect_matrix(model, dataset, samples)
    frame.insert(0, "schema_version", settings.SCHEMA_VERSION)
    path = Path(spec.output_dir) / "matrix_inspection.csv"
    frame.to_csv(path, index=False, encoding="utf-8")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    if args.model:
        settings.MODEL_PATH = Path(args.model)
    uvicorn.run("app.main:app", host=args.host, port=args.port, log_config=None)
    return 0

# --- Parser ---

def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--output-dir", help="Directory for artifacts (default: $OUTPUT_DIR)")
    p.add_argument("--seed", type=int, help="Root seed for every random stream")
    if data:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--data", help="Dataset CSV")
        src.add_argument("--synth", type=int, nargs=3, metavar=("N", "D", "L"), help="In-memory synthetic dataset")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="Benchmark profile supplying training defaults")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--head", choices=["lnf", "softmax"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--time-steps", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-early-stopping", action="store_true")
    p.add_argument("--no-soup", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Any run configuration key")


def _add_cv(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--jobs", type=int)


def _add_snn(p: argparse.ArgumentParser, convert: bool = False) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t-sim", type=int, default=64 if convert else None)
    p.add_argument("--calibration-size", type=int, help="Use only the first N rows")
    p.add_argument("--e-mac", type=float, default=snn_service.E_MAC)
    p.add_argument("--e-ac", type=float, default=snn_service.E_AC)
    if convert:
        p.add_argument("--percentile", type=float, default=99.9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldl-idr", description=settings.BRIEF_DESCRIPTION)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Write a synthetic dataset CSV")
    p.add_argument("n", type=int)
    p.add_argument("d", type=int)
    p.add_argument("labels", type=int)
    p.add_argument("--out", help="CSV path (default: <output-dir>/<name>.csv)")
    _add_common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="Train on a dataset and write a checkpoint")
    _add_common(p)
    _add_training(p)
    p.add_argument("--algo", choices=["idr", "bfgsll"], default="idr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="Repeated k-fold cross-validation")
    _add_common(p)
    _add_training(p)
    _add_cv(p)
    p.add_argument("--algo", choices=["idr", "bfgsll", "uniform"], default="idr")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("convert-snn", help="Convert a checkpoint's extractor to a spiking network")
    _add_common(p)
    _add_snn(p, convert=True)
    p.set_defaults(func=cmd_convert_snn)

    p = sub.add_parser("eval-snn", help="Evaluate the model with the spiking extractor")
    _add_common(p)
    _add_snn(p)
    p.set_defaults(func=cmd_eval_snn)

    p = sub.add_parser("energy", help="Estimate ANN vs SNN operation energy")
    _add_common(p)
    _add_snn(p)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("ablation", help="Cross-validate model variants")
    _add_common(p)
    _add_training(p)
    _add_cv(p)
    p.add_argument("--variants", default=",".join(experiment_service.ABLATIONS))
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("convergence", help="Epochs to a validation loss target, Lnf vs Softmax")
    _add_common(p)
    _add_training(p)
    p.add_argument("--target-loss", type=float)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("inspect", help="Row moments of the label distribution matrix")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", default="0")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("serve", help="Serve a checkpoint over HTTP")
    p.add_argument("--model", help="Checkpoint path (default: $MODEL_PATH)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    clear_contextvars()
    bind_contextvars(run_id=uuid.uuid4().hex[:12], command=args.command)
    try:
        return args.func(args)
    except IdrError as e:
        logger.error("command_failed", error=e.code, detail=e.detail, **e.context)
        return 1


if __name__ == "__main__":
    sys.exit(main())
