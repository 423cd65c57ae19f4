"""Command-line front end.

Subcommands mirror the library stages: synth (generate data), train,
analyze (bias chain report), debias (reduce or reconstruct weights), eval
(metrics for one model on one split), and pipeline (all stages in memory
on synthetic data). Every command writes a manifest JSON recording its
arguments, input digests, output digests, and wall time; wall time lives
only in the manifest so all other artifacts are byte-stable across reruns
with the same seed.

Exit codes: 0 success, 2 configuration/input errors, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import bias_chain_report
from .data import Dataset, FeatureIndex, FieldSchema, ingest_csv
from .debias import DebiasConfig, grid_search_reconstruction, reduce_weights
from .errors import ConfigError, CtrBiasError, NumericalError
from .evaluation import evaluate
from .models import load_model, predict, save_model
from .numeric import to_jsonable
from .synth import SynthConfig, generate
from .training import TrainConfig, train


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(
        json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _write_manifest(path, command: str, args: argparse.Namespace,
                    inputs: dict, outputs: dict, t0: float) -> None:
    base = Path(path).resolve().parent

    def rel(p) -> str:
        resolved = Path(p).resolve()
        try:
            return str(resolved.relative_to(base))
        except ValueError:
            return str(p)

    manifest = {
        "command": command,
        "version": __version__,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": {rel(p): _file_digest(p) for p in inputs.values() if p},
        "outputs": {rel(p): _file_digest(p) for p in outputs.values() if p},
        "wall_seconds": time.perf_counter() - t0,
    }
    _write_json(path, manifest)


def _parse_grid(text: str | None, flag: str):
    if text is None:
        return None
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{flag} must be comma-separated numbers, got {text!r}")
    if not values:
        raise ConfigError(f"{flag} must contain at least one value")
    return values


def _synth_config(args) -> SynthConfig:
    return SynthConfig(
        n_users=args.users,
        n_items=args.items,
        n_groups=args.groups,
        rho=tuple(np.linspace(args.rho_min, args.rho_max, args.groups)),
        exposures_per_user=args.exposures_per_user,
        unbiased_val_per_user=args.unbiased_val_per_user,
        unbiased_test_per_user=args.unbiased_test_per_user,
        pref_dim=args.pref_dim,
        pref_scale=args.pref_scale,
        item_offset_scale=args.item_offset_scale,
        group_freq_decay=args.group_freq_decay,
        temp_low=args.temp_low,
        temp_high=args.temp_high,
        seed=args.seed,
    )


def _write_synth(result, outdir: Path) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    schema_path = outdir / "schema.json"
    result.schema.save(schema_path)
    outputs["schema"] = schema_path
    for name, ds in result.splits.items():
        path = outdir / f"{name}.csv"
        ds.to_csv(path)
        outputs[name] = path
    truth_path = outdir / "truth.json"
    _write_json(truth_path, result.truth)
    outputs["truth"] = truth_path
    return outputs


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    result = generate(_synth_config(args))
    outdir = Path(args.out)
    outputs = _write_synth(result, outdir)
    _write_manifest(outdir / "manifest.json", "synth", args, {}, outputs, t0)
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        arch=args.arch,
        embedding_dim=args.embedding_dim,
        hidden=args.hidden,
        lr=args.lr,
        batch_size=args.batch_size,
        l2=args.l2,
        dropout_interaction=args.dropout_interaction,
        dropout_hidden=args.dropout_hidden,
        max_epochs=args.max_epochs,
        patience=args.patience,
        optimizer=args.optimizer,
        ablation=args.ablation,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    schema = FieldSchema.load(args.schema)
    index = FeatureIndex(schema)
    train_ds = ingest_csv(args.train, schema, index)
    val_ds = ingest_csv(args.val, schema, index) if args.val else None
    params, report = train(train_ds, val_ds, _train_config(args))
    save_model(params, args.out)
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".report.json")
    _write_json(report_path, report.to_json_dict())
    inputs = {"schema": args.schema, "train": args.train, "val": args.val}
    outputs = {"model": args.out, "report": report_path}
    _write_manifest(Path(str(args.out) + ".manifest.json"), "train", args,
                    inputs, outputs, t0)
    return 0


def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    schema = FieldSchema.load(args.schema)
    params = load_model(args.model, expected_schema_digest=schema.digest())
    index = FeatureIndex(schema)
    train_ds = ingest_csv(args.train, schema, index)
    eval_ds = ingest_csv(args.eval, schema, index) if args.eval else None
    report = bias_chain_report(params, train_ds, eval_ds)
    _write_json(args.out, report.to_json_dict())
    inputs = {"schema": args.schema, "model": args.model,
              "train": args.train, "eval": args.eval}
    _write_manifest(Path(str(args.out) + ".manifest.json"), "analyze", args,
                    inputs, {"report": args.out}, t0)
    return 0


def cmd_debias(args) -> int:
    t0 = time.perf_counter()
    schema = FieldSchema.load(args.schema)
    params = load_model(args.model, expected_schema_digest=schema.digest())
    outputs = {"model": args.out}
    if args.mode == "reduce":
        for flag, value in (("--unbiased", args.unbiased), ("--train", args.train),
                            ("--variant", args.variant),
                            ("--beta-grid", args.beta_grid),
                            ("--gamma-grid", args.gamma_grid)):
            if value is not None:
                raise ConfigError(f"{flag} does not apply to reduction")
        alpha = 0.0 if args.alpha is None else args.alpha
        adjusted = reduce_weights(params, schema.bias_range, alpha)
        inputs = {"schema": args.schema, "model": args.model}
    else:
        if args.alpha is not None:
            raise ConfigError("--alpha only applies to reduction")
        if not args.train or not args.unbiased:
            raise ConfigError("reconstruction requires --train and --unbiased")
        index = FeatureIndex(schema)
        train_ds = ingest_csv(args.train, schema, index)
        unbiased_ds = ingest_csv(args.unbiased, schema, index)
        cfg = DebiasConfig(
            beta_grid=_parse_grid(args.beta_grid, "--beta-grid") or DebiasConfig().beta_grid,
            gamma_grid=_parse_grid(args.gamma_grid, "--gamma-grid") or DebiasConfig().gamma_grid,
            variant=args.variant or "vanilla",
            k=args.k,
        )
        adjusted, result = grid_search_reconstruction(params, train_ds, unbiased_ds, cfg)
        grid_path = Path(args.grid_report) if args.grid_report else Path(str(args.out) + ".grid.json")
        _write_json(grid_path, result.to_json_dict())
        outputs["grid_report"] = grid_path
        inputs = {"schema": args.schema, "model": args.model,
                  "train": args.train, "unbiased": args.unbiased}
    save_model(adjusted, args.out)
    _write_manifest(Path(str(args.out) + ".manifest.json"), "debias", args,
                    inputs, outputs, t0)
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    schema = FieldSchema.load(args.schema)
    params = load_model(args.model, expected_schema_digest=schema.digest())
    ds = ingest_csv(args.data, schema, FeatureIndex(schema))
    scores = predict(params, ds.indices, ds.values)
    report = evaluate(ds, scores, k=args.k)
    _write_json(args.out, report.to_json_dict())
    outputs = {"report": args.out}
    if args.group_csv:
        report.write_group_csv(args.group_csv)
        outputs["group_csv"] = args.group_csv
    inputs = {"schema": args.schema, "model": args.model, "data": args.data}
    _write_manifest(Path(str(args.out) + ".manifest.json"), "eval", args,
                    inputs, outputs, t0)
    return 0


def cmd_pipeline(args) -> int:
    """synth -> train -> analyze -> debias (both modes) -> eval, in memory.

    Stage seeds derive from --seed (synth uses it directly, training uses
    seed + 1) so one flag pins the whole run.
    """
    t0 = time.perf_counter()
    outdir = Path(args.out)
    result = generate(_synth_config(args))
    outputs = _write_synth(result, outdir)

    tcfg = TrainConfig(
        arch=args.arch, embedding_dim=args.embedding_dim, hidden=args.hidden,
        lr=args.lr, batch_size=args.batch_size, l2=args.l2,
        dropout_interaction=args.dropout_interaction,
        dropout_hidden=args.dropout_hidden, max_epochs=args.max_epochs,
        patience=args.patience, optimizer="adam", ablation="none",
        seed=args.seed + 1,
    )
    params, report = train(result.train, result.val, tcfg)
    model_path = outdir / "model_base.bin"
    save_model(params, model_path)
    outputs["model_base"] = model_path
    report_path = outdir / "train_report.json"
    _write_json(report_path, report.to_json_dict())
    outputs["train_report"] = report_path

    chain = bias_chain_report(params, result.train, eval_ds=result.test)
    analysis_path = outdir / "analysis.json"
    _write_json(analysis_path, chain.to_json_dict())
    outputs["analysis"] = analysis_path

    bias_range = result.schema.bias_range
    reduced = reduce_weights(params, bias_range, args.alpha)
    reduced_path = outdir / "model_reduced.bin"
    save_model(reduced, reduced_path)
    outputs["model_reduced"] = reduced_path

    best, grid = grid_search_reconstruction(
        params, result.train, result.unbiased_val, DebiasConfig(k=args.k))
    recon_path = outdir / "model_reconstructed.bin"
    save_model(best, recon_path)
    outputs["model_reconstructed"] = recon_path
    grid_path = outdir / "grid_report.json"
    _write_json(grid_path, grid.to_json_dict())
    outputs["grid_report"] = grid_path

    def scores(p, ds):
        return predict(p, ds.indices, ds.values)

    summary = {
        "base_test": evaluate(result.test, scores(params, result.test), args.k),
        "reduced_test": evaluate(result.test, scores(reduced, result.test), args.k),
        "base_unbiased_test": evaluate(
            result.unbiased_test, scores(params, result.unbiased_test), args.k),
        "reconstructed_unbiased_test": evaluate(
            result.unbiased_test, scores(best, result.unbiased_test), args.k),
    }
    summary_path = outdir / "eval_summary.json"
    _write_json(summary_path, {k: v.to_json_dict() for k, v in summary.items()})
    outputs["eval_summary"] = summary_path

    _write_manifest(outdir / "manifest.json", "pipeline", args, {}, outputs, t0)
    return 0


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--users", type=int, default=400)
    p.add_argument("--items", type=int, default=240)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--rho-min", type=float, default=0.1)
    p.add_argument("--rho-max", type=float, default=0.9)
    p.add_argument("--exposures-per-user", type=int, default=50)
    p.add_argument("--unbiased-val-per-user", type=int, default=2)
    p.add_argument("--unbiased-test-per-user", type=int, default=6)
    p.add_argument("--pref-dim", type=int, default=8)
    p.add_argument("--pref-scale", type=float, default=1.0)
    p.add_argument("--item-offset-scale", type=float, default=0.0)
    p.add_argument("--group-freq-decay", type=float, default=0.9)
    p.add_argument("--temp-low", type=float, default=0.2)
    p.add_argument("--temp-high", type=float, default=3.0)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=("fm", "nfm"), default="fm")
    p.add_argument("--embedding-dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--dropout-interaction", type=float, default=0.0)
    p.add_argument("--dropout-hidden", type=float, default=0.0)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrbias",
        description="Train CTR models, trace feature-level bias, and correct it.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic biased/unbiased splits")
    _add_synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model on CSV splits")
    p.add_argument("--schema", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    _add_train_flags(p)
    p.add_argument("--optimizer", choices=("adam", "plain_sgd"), default="adam")
    p.add_argument("--ablation", choices=("none", "unaware"), default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--report", help="training report path (default <out>.report.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="report the ratio->weight->score chain")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--eval", help="evaluation split for variance/exposure links")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("debias", help="adjust bias-field weights of a model")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("reduce", "reconstruct"), required=True)
    p.add_argument("--alpha", type=float, help="reduction strength (reduce only)")
    p.add_argument("--train", help="training CSV (reconstruct only)")
    p.add_argument("--unbiased", help="unbiased CSV (reconstruct only)")
    p.add_argument("--variant", choices=("vanilla", "wo_ratio", "wo_residual"))
    p.add_argument("--beta-grid", help="comma-separated ratio coefficients")
    p.add_argument("--gamma-grid", help="comma-separated residual coefficients")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-report", help="grid table path (default <out>.grid.json)")
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("eval", help="score a model on a split and report metrics")
    p.add_argument("--schema", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--group-csv", help="also write per-group metrics as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage on synthetic data")
    _add_synth_flags(p)
    _add_train_flags(p)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except CtrBiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
