"""Command-line entry point: ``treatnet <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Errors are reported as one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_mod
from .checks import run_all
from .config import ConfigError, RunConfig
from .embeddings import BankFormatError, StudyNotFoundError, load_bank
from .experiments import data_efficiency, mean_by
from .metrics import EvalReport, UndefinedMetricError, agreement_analysis, write_reports, write_roc_csv
from .model import EmptyStudyError, FusionModel, TabularModel, load_checkpoint, save_checkpoint
from .pipeline import FUSION_KINDS, Prepared, evaluate_model, prepare, score
from .synthgen import BANK_FILE, RECORDS_CSV, SCHEMA_JSON, TuningError, generate, write_cohort
from .tabular import FitError, SchemaError, load_preprocessing, read_records_csv, save_preprocessing
from .tensor import ShapeError
from .train import MissingStudyError, NumericError, subsample_paired, train_fusion, train_tabular

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
PREPROCESSING = "preprocessing.json"
TRAIN_LOG = "train_log.csv"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericFailure(Exception):
    pass


DATA_ERRORS = (DataError, FileNotFoundError, NotADirectoryError, SchemaError, FitError, BankFormatError,
               StudyNotFoundError, MissingStudyError, ShapeError, EmptyStudyError)
NUMERIC_ERRORS = (NumericFailure, NumericError, UndefinedMetricError, TuningError, FloatingPointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc) if not isinstance(exc, KeyError) else str(exc.args[0] if exc.args else exc)
    line = {"error": kind, "code": code, "type": type(exc).__name__, "message": msg}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


# ------------------------------------------------------------------ helpers


def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config)
    seed = config_mod.resolve_seed(cfg, getattr(args, "seed", None))
    return config_mod.with_seed(cfg, seed)


def _read_data(data_dir: str | Path):
    data = Path(data_dir)
    if not data.is_dir():
        raise DataError(f"data directory not found: {data}")
    schema, _ = load_preprocessing(data / SCHEMA_JSON)
    records = read_records_csv(data / RECORDS_CSV, schema)
    bank = load_bank(data / BANK_FILE)
    return records, schema, bank


def _prepared_from_ckpt(ckpt_dir: Path, data_dir: str | Path, model) -> tuple[Prepared, dict]:
    """Rebuild the split and preprocessing a checkpoint was trained with."""
    records, schema, bank = _read_data(data_dir)
    schema2, scaler = load_preprocessing(ckpt_dir / PREPROCESSING)
    if schema2 != schema:
        raise DataError(f"schema of {data_dir} differs from the one stored with {ckpt_dir}")
    if isinstance(model, FusionModel) and bank.width != model.cfg.d:
        raise DataError(f"embedding width mismatch: checkpoint {ckpt_dir} expects {model.cfg.d}, "
                        f"bank has {bank.width}")
    manifest_meta = json.loads((ckpt_dir / "manifest.json").read_text(encoding="utf-8"))["meta"]
    if model.encoder is None or model.encoder.in_width != schema.width:
        raise DataError(f"checkpoint {ckpt_dir} has no tabular encoder for {schema.width} features")
    prep = prepare(records, schema, bank, split_seed=manifest_meta.get("split_seed", 0),
                   encoder=model.encoder, scaler=scaler)
    return prep, manifest_meta


def _eval_batches(prep: Prepared, model):
    if isinstance(model, TabularModel):
        return prep.tab_batch(prep.paired_val), prep.tab_batch(prep.paired_test)
    return prep.paired_batch(prep.paired_val), prep.paired_batch(prep.paired_test)


def _check_finite(scores: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(scores)):
        raise NumericFailure(f"non-finite scores from {what}")


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    cohort = generate(cfg.gen)
    write_cohort(cohort, args.out)
    config_mod.write_resolved(cfg, args.out)
    print(f"wrote {len(cohort.records)} records and {len(cohort.bank)} studies to {args.out}")
    return 0


def cmd_pretrain_tab(args) -> int:
    cfg = _load_config(args)
    records, schema, bank = _read_data(args.data)
    model_cfg = replace(cfg.model, feature_width=schema.width)
    prep = prepare(records, schema, bank, model_cfg, cfg.eval.split_seed)
    tcfg = cfg.tabular_train()
    model, tlog = train_tabular(prep.tab_batch(prep.full_train), prep.tab_batch(prep.full_val),
                                tcfg, prep.encoder, model_cfg.tab_hidden_dim)
    out = Path(args.out)
    save_checkpoint(model, out, meta={"seed": tcfg.seed, "split_seed": cfg.eval.split_seed, "phase": "tabular"})
    save_preprocessing(out / PREPROCESSING, schema, prep.scaler)
    tlog.write_csv(out / TRAIN_LOG)
    config_mod.write_resolved(cfg, out)
    print(f"tabular head: best val AUROC {tlog.best_val_auroc:.4f} at step {tlog.best_step}")
    return 0


def cmd_train_fusion(args) -> int:
    cfg = _load_config(args)
    tab_dir = Path(args.tab_ckpt)
    tab_model, tab_manifest = load_checkpoint(tab_dir)
    if not isinstance(tab_model, TabularModel):
        raise DataError(f"{tab_dir} is a {tab_manifest['kind']} checkpoint, expected tabular_only")
    prep, tab_meta = _prepared_from_ckpt(tab_dir, args.data, tab_model)
    model_cfg = replace(cfg.model, feature_width=prep.schema.width, tab_embed_dim=tab_model.encoder.out_width,
                        tab_hidden_dim=tab_model.head.params["w1"].shape[1])
    if prep.bank.width != model_cfg.d:
        raise DataError(f"embedding width mismatch: model d={model_cfg.d}, bank has {prep.bank.width}")
    fraction = 1.0 if args.fraction is None else args.fraction
    tcfg = cfg.fusion_train()
    train_recs = prep.paired_train
    if fraction < 1.0:
        train_recs = subsample_paired(train_recs, fraction, seed=tcfg.seed)
    model, tlog = train_fusion(prep.paired_batch(train_recs), prep.paired_batch(prep.paired_val), tcfg,
                               model_cfg, prep.encoder, tab_model.head, kind=args.model)
    out = Path(args.out)
    meta = {"seed": tcfg.seed, "split_seed": tab_meta.get("split_seed", 0), "phase": "fusion", "fraction": fraction}
    save_checkpoint(model, out, meta=meta)
    shutil.copyfile(tab_dir / PREPROCESSING, out / PREPROCESSING)
    tlog.write_csv(out / TRAIN_LOG)
    config_mod.write_resolved(cfg, out)
    print(f"{args.model}: best val AUROC {tlog.best_val_auroc:.4f} at step {tlog.best_step}")
    return 0


def cmd_eval(args) -> int:
    reports: dict[str, EvalReport] = {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ck in args.ckpts:
        ck = Path(ck)
        model, manifest = load_checkpoint(ck)
        prep, meta = _prepared_from_ckpt(ck, args.data, model)
        val, test = _eval_batches(prep, model)
        seed = int(meta.get("seed", 0))
        test_scores = score(model, test, model.kind, seed)
        _check_finite(test_scores.scores, str(ck))
        spec = tuple(args.spec_targets) if args.spec_targets else (0.2, 0.4, 0.6)
        metrics = evaluate_model(model, val, test, spec)
        reports.setdefault(model.kind, EvalReport(model.kind)).add(seed, metrics)
        write_roc_csv(test_scores, out / f"roc_{model.kind}_seed{seed}.csv")
    order = [k for k in ("treatnet", "cross_attention_only", "tabular_only", "video_only") if k in reports]
    csv_path, _ = write_reports([reports[k] for k in order], out)
    print(f"wrote {csv_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    records, schema, bank = _read_data(args.data)
    model_cfg = replace(cfg.model, feature_width=schema.width)
    if bank.width != model_cfg.d:
        raise DataError(f"embedding width mismatch: model d={model_cfg.d}, bank has {bank.width}")
    fractions = args.fractions or cfg.eval.fractions
    seeds = [args.seed] if args.seed is not None else cfg.eval.seeds
    models = args.models or ["treatnet", "video_only"]
    prep = prepare(records, schema, bank, model_cfg, cfg.eval.split_seed)
    rows = data_efficiency(cfg, prep, model_cfg, fractions, models, seeds, log=lambda m: print(m, flush=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data_efficiency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fraction", "seed", "n_train", "auroc", "bacc"])
        for r in rows:
            w.writerow([r.model, repr(r.fraction), r.seed, r.n_train, repr(r.auroc), repr(r.bacc)])
        for kind in models:
            for frac in fractions:
                n_train = next(r.n_train for r in rows if r.model == kind and r.fraction == frac)
                w.writerow([kind, repr(float(frac)), "mean", n_train, repr(mean_by(rows, kind, frac, "auroc")),
                            repr(mean_by(rows, kind, frac, "bacc"))])
    config_mod.write_resolved(cfg, out)
    return 0


def cmd_agreement(args) -> int:
    scored = []
    for ck in (Path(args.ckpt_a), Path(args.ckpt_b)):
        model, _ = load_checkpoint(ck)
        prep, meta = _prepared_from_ckpt(ck, args.data, model)
        _, test = _eval_batches(prep, model)
        s = score(model, test, model.kind, meta.get("seed"))
        _check_finite(s.scores, str(ck))
        scored.append(s)
    result = agreement_analysis(scored[0], scored[1], args.spec)
    doc = {"model_a": scored[0].model, "model_b": scored[1].model, "target_spec": args.spec, **result.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "agreement.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_all(args.seed if args.seed is not None else 0)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    failed = [name for name, ok, _ in rows if not ok]
    if failed:
        raise NumericFailure(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 0


# ------------------------------------------------------------------- parser


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treatnet", description="Tabular-guided cross-attention fusion: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config and $TREAT_SEED")
        if data:
            sp.add_argument("--data", required=True, help="directory written by gen-data")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-data", help="write a synthetic cohort")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain-tab", help="phase 1: train the tabular head on the full cohort")
    common(sp)
    sp.set_defaults(func=cmd_pretrain_tab)

    sp = sub.add_parser("train-fusion", help="phase 2: train a fusion model on the paired cohort")
    common(sp)
    sp.add_argument("--tab-ckpt", required=True, help="checkpoint directory from pretrain-tab")
    sp.add_argument("--model", default="treatnet", choices=FUSION_KINDS)
    sp.add_argument("--fraction", type=float, help="fraction of the paired training split to use")
    sp.set_defaults(func=cmd_train_fusion)

    sp = sub.add_parser("eval", help="score checkpoints on the paired test split")
    sp.add_argument("--ckpts", nargs="+", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--spec-targets", type=_floats, help="comma-separated specificity targets")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate-data-efficiency", help="balanced accuracy against paired training-set size")
    common(sp)
    sp.add_argument("--fractions", type=_floats, help="e.g. 0.1,0.25,0.5,0.75,1.0")
    sp.add_argument("--models", nargs="+", choices=FUSION_KINDS + ("tabular_only",))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("agreement", help="per-class accuracy where two models agree")
    sp.add_argument("--ckpt-a", required=True)
    sp.add_argument("--ckpt-b", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--spec", type=float, default=0.4)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_agreement)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient and invariant checks")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except DATA_ERRORS as exc:
        return _fail(EXIT_DATA, "data", exc)
    except NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)


if __name__ == "__main__":
    sys.exit(main())
