"""Command-line pipeline: gen, train, baseline, score, ensemble-score, eval, ood, pca.

Exit status: 0 success, 1 invalid input or usage, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import baselines, evaluation, heads
from .core import (DatasetError, UncertaintyReport, atomic_write_text, compute_residuals,
                   load_dataset, load_datasets, read_scores_csv, scores_to_csv)
from .mlp import TrainSchedule
from .synthdata import SynthConfig, write_synthetic

log = logging.getLogger("pdrl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _pick(args, cfg: dict, name: str, default):
    """Flag value, else config file entry, else built-in default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PDRL_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_score(fn, records) -> UncertaintyReport:
    # chunked map keeps record order, so output is identical for any thread count
    n = _threads()
    if n == 1 or len(records) < 2:
        return fn(records)
    size = -(-len(records) // n)
    chunks = [records[i:i + size] for i in range(0, len(records), size)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(fn, chunks))
    merged = UncertaintyReport(parts[0].scorer)
    for p in parts:
        merged.structure.update(p.structure)
        merged.signed.update(p.signed)
        merged.atoms.update(p.atoms)
    return merged


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg = _load_config(args.config)
    fields = SynthConfig().to_dict()
    unknown = set(cfg) - set(fields)
    if unknown:
        raise ValueError(f"unknown synthetic config keys {sorted(unknown)}")
    values = {**fields, **cfg, "seed": args.seed if args.seed is not None else cfg.get("seed", 0)}
    if args.ood_shift is not None:
        values["ood_shift"] = args.ood_shift
    if args.noise_scale is not None:
        values["noise_scale"] = args.noise_scale
    paths = write_synthetic(SynthConfig(**values), args.out)
    for split, p in paths.items():
        print(f"{split}: {p}")


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    kind = heads.HeadKind(_pick(args, cfg, "head", None) or "f-norm")
    schedule = TrainSchedule(
        initial_lr=float(_pick(args, cfg, "lr", 1e-3)),
        patience=int(_pick(args, cfg, "patience", 10)),
        min_lr=float(_pick(args, cfg, "min_lr", 1e-7)),
        max_epochs=int(_pick(args, cfg, "max_epochs", 1000)),
        batch_size=int(_pick(args, cfg, "batch_size", 64)),
    )
    seed = int(_pick(args, cfg, "seed", 0))
    width = int(cfg.get("width", 64))
    train = compute_residuals(load_dataset(args.data))
    val = compute_residuals(load_dataset(args.val))
    model, history = heads.train_pdrl(train, val, kind, schedule, seed, width,
                                      standardize=not args.no_standardize)
    heads.save_pdrl(model, args.out, history)
    best = min(h.val_mse for h in history)
    print(f"trained {kind.value}: {len(history) - 1} epochs, best val MSE {best:.6g}, final lr {history[-1].lr:.3g}")


def cmd_baseline(args) -> None:
    cfg = _load_config(args.config)
    method = _pick(args, cfg, "method", None)
    if method not in ("knn", "gmm"):
        raise ValueError("--method must be knn or gmm")
    train = compute_residuals(load_dataset(args.data))
    standardize = not args.no_standardize
    if method == "knn":
        model = baselines.knn_fit(train, int(_pick(args, cfg, "k", 10)), standardize)
    else:
        model = baselines.gmm_fit(train, int(_pick(args, cfg, "components", 8)),
                                  int(_pick(args, cfg, "seed", 0)), standardize)
    baselines.save_baseline(model, args.out)
    print(f"fitted {method} on {train.n_atoms} atoms")


def _load_any_model(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("type") == "pdrl":
        return heads.model_from_dict(d)
    return baselines.model_from_dict(d)


def cmd_score(args) -> None:
    model = _load_any_model(args.model)
    records = load_datasets(args.data)
    aggregate = args.aggregate or "mean"
    if isinstance(model, heads.PdrlModel):
        report = _parallel_score(lambda rs: heads.score_records(model, rs), records)
    else:
        report = _parallel_score(lambda rs: baselines.score_records(model, rs, aggregate), records)
    atomic_write_text(args.out, scores_to_csv(report, [r.id for r in records]))
    print(f"scored {len(records)} structures with {report.scorer}")


def cmd_ensemble_score(args) -> None:
    records = load_datasets(args.data)
    report = _parallel_score(baselines.ensemble_report, records)
    atomic_write_text(args.out, scores_to_csv(report, [r.id for r in records]))
    print(f"scored {len(records)} structures by ensemble disagreement")


def _write_reports(reports, out) -> None:
    text = evaluation.reports_to_csv(reports)
    if out:
        out = Path(out)
        atomic_write_text(out, text)
        atomic_write_text(out.with_suffix(".json"), evaluation.reports_to_json(reports))
    sys.stdout.write(text)


def cmd_eval(args) -> None:
    records = load_datasets(args.data)
    scores = read_scores_csv(args.scores, args.scorer)
    reports = evaluation.run_id_eval(scores, records, args.target,
                                     low_quantile=args.quantile, force_pairs=args.force_pairs,
                                     aggregate=args.aggregate or "mean", split_tag=args.split_tag)
    _write_reports(reports, args.out)


def cmd_ood(args) -> None:
    records = load_datasets(args.data)
    scores = read_scores_csv(args.scores, args.scorer)
    id_s, ood_s, id_e, ood_e = evaluation.ood_inputs(scores, records, args.aggregate or "mean")
    reports = evaluation.run_ood_eval(id_s, ood_s, id_e, ood_e, scorer=scores.scorer,
                                      spearman_on=args.spearman_on)
    _write_reports(reports, args.out)


def cmd_pca(args) -> None:
    train_path, *other_paths = args.data
    train = compute_residuals(load_dataset(train_path))
    others = [(Path(p).stem, compute_residuals(load_dataset(p))) for p in other_paths]
    scores = read_scores_csv(args.scores) if args.scores else None
    model, table = evaluation.pca_project(train, others, args.components_pca, scores,
                                          train_name=Path(train_path).stem)
    atomic_write_text(args.out, table.to_csv())
    total = model.eigenvalues.sum()
    explained = model.eigenvalues[:args.components_pca] / total if total > 0 else model.eigenvalues[:0]
    print("explained variance: " + ", ".join(f"{v:.4f}" for v in explained))


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pdrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write synthetic train/val/test/ood JSONL files")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="JSON file with SynthConfig fields")
    g.add_argument("--ood-shift", type=float)
    g.add_argument("--noise-scale", type=float)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a PDRL head")
    t.add_argument("--head", choices=[k.value for k in heads.HeadKind])
    t.add_argument("--data", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--min-lr", type=float)
    t.add_argument("--config")
    t.add_argument("--no-standardize", action="store_true")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("baseline", help="fit a kNN or GMM descriptor baseline")
    b.add_argument("--method", choices=["knn", "gmm"])
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--k", type=int)
    b.add_argument("--components", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--config")
    b.add_argument("--no-standardize", action="store_true")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("score", help="score structures with a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--aggregate", choices=["mean", "max"])
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("ensemble-score", help="score structures by ensemble disagreement")
    e.add_argument("--data", required=True, nargs="+")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_ensemble_score)

    v = sub.add_parser("eval", help="in-domain Spearman and low/high-error AUC")
    v.add_argument("--scores", required=True)
    v.add_argument("--data", required=True, nargs="+")
    v.add_argument("--target", choices=["energy", "force"], required=True)
    v.add_argument("--quantile", type=float, default=evaluation.DEFAULT_LOW_QUANTILE)
    v.add_argument("--aggregate", choices=["mean", "max"])
    v.add_argument("--force-pairs", choices=["atom", "structure"], default="atom")
    v.add_argument("--scorer", help="name written to the report (default: scores file stem)")
    v.add_argument("--split-tag", default="test")
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    o = sub.add_parser("ood", help="OOD detection AUC and Spearman per OOD tag and pooled")
    o.add_argument("--scores", required=True)
    o.add_argument("--data", required=True, nargs="+")
    o.add_argument("--aggregate", choices=["mean", "max"])
    o.add_argument("--spearman-on", choices=["pooled", "ood"], default="pooled")
    o.add_argument("--scorer")
    o.add_argument("--out")
    o.set_defaults(func=cmd_ood)

    c = sub.add_parser("pca", help="project atoms onto principal axes of the training descriptors")
    c.add_argument("--data", required=True, nargs="+", help="training file first, then sets to project")
    c.add_argument("--scores", help="optional score CSV to attach as the uncertainty column")
    c.add_argument("--components-pca", type=int, default=2)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_pca)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
