"""Error/uncertainty metrics, the in-domain and OOD protocols, and PCA export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (ResidualDataset, ScalerStats, StructureRecord, UncertaintyReport,
                   aggregate_scores, fit_scaler, standardize_apply)

DEFAULT_LOW_QUANTILE = 0.2
POOLED_TAG = "All"


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------


def rankdata(values) -> np.ndarray:
    """1-based ranks, ties given the average of the ranks they span."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="stable")
    sorted_a = a[order]
    ranks = np.empty(len(a))
    i = 0
    n = len(a)
    while i < n:
        j = i
        while j + 1 < n and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    return float((da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum()))


def spearman(xs, ys) -> float:
    """Pearson correlation of average-tie ranks."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise ValueError("spearman needs at least two pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("spearman is undefined for a constant sequence")
    r = _pearson(rankdata(x), rankdata(y))
    return min(1.0, max(-1.0, r))


def roc_auc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counting one half."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels)
    if s.shape != lab.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = lab == 1
    n_pos = int(pos.sum())
    n_neg = len(lab) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    # rank sums are exact half-integers, so this equals pair counting exactly
    u = rankdata(s)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def error_split(errors, low_quantile: float = DEFAULT_LOW_QUANTILE) -> np.ndarray:
    """Label the floor(q*n) smallest errors 0 (low error), the rest 1."""
    e = np.asarray(errors, dtype=float)
    if len(e) == 0:
        raise ValueError("empty error list")
    if not 0 < low_quantile < 1:
        raise ValueError("low_quantile must lie in (0, 1)")
    n_low = math.floor(low_quantile * len(e) + 1e-9)
    labels = np.ones(len(e), dtype=int)
    labels[np.argsort(e, kind="stable")[:n_low]] = 0
    return labels


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    scorer_name: str
    target: str  # energy | force
    metric: str  # spearman | auc
    value: float
    n_samples: int
    split_tag: str
    positive_class: str = ""  # auc only: which side is labelled 1

    def __post_init__(self):
        lo = -1.0 if self.metric == "spearman" else 0.0
        if self.metric not in ("spearman", "auc") or not lo <= self.value <= 1.0:
            raise ValueError(f"invalid report {self}")


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scorer", "target", "metric", "split", "value", "n"])
    for r in reports:
        w.writerow([r.scorer_name, r.target, r.metric, r.split_tag, repr(float(r.value)), r.n_samples])
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------------
# in-domain protocol
# ----------------------------------------------------------------------------


def energy_uncertainty(report: UncertaintyReport, sid: str, aggregate: str = "mean") -> float:
    """Structure row when present (energy heads, ensemble energy spread), else aggregated atoms."""
    if sid in report.structure:
        return report.structure[sid]
    if sid in report.atoms:
        return aggregate_scores(report.atoms[sid], aggregate)
    raise KeyError(sid)


def force_structure_uncertainty(report: UncertaintyReport, sid: str, aggregate: str = "mean") -> float:
    """Aggregated per-atom scores when present, else the structure row."""
    if sid in report.atoms:
        return aggregate_scores(report.atoms[sid], aggregate)
    if sid in report.structure:
        return report.structure[sid]
    raise KeyError(sid)


def force_error_norms(record: StructureRecord) -> np.ndarray:
    return np.linalg.norm(record.forces_true - record.forces_pred, axis=1)


def structure_force_error(record: StructureRecord, aggregate: str = "mean") -> float:
    return aggregate_scores(force_error_norms(record), aggregate)


def _check_coverage(report: UncertaintyReport, records: Sequence[StructureRecord], atoms: bool):
    missing = [r.id for r in records
               if (r.id not in report.atoms if atoms else not report.covers(r.id))]
    if missing:
        what = "per-atom scores" if atoms else "scores"
        raise ValueError(f"{len(missing)} structures lack {what}, e.g. {missing[0]!r}")
    if atoms:
        for r in records:
            if len(report.atoms[r.id]) != r.n_atoms:
                raise ValueError(f"structure {r.id!r}: {len(report.atoms[r.id])} atom scores for {r.n_atoms} atoms")


def id_pairs(report: UncertaintyReport, records: Sequence[StructureRecord], target: str,
             force_pairs: str = "atom", aggregate: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """(errors, uncertainties) for the in-domain protocol."""
    if target == "energy":
        _check_coverage(report, records, atoms=False)
        err = np.array([abs(r.energy_true - r.energy_pred) for r in records])
        unc = np.array([energy_uncertainty(report, r.id, aggregate) for r in records])
    elif target == "force" and force_pairs == "atom":
        _check_coverage(report, records, atoms=True)
        err = np.concatenate([force_error_norms(r) for r in records])
        unc = np.concatenate([report.atoms[r.id] for r in records])
    elif target == "force" and force_pairs == "structure":
        _check_coverage(report, records, atoms=False)
        err = np.array([structure_force_error(r, aggregate) for r in records])
        unc = np.array([force_structure_uncertainty(report, r.id, aggregate) for r in records])
    else:
        raise ValueError(f"unknown target/pairing {target!r}/{force_pairs!r}")
    return err, unc


def run_id_eval(scores: UncertaintyReport, records: Sequence[StructureRecord], target: str,
                low_quantile: float = DEFAULT_LOW_QUANTILE, force_pairs: str = "atom",
                aggregate: str = "mean", split_tag: str = "test") -> list[EvalReport]:
    """Spearman(error, uncertainty) and low/high-error AUC for one scorer and target."""
    err, unc = id_pairs(scores, records, target, force_pairs, aggregate)
    labels = error_split(err, low_quantile)
    n = len(err)
    return [
        EvalReport(scores.scorer, target, "spearman", spearman(err, unc), n, split_tag),
        EvalReport(scores.scorer, target, "auc", roc_auc(unc, labels), n, split_tag, "high-error"),
    ]


# ----------------------------------------------------------------------------
# OOD protocol
# ----------------------------------------------------------------------------


def is_ood_split(split: str | None) -> bool:
    return bool(split) and split.startswith("ood")


def ood_inputs(report: UncertaintyReport, records: Sequence[StructureRecord], aggregate: str = "mean"):
    """Group per-structure force uncertainties and force errors into ID and per-tag OOD sets."""
    _check_coverage(report, records, atoms=False)
    id_s, id_e = [], []
    ood_s: dict[str, list[float]] = {}
    ood_e: dict[str, list[float]] = {}
    for r in records:
        s = force_structure_uncertainty(report, r.id, aggregate)
        e = structure_force_error(r, aggregate)
        if is_ood_split(r.split):
            ood_s.setdefault(r.split, []).append(s)
            ood_e.setdefault(r.split, []).append(e)
        else:
            id_s.append(s)
            id_e.append(e)
    return (np.array(id_s), {k: np.array(v) for k, v in ood_s.items()},
            np.array(id_e), {k: np.array(v) for k, v in ood_e.items()})


def run_ood_eval(id_scores, ood_scores: Mapping[str, np.ndarray], id_errors,
                 ood_errors: Mapping[str, np.ndarray], scorer: str = "scorer",
                 spearman_on: str = "pooled") -> list[EvalReport]:
    """Per OOD tag plus the pooled "All" set: AUC (OOD = 1) and error Spearman.

    ``spearman_on="pooled"`` correlates over ID and OOD together; ``"ood"`` uses the
    OOD structures only.
    """
    id_scores = np.asarray(id_scores, dtype=float)
    id_errors = np.asarray(id_errors, dtype=float)
    if len(id_scores) == 0 or not ood_scores or any(len(v) == 0 for v in ood_scores.values()):
        raise ValueError("both ID and OOD sets must be nonempty")
    if set(ood_scores) != set(ood_errors):
        raise ValueError("OOD score and error tags differ")
    groups = {tag: (np.asarray(ood_scores[tag], float), np.asarray(ood_errors[tag], float))
              for tag in sorted(ood_scores)}
    groups[POOLED_TAG] = (np.concatenate([g[0] for g in groups.values()]),
                          np.concatenate([g[1] for g in groups.values()]))
    reports = []
    for tag, (s, e) in groups.items():
        scores = np.concatenate([id_scores, s])
        labels = np.concatenate([np.zeros(len(id_scores), int), np.ones(len(s), int)])
        if spearman_on == "pooled":
            rho, n_rho = spearman(np.concatenate([id_errors, e]), scores), len(scores)
        elif spearman_on == "ood":
            rho, n_rho = spearman(e, s), len(s)
        else:
            raise ValueError(f"unknown spearman_on {spearman_on!r}")
        reports.append(EvalReport(scorer, "force", "spearman", rho, n_rho, tag))
        reports.append(EvalReport(scorer, "force", "auc", roc_auc(scores, labels), len(scores), tag, "ood"))
    return reports


# ----------------------------------------------------------------------------
# PCA
# ----------------------------------------------------------------------------


@dataclass
class PcaModel:
    scaler: ScalerStats
    eigenvalues: np.ndarray  # descending, >= 0
    axes: np.ndarray  # (d_desc, d_desc), rows are unit principal axes

    def transform(self, descriptors: np.ndarray, n_components: int | None = None) -> np.ndarray:
        z = standardize_apply(self.scaler, descriptors)
        return z @ self.axes[:n_components].T


def pca_fit(train: ResidualDataset | np.ndarray) -> PcaModel:
    x = train.atom_descriptors() if isinstance(train, ResidualDataset) else np.asarray(train, float)
    if len(x) < 2:
        raise ValueError("PCA needs at least two training atoms")
    scaler = fit_scaler(x)
    z = standardize_apply(scaler, x)
    cov = (z.T @ z) / len(z)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.maximum(vals[order], 0.0)
    axes = vecs[:, order].T
    flip = np.sign(axes[np.arange(len(axes)), np.argmax(np.abs(axes), axis=1)])
    axes = axes * flip[:, None]
    return PcaModel(scaler, vals, axes)


@dataclass
class PcaTable:
    n_components: int
    set_names: list[str] = field(default_factory=list)
    structure_ids: list[str] = field(default_factory=list)
    atom_index: list[int] = field(default_factory=list)
    components: list[np.ndarray] = field(default_factory=list)
    force_error_norm: list[float] = field(default_factory=list)
    uncertainty: list[float | None] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["set", "structure_id", "atom_index",
                    *[f"pc{i + 1}" for i in range(self.n_components)], "force_error_norm", "uncertainty"])
        for row in zip(self.set_names, self.structure_ids, self.atom_index, self.components,
                       self.force_error_norm, self.uncertainty):
            name, sid, j, pcs, ferr, unc = row
            w.writerow([name, sid, j, *[repr(float(v)) for v in pcs], repr(float(ferr)),
                        "" if unc is None else repr(float(unc))])
        return buf.getvalue()


def pca_project(train: ResidualDataset, others: Sequence[tuple[str, ResidualDataset]],
                n_components: int = 2, uncertainty: UncertaintyReport | None = None,
                train_name: str = "train") -> tuple[PcaModel, PcaTable]:
    """Fit axes on the training atoms and project the training set and every other set."""
    if not 1 <= n_components <= train.d_desc:
        raise ValueError(f"n_components must be in [1, {train.d_desc}]")
    model = pca_fit(train)
    table = PcaTable(n_components)
    for name, data in [(train_name, train), *others]:
        for rec in data.records:
            pcs = model.transform(rec.descriptors, n_components)
            ferr = np.linalg.norm(rec.delta_f, axis=1)
            atom_unc = uncertainty.atoms.get(rec.structure_id) if uncertainty else None
            struct_unc = uncertainty.structure.get(rec.structure_id) if uncertainty else None
            for j in range(rec.n_atoms):
                table.set_names.append(name)
                table.structure_ids.append(rec.structure_id)
                table.atom_index.append(j)
                table.components.append(pcs[j])
                table.force_error_norm.append(float(ferr[j]))
                table.uncertainty.append(float(atom_unc[j]) if atom_unc is not None else struct_unc)
    return model, table
