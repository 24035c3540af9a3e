"""Descriptor-only and ensemble uncertainty baselines.

kNN: mean Euclidean distance to the k nearest training atoms (standardized space).
GMM: negative log-likelihood under a diagonal-covariance mixture fitted by EM.
Disagreement: spread of energy/force predictions across ensemble members.

kNN and GMM score atoms; a structure score is the mean (or max) over its atoms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (ResidualDataset, ScalerStats, StructureRecord, UncertaintyReport,
                   aggregate_scores, atomic_write_text, fit_scaler, standardize_apply)

COV_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


def _train_points(train: ResidualDataset | np.ndarray, standardize: bool):
    x = train.atom_descriptors() if isinstance(train, ResidualDataset) else np.asarray(train, dtype=float)
    scaler = fit_scaler(x) if standardize else ScalerStats.identity(x.shape[1])
    return standardize_apply(scaler, x), scaler


# ----------------------------------------------------------------------------
# kNN
# ----------------------------------------------------------------------------


@dataclass
class KnnIndex:
    k: int
    train_points: np.ndarray
    scaler: ScalerStats

    def __post_init__(self):
        if not 1 <= self.k <= len(self.train_points):
            raise ValueError(f"k={self.k} must be between 1 and {len(self.train_points)} stored points")


def knn_fit(train: ResidualDataset | np.ndarray, k: int = 10, standardize: bool = True) -> KnnIndex:
    points, scaler = _train_points(train, standardize)
    return KnnIndex(int(k), points, scaler)


def _distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = points - q
    return np.sqrt((diff * diff).sum(axis=1))


def _knn_standardized(index: KnnIndex, z: np.ndarray) -> np.ndarray:
    out = np.empty(len(z))
    k = index.k
    for i, q in enumerate(z):
        d = _distances(index.train_points, q)
        if k < len(d):
            d = np.partition(d, k - 1)[:k]
        out[i] = np.sort(d).mean()
    return out


def knn_score(index: KnnIndex, descriptor: np.ndarray) -> float | np.ndarray:
    """Mean distance to the k nearest stored atoms; accepts one vector or a matrix."""
    x = np.asarray(descriptor, dtype=float)
    if x.shape[-1] != index.train_points.shape[1]:
        raise ValueError(f"descriptor dimension {x.shape[-1]} != {index.train_points.shape[1]}")
    scores = _knn_standardized(index, standardize_apply(index.scaler, np.atleast_2d(x)))
    return float(scores[0]) if x.ndim == 1 else scores


# ----------------------------------------------------------------------------
# GMM
# ----------------------------------------------------------------------------


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d) diagonal entries
    scaler: ScalerStats
    log_likelihood: list[float] = field(default_factory=list)  # per-point mean, per EM iteration
    converged: bool = False

    @property
    def n_components(self) -> int:
        return len(self.weights)


def _component_log_density(x, means, covs):
    # (N, K): log N(x; mu_k, diag(cov_k))
    prec = 1.0 / covs
    quad = ((x[:, None, :] - means[None, :, :]) ** 2 * prec[None]).sum(axis=2)
    logdet = np.log(covs).sum(axis=1)
    return -0.5 * (x.shape[1] * LOG_2PI + logdet[None, :] + quad)


def _logsumexp(a, axis):
    amax = np.max(a, axis=axis, keepdims=True)
    return (amax + np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True))).squeeze(axis)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total)))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _em(x, means, covs, weights, tol, max_iter):
    history = []
    converged = False
    for _ in range(max_iter):
        logp = _component_log_density(x, means, covs) + np.log(weights)[None, :]
        norm = _logsumexp(logp, axis=1)
        ll = float(norm.mean())
        if history and ll - history[-1] < tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        safe = np.maximum(nk, np.finfo(float).tiny)[:, None]
        means = (resp.T @ x) / safe
        sq = (x[:, None, :] - means[None, :, :]) ** 2
        covs = np.maximum(np.einsum("nk,nkd->kd", resp, sq) / safe, COV_FLOOR)
    return means, covs, weights, history, converged


def gmm_fit(train: ResidualDataset | np.ndarray, n_components: int = 8, seed: int = 0,
            standardize: bool = True, tol: float = 1e-7, max_iter: int = 500) -> GmmModel:
    """EM with k-means++ seeded means, shared initial variance and a covariance floor."""
    x, scaler = _train_points(train, standardize)
    if len(x) < n_components or n_components < 1:
        raise ValueError(f"need at least {n_components} points, got {len(x)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = kmeans_plusplus(x, n_components, rng)
    covs = np.tile(np.maximum(x.var(axis=0), COV_FLOOR), (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    means, covs, weights, history, converged = _em(x, means, covs, weights, tol, max_iter)
    return GmmModel(weights, means, covs, scaler, history, converged)


def gmm_score(model: GmmModel, descriptor: np.ndarray) -> float | np.ndarray:
    """Negative log-likelihood (higher = more unusual); one vector or a matrix."""
    x = np.asarray(descriptor, dtype=float)
    if x.shape[-1] != model.means.shape[1]:
        raise ValueError(f"descriptor dimension {x.shape[-1]} != {model.means.shape[1]}")
    z = standardize_apply(model.scaler, np.atleast_2d(x))
    logp = _component_log_density(z, model.means, model.covariances) + np.log(model.weights)[None, :]
    nll = -_logsumexp(logp, axis=1)
    return float(nll[0]) if x.ndim == 1 else nll


# ----------------------------------------------------------------------------
# ensemble / stochastic-pass disagreement
# ----------------------------------------------------------------------------


def disagreement_scores(record: StructureRecord) -> tuple[float, np.ndarray]:
    """Population std of member energies; per-atom norm of per-component force stds."""
    if not record.has_ensemble:
        raise ValueError(f"structure {record.id!r} has no ensemble predictions")
    # sorting over members makes the result exactly independent of member order
    energy_unc = float(np.std(np.sort(record.ensemble_energy_preds)))
    force_unc = np.linalg.norm(np.std(np.sort(record.ensemble_force_preds, axis=0), axis=0), axis=1)
    return energy_unc, force_unc


# ----------------------------------------------------------------------------
# record-level scoring and serialization
# ----------------------------------------------------------------------------


def score_records(model: KnnIndex | GmmModel, records: Sequence[StructureRecord],
                  aggregate: str = "mean") -> UncertaintyReport:
    if isinstance(model, KnnIndex):
        fn, name = knn_score, "knn"
    else:
        fn, name = gmm_score, "gmm"
    report = UncertaintyReport(name)
    for rec in records:
        atoms = np.asarray(fn(model, rec.descriptors))
        report.atoms[rec.id] = atoms
        report.structure[rec.id] = aggregate_scores(atoms, aggregate)
    return report


def ensemble_report(records: Sequence[StructureRecord]) -> UncertaintyReport:
    report = UncertaintyReport("ensemble")
    for rec in records:
        e, f = disagreement_scores(rec)
        report.structure[rec.id] = e
        report.atoms[rec.id] = f
    return report


def model_to_dict(model: KnnIndex | GmmModel) -> dict:
    if isinstance(model, KnnIndex):
        return {"type": "knn", "k": model.k, "scaler": model.scaler.to_dict(),
                "train_points": model.train_points.tolist()}
    return {"type": "gmm", "n_components": model.n_components, "scaler": model.scaler.to_dict(),
            "weights": model.weights.tolist(), "means": model.means.tolist(),
            "covariances": model.covariances.tolist(), "log_likelihood": list(model.log_likelihood),
            "converged": model.converged}


def model_from_dict(d: dict) -> KnnIndex | GmmModel:
    scaler = ScalerStats.from_dict(d["scaler"])
    if d.get("type") == "knn":
        return KnnIndex(int(d["k"]), np.asarray(d["train_points"], dtype=float), scaler)
    if d.get("type") == "gmm":
        w = np.asarray(d["weights"], dtype=float)
        covs = np.asarray(d["covariances"], dtype=float)
        if abs(w.sum() - 1.0) > 1e-9 or np.any(covs < COV_FLOOR):
            raise ValueError("invalid GMM parameters")
        return GmmModel(w, np.asarray(d["means"], dtype=float), covs, scaler,
                        list(d.get("log_likelihood", [])), bool(d.get("converged", False)))
    raise ValueError(f"unknown baseline model type {d.get('type')!r}")


def save_baseline(model: KnnIndex | GmmModel, path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True, allow_nan=False) + "\n")


def load_baseline(path) -> KnnIndex | GmmModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
