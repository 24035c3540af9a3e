"""Residual-learning heads: energy/force, error-norm/deviation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import mlp
from .core import (ResidualDataset, StructureRecord, UncertaintyReport, atomic_write_text,
                   fit_scaler, standardize_apply)


class HeadKind(str, Enum):
    E_NORM = "e-norm"
    E_DIFF = "e-diff"
    F_NORM = "f-norm"
    F_DIFF = "f-diff"

    @property
    def is_energy(self) -> bool:
        return self in (HeadKind.E_NORM, HeadKind.E_DIFF)

    @property
    def is_norm(self) -> bool:
        return self in (HeadKind.E_NORM, HeadKind.F_NORM)

    @property
    def output_dim(self) -> int:
        return 3 if self is HeadKind.F_DIFF else 1

    @property
    def n_hidden_layers(self) -> int:
        # only the force deviation head gets a second hidden layer
        return 2 if self is HeadKind.F_DIFF else 1


def default_layout(kind: HeadKind, d_desc: int, width: int = 64) -> mlp.MlpLayout:
    return mlp.MlpLayout(d_desc, (width,) * kind.n_hidden_layers, kind.output_dim,
                         output_softplus=kind.is_norm)


def default_schedule(kind: HeadKind, **overrides) -> mlp.TrainSchedule:
    # batch unit is structures for energy heads, atoms for force heads; 64 either way
    return mlp.TrainSchedule(**overrides)


@dataclass
class PdrlModel:
    kind: HeadKind
    net: mlp.MlpModel

    def __post_init__(self):
        self.kind = HeadKind(self.kind)
        lay = self.net.layout
        if lay.output_dim != self.kind.output_dim or lay.output_softplus != self.kind.is_norm:
            raise ValueError(f"layout {lay} is inconsistent with head {self.kind.value}")


def build_targets(residuals: ResidualDataset, kind: HeadKind,
                  scaler=None) -> mlp.SupervisedSet:
    """Supervised set for one head; descriptors standardized when ``scaler`` is given."""
    if len(residuals) == 0:
        raise ValueError("empty residual dataset")
    kind = HeadKind(kind)
    x = residuals.atom_descriptors()
    if scaler is not None:
        x = standardize_apply(scaler, x)
    if kind.is_energy:
        de = np.array([r.delta_e for r in residuals.records])
        y = np.abs(de) if kind is HeadKind.E_NORM else de
        return mlp.SupervisedSet(x, y, residuals.structure_index())
    df = residuals.atom_delta_f()
    y = np.linalg.norm(df, axis=1) if kind is HeadKind.F_NORM else df
    return mlp.SupervisedSet(x, y)


def train_pdrl(train: ResidualDataset, val: ResidualDataset, kind: HeadKind,
               schedule: mlp.TrainSchedule | None = None, seed: int = 0, width: int = 64,
               standardize: bool = True) -> tuple[PdrlModel, list[mlp.HistoryEntry]]:
    kind = HeadKind(kind)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if train.d_desc != val.d_desc:
        raise ValueError("train and validation descriptor dimensions differ")
    schedule = schedule or default_schedule(kind)
    scaler = fit_scaler(train) if standardize else None
    init_seed, loop_seed = np.random.SeedSequence(seed).generate_state(2)
    net = mlp.mlp_init(default_layout(kind, train.d_desc, width), int(init_seed), scaler)
    net, history = mlp.train_loop(net, build_targets(train, kind, scaler),
                                  build_targets(val, kind, scaler), schedule, int(loop_seed))
    return PdrlModel(kind, net), history


def _atom_outputs(model: PdrlModel, record: StructureRecord) -> np.ndarray:
    x = standardize_apply(model.net.scaler, record.descriptors)
    return mlp.mlp_forward(model.net, x)


def score_energy(model: PdrlModel, record: StructureRecord) -> tuple[float, float]:
    """(uncertainty, signed atom-sum). For E_DIFF the uncertainty is the magnitude."""
    if not model.kind.is_energy:
        raise ValueError(f"{model.kind.value} is not an energy head")
    s = math.fsum(_atom_outputs(model, record)[:, 0])
    return (s if model.kind is HeadKind.E_NORM else abs(s)), s


def score_forces(model: PdrlModel, record: StructureRecord) -> np.ndarray:
    if model.kind.is_energy:
        raise ValueError(f"{model.kind.value} is not a force head")
    out = _atom_outputs(model, record)
    return out[:, 0] if model.kind is HeadKind.F_NORM else np.linalg.norm(out, axis=1)


def score_records(model: PdrlModel, records: Sequence[StructureRecord]) -> UncertaintyReport:
    report = UncertaintyReport(f"pdrl-{model.kind.value}")
    for rec in records:
        if model.kind.is_energy:
            u, s = score_energy(model, rec)
            report.structure[rec.id] = u
            if model.kind is HeadKind.E_DIFF:
                report.signed[rec.id] = s
        else:
            report.atoms[rec.id] = score_forces(model, rec)
    return report


def model_to_dict(model: PdrlModel, history: Sequence[mlp.HistoryEntry] = ()) -> dict:
    d = {"type": "pdrl", "kind": model.kind.value, **mlp.model_to_dict(model.net)}
    if history:
        d["history"] = [[h.epoch, h.train_mse, h.val_mse, h.lr] for h in history]
    return d


def model_from_dict(d: dict) -> PdrlModel:
    if d.get("type") != "pdrl":
        raise ValueError("not a PDRL model file")
    return PdrlModel(HeadKind(d["kind"]), mlp.model_from_dict(d))


def save_pdrl(model: PdrlModel, path, history: Sequence[mlp.HistoryEntry] = ()) -> None:
    atomic_write_text(path, mlp.dumps_json(model_to_dict(model, history)))


def load_pdrl(path) -> PdrlModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
