"""Structure records, the JSON Lines dataset format, residuals and descriptor scaling."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPSILON_STD = 1e-8


class DatasetError(ValueError):
    """A dataset file or record violates the format invariants."""


@dataclass
class StructureRecord:
    id: str
    atomic_numbers: np.ndarray  # (n,) int
    descriptors: np.ndarray  # (n, d_desc)
    energy_true: float
    energy_pred: float
    forces_true: np.ndarray  # (n, 3)
    forces_pred: np.ndarray  # (n, 3)
    ensemble_energy_preds: np.ndarray | None = None  # (M,)
    ensemble_force_preds: np.ndarray | None = None  # (M, n, 3)
    split: str | None = None

    @property
    def n_atoms(self) -> int:
        return int(self.descriptors.shape[0])

    @property
    def d_desc(self) -> int:
        return int(self.descriptors.shape[1])

    @property
    def has_ensemble(self) -> bool:
        return self.ensemble_energy_preds is not None and self.ensemble_force_preds is not None

    def validate(self) -> None:
        n = len(self.atomic_numbers)
        if n < 1:
            raise DatasetError(f"structure {self.id!r} has no atoms")
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != n:
            raise DatasetError(f"structure {self.id!r}: descriptor rows do not match {n} atoms")
        for name in ("forces_true", "forces_pred"):
            arr = getattr(self, name)
            if arr.shape != (n, 3):
                raise DatasetError(f"structure {self.id!r}: {name} has shape {arr.shape}, expected ({n}, 3)")
        if np.any(self.atomic_numbers < 1):
            raise DatasetError(f"structure {self.id!r}: atomic numbers must be positive")
        arrays = [self.descriptors, self.forces_true, self.forces_pred,
                  np.array([self.energy_true, self.energy_pred])]
        if (self.ensemble_energy_preds is None) != (self.ensemble_force_preds is None):
            raise DatasetError(f"structure {self.id!r}: ensemble energies and forces must be given together")
        if self.ensemble_energy_preds is not None:
            m = len(self.ensemble_energy_preds)
            if m < 2:
                raise DatasetError(f"structure {self.id!r}: ensemble needs at least 2 members, got {m}")
            if self.ensemble_force_preds.shape != (m, n, 3):
                raise DatasetError(
                    f"structure {self.id!r}: ensemble forces shape {self.ensemble_force_preds.shape}, "
                    f"expected ({m}, {n}, 3)")
            arrays += [self.ensemble_energy_preds, self.ensemble_force_preds]
        for arr in arrays:
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"structure {self.id!r}: non-finite value")


@dataclass
class ResidualRecord:
    structure_id: str
    descriptors: np.ndarray  # (n, d_desc)
    delta_e: float
    delta_f: np.ndarray  # (n, 3)

    @property
    def n_atoms(self) -> int:
        return int(self.descriptors.shape[0])


@dataclass
class ResidualDataset:
    records: list[ResidualRecord]
    d_desc: int

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_atoms(self) -> int:
        return sum(r.n_atoms for r in self.records)

    def atom_descriptors(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.d_desc))
        return np.concatenate([r.descriptors for r in self.records], axis=0)

    def atom_delta_f(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 3))
        return np.concatenate([r.delta_f for r in self.records], axis=0)

    def structure_index(self) -> np.ndarray:
        """Index of the owning structure for every atom, in atom order."""
        return np.repeat(np.arange(len(self.records)), [r.n_atoms for r in self.records])


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))

    @classmethod
    def identity(cls, d_desc: int) -> "ScalerStats":
        return cls(np.zeros(d_desc), np.ones(d_desc))


# ----------------------------------------------------------------------------
# dataset file format
# ----------------------------------------------------------------------------


def _as_matrix(values, cols: int | None, what: str) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{what}: not a numeric array") from exc
    if cols is not None and (arr.ndim != 1 or arr.shape[0] != cols):
        raise DatasetError(f"{what}: expected {cols} numbers, got shape {arr.shape}")
    return arr


def record_from_dict(obj: dict) -> StructureRecord:
    if not isinstance(obj, dict):
        raise DatasetError("line is not a JSON object")
    for key in ("id", "energy_true", "energy_pred", "atoms"):
        if key not in obj:
            raise DatasetError(f"missing key {key!r}")
    if not isinstance(obj["id"], str):
        raise DatasetError("'id' must be a string")
    atoms = obj["atoms"]
    if not isinstance(atoms, list) or not atoms:
        raise DatasetError("'atoms' must be a nonempty array")
    d_desc = None
    z, desc, ft, fp, ens_f = [], [], [], [], []
    for j, atom in enumerate(atoms, 1):
        for key in ("z", "descriptor", "force_true", "force_pred"):
            if key not in atom:
                raise DatasetError(f"atom {j}: missing key {key!r}")
        if isinstance(atom["z"], bool) or not isinstance(atom["z"], int):
            raise DatasetError(f"atom {j}: 'z' must be an integer")
        d = _as_matrix(atom["descriptor"], None, f"atom {j} descriptor")
        if d.ndim != 1 or d.size == 0:
            raise DatasetError(f"atom {j}: descriptor must be a nonempty flat array")
        if d_desc is None:
            d_desc = d.size
        elif d.size != d_desc:
            raise DatasetError(f"atom {j}: descriptor length {d.size} differs from {d_desc}")
        z.append(atom["z"])
        desc.append(d)
        ft.append(_as_matrix(atom["force_true"], 3, f"atom {j} force_true"))
        fp.append(_as_matrix(atom["force_pred"], 3, f"atom {j} force_pred"))
        if "ensemble_force_preds" in atom:
            member = _as_matrix(atom["ensemble_force_preds"], None, f"atom {j} ensemble_force_preds")
            if member.ndim != 2 or member.shape[1] != 3:
                raise DatasetError(f"atom {j}: ensemble_force_preds must be an array of 3-vectors")
            ens_f.append(member)
    ens_e = None
    ens_forces = None
    if "ensemble_energy_preds" in obj:
        ens_e = _as_matrix(obj["ensemble_energy_preds"], None, "ensemble_energy_preds")
        if ens_e.ndim != 1:
            raise DatasetError("ensemble_energy_preds must be a flat array")
    if ens_f:
        if len(ens_f) != len(atoms):
            raise DatasetError("ensemble_force_preds must be given for every atom or none")
        if len({m.shape[0] for m in ens_f}) != 1:
            raise DatasetError("ensemble_force_preds member count differs between atoms")
        ens_forces = np.stack(ens_f, axis=1)  # (M, n, 3)
    try:
        e_true, e_pred = float(obj["energy_true"]), float(obj["energy_pred"])
    except (TypeError, ValueError) as exc:
        raise DatasetError("energies must be numbers") from exc
    rec = StructureRecord(
        id=obj["id"],
        atomic_numbers=np.asarray(z, dtype=int),
        descriptors=np.stack(desc),
        energy_true=e_true,
        energy_pred=e_pred,
        forces_true=np.stack(ft),
        forces_pred=np.stack(fp),
        ensemble_energy_preds=ens_e,
        ensemble_force_preds=ens_forces,
        split=obj.get("split"),
    )
    rec.validate()
    return rec


def record_to_dict(rec: StructureRecord) -> dict:
    atoms = []
    for j in range(rec.n_atoms):
        atom = {
            "z": int(rec.atomic_numbers[j]),
            "descriptor": rec.descriptors[j].tolist(),
            "force_true": rec.forces_true[j].tolist(),
            "force_pred": rec.forces_pred[j].tolist(),
        }
        if rec.ensemble_force_preds is not None:
            atom["ensemble_force_preds"] = rec.ensemble_force_preds[:, j, :].tolist()
        atoms.append(atom)
    out = {"id": rec.id}
    if rec.split is not None:
        out["split"] = rec.split
    out["energy_true"] = float(rec.energy_true)
    out["energy_pred"] = float(rec.energy_pred)
    if rec.ensemble_energy_preds is not None:
        out["ensemble_energy_preds"] = rec.ensemble_energy_preds.tolist()
    out["atoms"] = atoms
    return out


def check_consistent(records: Sequence[StructureRecord], where: Sequence[int] | None = None) -> None:
    """Cross-record invariants: one d_desc, one ensemble size, unique ids."""
    where = where if where is not None else range(1, len(records) + 1)
    d_desc = m = None
    seen = set()
    for line, rec in zip(where, records):
        if d_desc is None:
            d_desc = rec.d_desc
        elif rec.d_desc != d_desc:
            raise DatasetError(f"line {line}: d_desc {rec.d_desc} differs from {d_desc}")
        rec_m = len(rec.ensemble_energy_preds) if rec.ensemble_energy_preds is not None else 0
        if m is None:
            m = rec_m
        elif rec_m != m:
            raise DatasetError(f"line {line}: ensemble size {rec_m} differs from {m}")
        if rec.id in seen:
            raise DatasetError(f"line {line}: duplicate structure id {rec.id!r}")
        seen.add(rec.id)


def load_dataset(path: str | os.PathLike) -> list[StructureRecord]:
    """Read and validate a JSON Lines dataset. Any violation rejects the whole file."""
    records, lines = [], []
    with open(path, encoding="utf-8") as fh:
        for line_num, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_num}: malformed JSON ({exc.msg})") from exc
            except DatasetError as exc:
                raise DatasetError(f"line {line_num}: {exc}") from exc
            lines.append(line_num)
    check_consistent(records, lines)
    return records


def load_datasets(paths: Iterable[str | os.PathLike]) -> list[StructureRecord]:
    records = []
    for p in paths:
        records.extend(load_dataset(p))
    check_consistent(records)
    return records


def dumps_dataset(records: Iterable[StructureRecord]) -> str:
    # json emits repr() floats, the shortest string that round-trips exactly
    return "".join(json.dumps(record_to_dict(r), allow_nan=False) + "\n" for r in records)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(records: Iterable[StructureRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_dataset(records))


# ----------------------------------------------------------------------------
# residuals and scaling
# ----------------------------------------------------------------------------


def compute_residuals(records: Sequence[StructureRecord]) -> ResidualDataset:
    if not records:
        raise DatasetError("no records")
    out = [
        ResidualRecord(
            structure_id=r.id,
            descriptors=r.descriptors,
            delta_e=r.energy_true - r.energy_pred,
            delta_f=r.forces_true - r.forces_pred,
        )
        for r in records
    ]
    return ResidualDataset(out, records[0].d_desc)


def fit_scaler(train: ResidualDataset | np.ndarray) -> ScalerStats:
    """Population mean/std over every training atom, std floored at EPSILON_STD."""
    x = train.atom_descriptors() if isinstance(train, ResidualDataset) else np.asarray(train, dtype=float)
    if x.shape[0] == 0:
        raise DatasetError("cannot fit a scaler on an empty dataset")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), EPSILON_STD)
    return ScalerStats(mean, std)


def standardize_apply(stats: ScalerStats, descriptors: np.ndarray) -> np.ndarray:
    x = np.asarray(descriptors, dtype=float)
    if x.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"descriptor dimension {x.shape[-1]} does not match scaler ({stats.mean.shape[0]})")
    return (x - stats.mean) / stats.std


def unstandardize(stats: ScalerStats, z: np.ndarray) -> np.ndarray:
    return np.asarray(z, dtype=float) * stats.std + stats.mean


# ----------------------------------------------------------------------------
# uncertainty scores
# ----------------------------------------------------------------------------

STRUCTURE_ROW = -1


@dataclass
class UncertaintyReport:
    """Scores from one scorer, keyed by structure id.

    ``structure`` holds one structure-level score (energy heads, or the aggregated
    per-atom score of descriptor baselines); ``atoms`` holds per-atom scores.
    """

    scorer: str
    structure: dict[str, float] = field(default_factory=dict)
    signed: dict[str, float] = field(default_factory=dict)
    atoms: dict[str, np.ndarray] = field(default_factory=dict)

    def structure_score(self, sid: str, aggregate: str = "mean") -> float:
        """Per-atom scores aggregated when present, else the structure row."""
        if sid in self.atoms:
            return aggregate_scores(self.atoms[sid], aggregate)
        if sid in self.structure:
            return self.structure[sid]
        raise KeyError(sid)

    def covers(self, sid: str) -> bool:
        return sid in self.atoms or sid in self.structure


def aggregate_scores(values: np.ndarray, how: str = "mean") -> float:
    if how == "mean":
        return math.fsum(values) / len(values)
    if how == "max":
        return float(np.max(values))
    raise ValueError(f"unknown aggregation {how!r}")


def _fmt(x: float) -> str:
    return repr(float(x))


def scores_to_csv(report: UncertaintyReport, order: Sequence[str]) -> str:
    """Columns: structure_id, atom_index (-1 = structure level), score, signed_score."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["structure_id", "atom_index", "score", "signed_score"])
    for sid in order:
        if sid in report.structure:
            signed = _fmt(report.signed[sid]) if sid in report.signed else ""
            w.writerow([sid, STRUCTURE_ROW, _fmt(report.structure[sid]), signed])
        if sid in report.atoms:
            for j, s in enumerate(report.atoms[sid]):
                w.writerow([sid, j, _fmt(s), ""])
    return buf.getvalue()


def read_scores_csv(path: str | os.PathLike, scorer: str | None = None) -> UncertaintyReport:
    report = UncertaintyReport(scorer or Path(path).stem)
    atoms: dict[str, list[tuple[int, float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"structure_id", "atom_index", "score", "signed_score"} - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{path}: score file lacks columns {sorted(missing)}")
        for line, row in enumerate(reader, 2):
            try:
                idx = int(row["atom_index"])
                score = float(row["score"])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {line}: {exc}") from exc
            if not math.isfinite(score):
                raise DatasetError(f"{path}: line {line}: non-finite score")
            sid = row["structure_id"]
            if idx == STRUCTURE_ROW:
                report.structure[sid] = score
                if row["signed_score"]:
                    report.signed[sid] = float(row["signed_score"])
            else:
                atoms.setdefault(sid, []).append((idx, score))
    for sid, rows in atoms.items():
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise DatasetError(f"{path}: atom indices for {sid!r} are not 0..n-1")
        report.atoms[sid] = np.array([s for _, s in rows])
    return report
