"""Deterministic synthetic descriptor datasets with residuals that grow with novelty.

Construction (all coefficients fixed, see the module constants):

* In-domain atoms: descriptor ``D = c + N(0, CLUSTER_STD^2 I)`` with ``c`` one of two
  centers ``+/- CLUSTER_OFFSET`` along axis 1 (axis 0 when ``d_desc == 1``). The first
  center is picked with probability ``MAJOR_FRACTION`` and labelled z=28, the other z=13.
* OOD atoms: the same mixture displaced by ``ood_shift`` along axis 0.
* ``r`` = distance from ``D`` to the nearest in-domain center.
* Reference energy/forces: ``t(D)`` and ``T(D)`` below (polynomial + sinusoid).
* Per-atom force residual ``dF = m(r) * u(D)`` with ``m(r) = 0.05 + 0.1 r^2 + noise``,
  ``u`` a smooth unit-vector field; per-atom energy residual ``0.01 + 0.02 r^2 + noise``.
  Noise is Uniform[0, noise_scale). The surrogate prediction is reference minus residual.
* Optional ensemble members scatter around the prediction with spread proportional
  to the residual size.

Randomness: one ``numpy.random.SeedSequence(seed)`` spawns four children (train, val,
test, ood); each drives a Philox-4x64 counter-based generator.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .core import StructureRecord, save_dataset

CLUSTER_OFFSET = 3.0
CLUSTER_STD = 1.0
MAJOR_FRACTION = 0.75
Z_MAJOR, Z_MINOR = 28, 13
FORCE_BASE, FORCE_QUAD = 0.05, 0.1
ENERGY_BASE, ENERGY_QUAD = 0.01, 0.02
ENSEMBLE_SPREAD = 0.5

SPLITS = ("train", "val", "test", "ood")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    d_desc: int = 8
    n_train: int = 400
    n_val: int = 100
    n_test: int = 400
    n_ood: int = 200
    atoms_per_structure: int | tuple[int, int] = 8
    ood_shift: float = 5.0
    noise_scale: float = 0.25
    ensemble_size: int = 5

    def __post_init__(self):
        if isinstance(self.atoms_per_structure, list):
            object.__setattr__(self, "atoms_per_structure", tuple(self.atoms_per_structure))
        if self.d_desc < 1:
            raise ValueError("d_desc must be positive")
        if min(self.n_train, self.n_val, self.n_test, self.n_ood) < 1:
            raise ValueError("every split needs at least one structure")
        lo, hi = self.atom_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid atoms_per_structure {self.atoms_per_structure}")
        if self.ood_shift < 0 or self.noise_scale < 0:
            raise ValueError("ood_shift and noise_scale must be nonnegative")
        if self.ensemble_size == 1 or self.ensemble_size < 0:
            raise ValueError("ensemble_size must be 0 (disabled) or at least 2")

    @property
    def atom_range(self) -> tuple[int, int]:
        a = self.atoms_per_structure
        return (a, a) if isinstance(a, int) else (int(a[0]), int(a[1]))

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["atoms_per_structure"], tuple):
            d["atoms_per_structure"] = list(d["atoms_per_structure"])
        return d


def cluster_centers(d_desc: int) -> np.ndarray:
    axis = 1 if d_desc > 1 else 0
    c = np.zeros((2, d_desc))
    c[0, axis], c[1, axis] = CLUSTER_OFFSET, -CLUSTER_OFFSET
    return c


def ood_direction(d_desc: int) -> np.ndarray:
    u = np.zeros(d_desc)
    u[0] = 1.0
    return u


def novelty_distance(descriptors: np.ndarray) -> np.ndarray:
    """Distance of each descriptor row to the nearest in-domain center."""
    c = cluster_centers(descriptors.shape[1])
    d = np.linalg.norm(descriptors[:, None, :] - c[None], axis=2)
    return d.min(axis=1)


def reference_energy(D: np.ndarray) -> np.ndarray:
    k = np.arange(D.shape[1])
    return -4.0 + 0.05 * (D * D).sum(axis=1) + 0.3 * np.sin((1.0 + 0.1 * k) * D).sum(axis=1)


def reference_forces(D: np.ndarray) -> np.ndarray:
    k = np.arange(D.shape[1])
    out = np.empty((len(D), 3))
    for a in range(3):
        alpha = 0.5 * np.cos(1.7 * k + a)
        beta = np.sin(0.9 * k + 2 * a)
        out[:, a] = np.sin(D @ alpha) + 0.1 * (D @ beta)
    return out


def residual_direction(D: np.ndarray) -> np.ndarray:
    gamma = 0.3 * np.cos(np.arange(D.shape[1]))
    phase = D @ gamma
    w = np.stack([1.5 + np.sin(phase), 1.5 + np.cos(phase), np.ones(len(D))], axis=1)
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _generate_split(cfg: SynthConfig, split: str, rng: np.random.Generator) -> list[StructureRecord]:
    n_struct = cfg.split_size(split)
    lo, hi = cfg.atom_range
    counts = rng.integers(lo, hi + 1, size=n_struct) if hi > lo else np.full(n_struct, lo)
    n_atoms = int(counts.sum())
    d = cfg.d_desc

    minor = rng.uniform(size=n_atoms) >= MAJOR_FRACTION
    D = cluster_centers(d)[minor.astype(int)] + CLUSTER_STD * rng.standard_normal((n_atoms, d))
    if split == "ood":
        D = D + cfg.ood_shift * ood_direction(d)
    z = np.where(minor, Z_MINOR, Z_MAJOR)

    r = novelty_distance(D)
    force_mag = FORCE_BASE + FORCE_QUAD * r * r + cfg.noise_scale * rng.uniform(size=n_atoms)
    atom_de = ENERGY_BASE + ENERGY_QUAD * r * r + cfg.noise_scale * rng.uniform(size=n_atoms)
    dF = force_mag[:, None] * residual_direction(D)
    f_true = reference_forces(D)
    f_pred = f_true - dF
    e_atom = reference_energy(D)

    m = cfg.ensemble_size
    if m:
        ens_f_noise = rng.standard_normal((m, n_atoms, 3))
        ens_e_noise = rng.standard_normal((n_struct, m))

    tag = "ood:shift" if split == "ood" else split
    records = []
    start = 0
    for i, n in enumerate(counts):
        sl = slice(start, start + n)
        start += n
        e_true = float(e_atom[sl].sum())
        de = atom_de[sl]
        e_pred = e_true - float(de.sum())
        ens_e = ens_f = None
        if m:
            ens_e = e_pred + ENSEMBLE_SPREAD * float(np.sqrt((de * de).sum())) * ens_e_noise[i]
            ens_f = f_pred[sl][None] + ENSEMBLE_SPREAD * force_mag[sl][None, :, None] * ens_f_noise[:, sl, :]
        records.append(StructureRecord(
            id=f"{split}-{i:05d}",
            atomic_numbers=z[sl].copy(),
            descriptors=D[sl].copy(),
            energy_true=e_true,
            energy_pred=e_pred,
            forces_true=f_true[sl].copy(),
            forces_pred=f_pred[sl].copy(),
            ensemble_energy_preds=ens_e,
            ensemble_force_preds=ens_f,
            split=tag,
        ))
    return records


def generate_synthetic(config: SynthConfig) -> dict[str, list[StructureRecord]]:
    """Four splits keyed ``train``, ``val``, ``test``, ``ood``."""
    children = np.random.SeedSequence(config.seed).spawn(len(SPLITS))
    return {
        split: _generate_split(config, split, np.random.Generator(np.random.Philox(ss)))
        for split, ss in zip(SPLITS, children)
    }


def write_synthetic(config: SynthConfig, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    paths = {}
    for split, records in generate_synthetic(config).items():
        paths[split] = outdir / f"{split}.jsonl"
        save_dataset(records, paths[split])
    return paths
