"""Post-hoc descriptor-based residual learning for MLIP uncertainty, with baselines and evaluation."""

from .core import (DatasetError, ResidualDataset, ScalerStats, StructureRecord, UncertaintyReport,
                   compute_residuals, fit_scaler, load_dataset, save_dataset, standardize_apply)
from .heads import HeadKind, PdrlModel, score_energy, score_forces, train_pdrl
from .synthdata import SynthConfig, generate_synthetic

__version__ = "0.1.0"
