import numpy as np
import pytest
from hypothesis import settings

from pdrl.core import StructureRecord
from pdrl.synthdata import SynthConfig, generate_synthetic

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def make_record(rng, n=3, d=4, sid="s0", ensemble=0, split=None):
    rec = StructureRecord(
        id=sid,
        atomic_numbers=rng.integers(1, 30, size=n),
        descriptors=rng.standard_normal((n, d)),
        energy_true=float(rng.standard_normal()),
        energy_pred=float(rng.standard_normal()),
        forces_true=rng.standard_normal((n, 3)),
        forces_pred=rng.standard_normal((n, 3)),
        split=split,
    )
    if ensemble:
        rec.ensemble_energy_preds = rng.standard_normal(ensemble)
        rec.ensemble_force_preds = rng.standard_normal((ensemble, n, 3))
    return rec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(seed=3, d_desc=4, n_train=40, n_val=10, n_test=30, n_ood=20,
                      atoms_per_structure=(3, 6))
    return generate_synthetic(cfg)
