import numpy as np
import pytest

from pdrl.core import compute_residuals, dumps_dataset
from pdrl.evaluation import spearman
from pdrl.synthdata import (SynthConfig, cluster_centers, generate_synthetic, novelty_distance,
                            ood_direction, residual_direction)


def test_same_seed_bitwise_identical():
    cfg = SynthConfig(seed=11, n_train=20, n_val=5, n_test=10, n_ood=10)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for split in a:
        assert dumps_dataset(a[split]) == dumps_dataset(b[split])


def test_different_seed_differs():
    a = generate_synthetic(SynthConfig(seed=1, n_train=5, n_val=2, n_test=2, n_ood=2))
    b = generate_synthetic(SynthConfig(seed=2, n_train=5, n_val=2, n_test=2, n_ood=2))
    assert dumps_dataset(a["train"]) != dumps_dataset(b["train"])


def test_split_sizes_match_rmd17_counts():
    cfg = SynthConfig(seed=0, n_train=800, n_val=200, n_test=1000, n_ood=10, atoms_per_structure=2,
                      ensemble_size=0)
    data = generate_synthetic(cfg)
    assert [len(data[s]) for s in ("train", "val", "test")] == [800, 200, 1000]
    assert {r.split for r in data["ood"]} == {"ood:shift"}
    assert {r.split for r in data["val"]} == {"val"}


def test_atom_count_range(small_synth):
    counts = {r.n_atoms for split in small_synth.values() for r in split}
    assert counts <= set(range(3, 7)) and len(counts) > 1


def test_ood_errors_exceed_test_errors():
    data = generate_synthetic(SynthConfig(seed=0, noise_scale=0.0, ood_shift=5.0))
    mean_norm = {s: np.linalg.norm(compute_residuals(data[s]).atom_delta_f(), axis=1).mean()
                 for s in ("test", "ood")}
    assert mean_norm["ood"] > mean_norm["test"]


@pytest.mark.parametrize("split", ["train", "test", "ood"])
def test_noise_free_force_error_is_monotone_in_novelty(split):
    data = generate_synthetic(SynthConfig(seed=5, noise_scale=0.0))
    res = compute_residuals(data[split])
    norms = np.linalg.norm(res.atom_delta_f(), axis=1)
    assert spearman(norms, novelty_distance(res.atom_descriptors())) == 1.0


def test_ood_centroid_shift():
    cfg = SynthConfig(seed=9, n_ood=100, ood_shift=5.0)  # 800 OOD atoms
    data = generate_synthetic(cfg)
    c_train = compute_residuals(data["train"]).atom_descriptors().mean(axis=0)
    c_ood = compute_residuals(data["ood"]).atom_descriptors().mean(axis=0)
    assert abs(np.linalg.norm(c_ood - c_train) - 5.0) <= 0.5


def test_fixed_geometry():
    c = cluster_centers(4)
    np.testing.assert_array_equal(c, [[0, 3, 0, 0], [0, -3, 0, 0]])
    assert ood_direction(4).tolist() == [1, 0, 0, 0]
    d = np.random.default_rng(0).standard_normal((50, 4))
    np.testing.assert_allclose(np.linalg.norm(residual_direction(d), axis=1), 1.0)


def test_ensemble_fields(small_synth):
    rec = small_synth["test"][0]
    assert rec.ensemble_energy_preds.shape == (5,)
    assert rec.ensemble_force_preds.shape == (5, rec.n_atoms, 3)


def test_invalid_config():
    with pytest.raises(ValueError):
        SynthConfig(n_val=0)
    with pytest.raises(ValueError):
        SynthConfig(atoms_per_structure=(5, 2))
    with pytest.raises(ValueError):
        SynthConfig(ensemble_size=1)
