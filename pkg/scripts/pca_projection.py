"""Project synthetic train/test/ood atoms onto the training PCA axes and write a CSV.

The CSV carries force-error norms and a kNN uncertainty column, ready for plotting.
"""

import argparse

from pdrl import baselines, evaluation
from pdrl.core import atomic_write_text, compute_residuals
from pdrl.synthdata import SynthConfig, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ood-shift", type=float, default=SynthConfig.ood_shift)
    ap.add_argument("--out", default="pca.csv")
    args = ap.parse_args()

    data = generate_synthetic(SynthConfig(seed=args.seed, ood_shift=args.ood_shift))
    train = compute_residuals(data["train"])
    knn = baselines.knn_fit(train)
    scores = baselines.score_records(knn, data["train"] + data["test"] + data["ood"])
    others = [(name, compute_residuals(data[name])) for name in ("test", "ood")]
    model, table = evaluation.pca_project(train, others, 2, scores)
    atomic_write_text(args.out, table.to_csv())
    ratio = model.eigenvalues[:2] / model.eigenvalues.sum()
    print(f"wrote {args.out}; explained variance {ratio[0]:.3f}, {ratio[1]:.3f}")


if __name__ == "__main__":
    main()
