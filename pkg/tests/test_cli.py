import csv
import json

import pytest

from pdrl.cli import main

SMALL = {"d_desc": 4, "n_train": 30, "n_val": 10, "n_test": 20, "n_ood": 10, "atoms_per_structure": 4}


@pytest.fixture
def data_dir(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "data"
    assert main(["gen", "--seed", "7", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_is_deterministic(tmp_path, data_dir):
    again = tmp_path / "again"
    cfg = tmp_path / "synth.json"
    assert main(["gen", "--seed", "7", "--config", str(cfg), "--out", str(again)]) == 0
    for name in ("train", "val", "test", "ood"):
        assert (data_dir / f"{name}.jsonl").read_bytes() == (again / f"{name}.jsonl").read_bytes()


def test_train_score_eval(tmp_path, data_dir):
    model, scores, report = tmp_path / "m.json", tmp_path / "s.csv", tmp_path / "r.csv"
    assert main(["train", "--head", "f-norm", "--data", str(data_dir / "train.jsonl"),
                 "--val", str(data_dir / "val.jsonl"), "--out", str(model), "--max-epochs", "5"]) == 0
    assert main(["score", "--model", str(model), "--data", str(data_dir / "test.jsonl"), "--out", str(scores)]) == 0
    rows = read_rows(scores)
    assert len(rows) == SMALL["n_test"] * SMALL["atoms_per_structure"]
    assert all(int(r["atom_index"]) >= 0 and r["signed_score"] == "" for r in rows)
    assert main(["eval", "--scores", str(scores), "--data", str(data_dir / "test.jsonl"),
                 "--target", "force", "--out", str(report)]) == 0
    assert {r["metric"] for r in read_rows(report)} == {"spearman", "auc"}
    assert json.loads(report.with_suffix(".json").read_text())[1]["positive_class"] == "high-error"
    hist = json.loads(model.read_text())["history"]
    assert len(hist) == 6 and hist[0][3] == 1e-3


def test_energy_diff_rows_have_signed_scores(tmp_path, data_dir):
    model, scores = tmp_path / "m.json", tmp_path / "s.csv"
    assert main(["train", "--head", "e-diff", "--data", str(data_dir / "train.jsonl"),
                 "--val", str(data_dir / "val.jsonl"), "--out", str(model), "--max-epochs", "3"]) == 0
    assert main(["score", "--model", str(model), "--data", str(data_dir / "test.jsonl"), "--out", str(scores)]) == 0
    rows = read_rows(scores)
    assert len(rows) == SMALL["n_test"]
    assert all(r["atom_index"] == "-1" and abs(float(r["signed_score"])) == float(r["score"]) for r in rows)
    assert main(["eval", "--scores", str(scores), "--data", str(data_dir / "test.jsonl"), "--target", "energy"]) == 0


@pytest.mark.parametrize("method, extra", [("knn", ["--k", "3"]), ("gmm", ["--components", "2"])])
def test_baseline_score_ood(tmp_path, data_dir, method, extra):
    model, scores, report = tmp_path / "b.json", tmp_path / "s.csv", tmp_path / "ood.csv"
    assert main(["baseline", "--method", method, "--data", str(data_dir / "train.jsonl"),
                 "--out", str(model), *extra]) == 0
    data = [str(data_dir / "test.jsonl"), str(data_dir / "ood.jsonl")]
    assert main(["score", "--model", str(model), "--data", *data, "--out", str(scores), "--aggregate", "max"]) == 0
    assert main(["ood", "--scores", str(scores), "--data", *data, "--out", str(report)]) == 0
    tags = {(r["split"], r["metric"]) for r in read_rows(report)}
    assert tags == {("ood:shift", "spearman"), ("ood:shift", "auc"), ("All", "spearman"), ("All", "auc")}


def test_ensemble_score_and_pca(tmp_path, data_dir):
    scores, pca = tmp_path / "e.csv", tmp_path / "pca.csv"
    assert main(["ensemble-score", "--data", str(data_dir / "test.jsonl"), "--out", str(scores)]) == 0
    rows = read_rows(scores)
    assert len(rows) == SMALL["n_test"] * (SMALL["atoms_per_structure"] + 1)
    assert main(["pca", "--data", str(data_dir / "train.jsonl"), str(data_dir / "test.jsonl"),
                 "--scores", str(scores), "--components-pca", "3", "--out", str(pca)]) == 0
    prow = read_rows(pca)
    assert list(prow[0]) == ["set", "structure_id", "atom_index", "pc1", "pc2", "pc3",
                             "force_error_norm", "uncertainty"]
    assert {r["set"] for r in prow} == {"train", "test"}


def test_config_precedence(tmp_path, data_dir):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"head": "f-diff", "max_epochs": 2, "lr": 0.01}))
    model = tmp_path / "m.json"
    assert main(["train", "--config", str(cfg), "--lr", "0.002", "--data", str(data_dir / "train.jsonl"),
                 "--val", str(data_dir / "val.jsonl"), "--out", str(model)]) == 0
    d = json.loads(model.read_text())
    assert d["kind"] == "f-diff" and len(d["history"]) == 3 and d["history"][0][3] == 0.002


def test_exit_codes(tmp_path, data_dir, capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["score", "--model", str(tmp_path / "missing.json"), "--data", "x", "--out", "y"]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["ensemble-score", "--data", str(bad), "--out", str(tmp_path / "o.csv")]) == 1
    assert not (tmp_path / "o.csv").exists()


def test_thread_count_does_not_change_output(tmp_path, data_dir, monkeypatch):
    model = tmp_path / "k.json"
    assert main(["baseline", "--method", "knn", "--data", str(data_dir / "train.jsonl"), "--out", str(model)]) == 0
    outs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("PDRL_THREADS", threads)
        out = tmp_path / f"s{threads}.csv"
        assert main(["score", "--model", str(model), "--data", str(data_dir / "test.jsonl"), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_inputs_not_mutated(tmp_path, data_dir):
    before = {p.name: p.read_bytes() for p in data_dir.iterdir()}
    main(["baseline", "--method", "gmm", "--data", str(data_dir / "train.jsonl"), "--out", str(tmp_path / "g.json")])
    assert before == {p.name: p.read_bytes() for p in data_dir.iterdir()}
