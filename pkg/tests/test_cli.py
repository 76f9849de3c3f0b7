import csv
import itertools
import json

import numpy as np
import pytest

from inarmix.cli import main
from inarmix.discrimination import apc_bruteforce, pdi_bruteforce
from inarmix.em import MixtureModel, posterior_weights
from inarmix.process import ClassParams, PanelData, SubjectRecord
from inarmix.serialization import (
    DataError,
    ModelDocument,
    SchemaError,
    panel_csv_text,
    read_panel_csv,
    write_labels,
    write_panel_csv,
)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--scenario", "I", "--alpha", "0.1", "--phi", "1.25", "--subjects", "200", "--seed", "7", "--out", str(d / "s.csv")]) == 0
    return d


# ---------------------------------------------------------------------------
# simulate


def test_simulate_rows_and_sidecars(sim_dir):
    rows = list(csv.DictReader(open(sim_dir / "s.csv")))
    assert len(rows) == 1600
    assert list(rows[0]) == ["subject_id", "time", "y", "x1", "x2"]
    truth = ModelDocument.load(sim_dir / "s.csv.truth.json")
    assert truth.C == 4 and truth.design is not None
    labels = list(csv.DictReader(open(sim_dir / "s.csv.labels.csv")))
    assert len(labels) == 200


def test_simulate_deterministic(sim_dir, tmp_path, capsys):
    code, _, _ = run(["simulate", "--scenario", "I", "--alpha", "0.1", "--phi", "1.25", "--subjects", "200", "--seed", "7", "--out", tmp_path / "b.csv"], capsys)
    assert code == 0
    assert (tmp_path / "b.csv").read_bytes() == (sim_dir / "s.csv").read_bytes()
    assert (tmp_path / "b.csv.truth.json").read_bytes() == (sim_dir / "s.csv.truth.json").read_bytes()


def test_simulate_constraint_violation(sim_dir, tmp_path, capsys):
    code, _, err = run(["simulate", "--model", sim_dir / "s.csv.truth.json", "--alpha", "0.99", "--subjects", "10", "--out", tmp_path / "x.csv"], capsys)
    assert code == 3
    assert "ranks (" in err and "subject" in err


def test_simulate_from_model_document(sim_dir, tmp_path, capsys):
    code, out, _ = run(["simulate", "--model", sim_dir / "s.csv.truth.json", "--phi", "2.0", "--subjects", "20", "--seed", "1", "--out", tmp_path / "m.csv"], capsys)
    assert code == 0 and "20 subjects" in out
    doc = ModelDocument.load(tmp_path / "m.csv.truth.json")
    assert all(c.phi == pytest.approx(2.0) for c in doc.to_model().classes)


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--subjects", "10", "--out", "x.csv"],
        ["simulate", "--scenario", "I", "--model", "m.json", "--subjects", "10", "--out", "x.csv"],
        ["simulate", "--scenario", "III", "--subjects", "10", "--out", "x.csv"],
        ["fit", "--data", "x.csv"],
        ["nonsense"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_bad_values_exit_2(sim_dir, tmp_path, capsys):
    assert run(["simulate", "--scenario", "I", "--alpha", "1.5", "--subjects", "5", "--out", tmp_path / "x.csv"], capsys)[0] == 2
    assert run(["fit", "--data", tmp_path / "missing.csv", "--classes", "1", "--out", tmp_path / "m.json"], capsys)[0] == 2
    assert run(["fit", "--data", sim_dir / "s.csv", "--classes", "0", "--out", tmp_path / "m.json"], capsys)[0] == 2


# ---------------------------------------------------------------------------
# fit


def test_fit_single_class(sim_dir, tmp_path, capsys):
    code, out, _ = run(["fit", "--data", sim_dir / "s.csv", "--classes", "1", "--restarts", "2", "--out", tmp_path / "m1.json"], capsys)
    assert code == 0
    assert out.startswith("loglik=") and "converged=true" in out
    doc = ModelDocument.load(tmp_path / "m1.json")
    assert doc.C == 1 and doc.convergence["criterion"] <= 1e-6
    assert set(doc.se) == {"class1.beta0", "class1.beta1", "class1.alpha", "class1.gamma"}


def test_fit_non_convergence_exit_4(sim_dir, tmp_path, capsys):
    code, _, err = run(["fit", "--data", sim_dir / "s.csv", "--classes", "2", "--restarts", "1", "--max-iter", "1", "--out", tmp_path / "m.json"], capsys)
    assert code == 4 and "no restart converged" in err
    assert ModelDocument.load(tmp_path / "m.json").convergence["converged"] is False


def test_fit_equal_weights_match_unweighted(sim_dir, tmp_path, capsys):
    panel = read_panel_csv(sim_dir / "s.csv")
    write_panel_csv(panel.with_weights(np.full(panel.m, 5.0)), tmp_path / "w.csv")
    base = ["--classes", "2", "--restarts", "2", "--seed", "3"]
    assert run(["fit", "--data", tmp_path / "w.csv", *base, "--weights-col", "weight", "--out", tmp_path / "w.json"], capsys)[0] == 0
    assert run(["fit", "--data", sim_dir / "s.csv", *base, "--out", tmp_path / "u.json"], capsys)[0] == 0
    w = ModelDocument.load(tmp_path / "w.json").to_model().to_vector()
    u = ModelDocument.load(tmp_path / "u.json").to_model().to_vector()
    np.testing.assert_allclose(w, u, atol=1e-6)


# ---------------------------------------------------------------------------
# discriminate


def _uniform_model_doc(path):
    th = ClassParams([0.2, 0.1], 0.1, 0.5)
    doc = ModelDocument.from_model(MixtureModel([th] * 4, [0.25] * 4))
    doc.save(path)


def test_discriminate_uniform_rows(sim_dir, tmp_path, capsys):
    _uniform_model_doc(tmp_path / "u.json")
    code, out, _ = run(
        ["discriminate", "--model", tmp_path / "u.json", "--data", sim_dir / "s.csv", "--labels", sim_dir / "s.csv.labels.csv", "--out", tmp_path / "d.csv"],
        capsys,
    )
    assert code == 0
    assert out.splitlines() == ["index  value", "apc    0.5", "pdi    0.25"]
    assert (tmp_path / "d.csv").read_text() == "index,value\napc,0.5\npdi,0.25\n"


def test_discriminate_tiny_fixture_matches_enumeration(tmp_path, capsys):
    ys = [0, 1, 4, 2, 9, 6]
    subs = [SubjectRecord(f"s{i}", [1.0], [y], [[1.0]]) for i, y in enumerate(ys)]
    panel = PanelData(subs)
    write_panel_csv(panel, tmp_path / "t.csv")
    z = [1, 2, 1, 2, 3, 3]
    write_labels(tmp_path / "t.labels.csv", [s.subject_id for s in subs], z)
    model = MixtureModel(
        [ClassParams([np.log(1.0)], 0.0, 0.5), ClassParams([np.log(3.0)], 0.0, 0.8), ClassParams([np.log(7.0)], 0.0, 0.4)],
        [0.3, 0.3, 0.4],
    )
    ModelDocument.from_model(model).save(tmp_path / "t.json")
    code, _, _ = run(["discriminate", "--model", tmp_path / "t.json", "--data", tmp_path / "t.csv", "--labels", tmp_path / "t.labels.csv", "--out", tmp_path / "o.csv"], capsys)
    assert code == 0
    got = {r["index"]: float(r["value"]) for r in csv.DictReader(open(tmp_path / "o.csv"))}
    post = posterior_weights(model, panel)
    assert got["apc"] == pytest.approx(apc_bruteforce(z, post), rel=1e-5)
    assert got["pdi"] == pytest.approx(pdi_bruteforce(z, post), rel=1e-5)


def test_discriminate_with_truth_alignment(sim_dir, tmp_path, capsys):
    truth = ModelDocument.load(sim_dir / "s.csv.truth.json")
    swapped = ModelDocument.from_model(truth.to_model().permute([3, 2, 1, 0]))
    swapped.save(tmp_path / "sw.json")
    args = ["--data", sim_dir / "s.csv", "--labels", sim_dir / "s.csv.labels.csv"]
    _, aligned, _ = run(["discriminate", "--model", tmp_path / "sw.json", "--truth", sim_dir / "s.csv.truth.json", *args], capsys)
    _, direct, _ = run(["discriminate", "--model", sim_dir / "s.csv.truth.json", *args], capsys)
    assert aligned == direct
    assert float(direct.splitlines()[1].split()[1]) > 0.9


def test_discriminate_mismatches_exit_5(sim_dir, tmp_path, capsys):
    labels = tmp_path / "l.csv"
    ids = [r["subject_id"] for r in csv.DictReader(open(sim_dir / "s.csv.labels.csv"))]
    write_labels(labels, ids, [1] * len(ids))
    base = ["--data", sim_dir / "s.csv"]
    assert run(["discriminate", "--model", sim_dir / "s.csv.truth.json", *base, "--labels", labels], capsys)[0] == 5
    one = ModelDocument.from_model(MixtureModel([ClassParams([0.0], 0.1, 0.5)], [1.0]))
    one.save(tmp_path / "p1.json")
    assert run(["discriminate", "--model", tmp_path / "p1.json", *base, "--labels", sim_dir / "s.csv.labels.csv"], capsys)[0] == 5
    write_labels(labels, ids[:-1], [1] * (len(ids) - 1))
    assert run(["discriminate", "--model", sim_dir / "s.csv.truth.json", *base, "--labels", labels], capsys)[0] == 5


def test_malformed_inputs_exit_5(sim_dir, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,time,y,x1\n1,0.25,3,1\n1,0.5,-2,1\n")
    code, _, err = run(["fit", "--data", bad, "--classes", "1", "--out", tmp_path / "m.json"], capsys)
    assert code == 5 and "bad.csv:3:" in err
    (tmp_path / "bad.json").write_text("{\"schema_version\": 99}")
    code, _, _ = run(["diagnose", "--model", tmp_path / "bad.json", "--data", sim_dir / "s.csv", "--out", tmp_path / "d.csv"], capsys)
    assert code == 5


# ---------------------------------------------------------------------------
# study / diagnose


def test_study_command(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"inar": [{"scenario": "I", "phi": 1.25, "alpha": 0.1}], "tasks": ["csi"], "csi": {"m_mc": 200, "reps": 1}}))
    code, out, _ = run(["study", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0 and "1 cells done, 0 failed" in out
    cfg.write_text(json.dumps({"poisson_normal": [{"setting": 1}], "tasks": ["bias"]}))
    assert run(["study", "--config", cfg, "--out", tmp_path / "o2"], capsys)[0] == 1
    cfg.write_text("{not json")
    assert run(["study", "--config", cfg, "--out", tmp_path / "o3"], capsys)[0] == 2


def test_diagnose_command(sim_dir, tmp_path, capsys):
    base = ["diagnose", "--model", sim_dir / "s.csv.truth.json", "--data", sim_dir / "s.csv", "--seed", "4"]
    assert run([*base, "--replicates", "1", "--out", tmp_path / "a.csv"], capsys)[0] == 0
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 4 * (3 + 8)
    assert run([*base, "--replicates", "3", "--out", tmp_path / "b.csv"], capsys)[0] == 0
    assert run([*base, "--replicates", "3", "--out", tmp_path / "c.csv"], capsys)[0] == 0
    assert (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()
    assert run([*base, "--replicates", "0", "--out", tmp_path / "d.csv"], capsys)[0] == 2


# ---------------------------------------------------------------------------
# serialization


def test_panel_csv_round_trip(sim_dir):
    text = (sim_dir / "s.csv").read_text()
    panel = read_panel_csv(None, text=text)
    assert panel_csv_text(panel) == text


def test_panel_csv_errors_are_line_numbered():
    cases = [
        ("subject_id,time,y,x1\n1,0.5,2,1\n1,0.25,2,1\n", 3),
        ("subject_id,time,y,x1\n1,0.5,2.5,1\n", 2),
        ("subject_id,time,y,x1\n1,0.5,2\n", 2),
        ("subject_id,time,y\n1,0.5,2\n", 1),
        ("subject_id,time,y,x1,weight\n1,0.5,2,1,1\n1,0.75,2,1,2\n", 3),
    ]
    for text, line in cases:
        with pytest.raises(DataError) as info:
            read_panel_csv("f.csv", text=text)
        assert info.value.line == line
        assert str(info.value).startswith(f"f.csv:{line}: ")


def test_model_document_round_trip(sim_dir, tmp_path, capsys):
    run(["fit", "--data", sim_dir / "s.csv", "--classes", "2", "--restarts", "1", "--out", tmp_path / "m.json"], capsys)
    text = (tmp_path / "m.json").read_text()
    assert ModelDocument.loads(text).dumps() == text
    doc = json.loads(text)
    assert {"schema_version", "C", "p", "classes", "pi", "se", "loglik", "weighted_bic", "convergence", "provenance"} <= set(doc)
    assert doc["provenance"]["seed"] == 0 and len(doc["provenance"]["data_sha256"]) == 64


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("pi"),
        lambda d: d.update(pi=[0.7, 0.7]),
        lambda d: d.update(C=3),
        lambda d: d["classes"][0].update(alpha=1.2),
    ],
)
def test_model_document_validation(sim_dir, tmp_path, capsys, mutate):
    run(["fit", "--data", sim_dir / "s.csv", "--classes", "2", "--restarts", "1", "--out", tmp_path / "m.json"], capsys)
    doc = json.loads((tmp_path / "m.json").read_text())
    mutate(doc)
    with pytest.raises(SchemaError):
        ModelDocument.loads(json.dumps(doc))
