import csv
import io
import json

import numpy as np
import pytest

from multigoal.cli import InputError, ingest_csv, main, synthetic_saipe, write_dataset_csv


@pytest.fixture
def synth_csv(tmp_path):
    path = tmp_path / "synth.csv"
    assert main(["synth", "--seed", "7", "--output", str(path)]) == 0
    return path


@pytest.fixture
def balanced_csv(tmp_path):
    g = np.random.default_rng(0)
    lines = ["area_id,y,D,x1"] + [f"a{k},{g.normal(scale=1.4)!r},1.0,1" for k in range(12)]
    path = tmp_path / "bal.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def _write(tmp_path, text, name="in.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ingestion -----------------------------------------------------------------

def test_synthetic_file_parses(synth_csv):
    d = ingest_csv(synth_csv)
    assert d.m == 51 and d.p == 4
    assert d.area_ids[0] == "01"
    assert synth_csv.read_text().splitlines()[0] == "area_id,y,D,x1,x2,x3,x4"


def test_round_trip_preserves_floats(tmp_path):
    d = synthetic_saipe(3, m=10)
    p = _write(tmp_path, write_dataset_csv(d))
    back = ingest_csv(p)
    assert np.array_equal(back.y, d.y) and np.array_equal(back.D, d.D) and np.array_equal(back.X, d.X)


@pytest.mark.parametrize("text,fragment,line", [
    ("", "no data rows", None),
    ("area_id,y,D,x1\n", "no data rows", None),
    ("area_id,y,D,x1\na,1,1,1\nb,,1,1\n", "column y", 3),
    ("area_id,y,D,x1\na,1,0,1\n", "must be positive", 2),
    ("area_id,y,D,x1\na,1,1,1\nb,1,2,1\na,3,1,1\n", "duplicate area_id", 4),
    ("area,y,D,x1\na,1,1,1\n", "header", 1),
    ("area_id,y,D,x1\na,1,1\n", "expected 4 fields", 2),
    ("area_id,y,D,x1\na,nan,1,1\n", "non-finite", 2),
])
def test_ingest_errors(tmp_path, text, fragment, line):
    with pytest.raises(InputError, match=fragment) as exc:
        ingest_csv(_write(tmp_path, text))
    assert exc.value.line == line


def test_multigoal_warns_on_small_m(tmp_path):
    p = _write(tmp_path, "area_id,y,D,x1\na,1,1,1\nb,2,1,1\nc,0,2,1\n")
    with pytest.warns(UserWarning):
        ingest_csv(p, "mg")


# commands ----------------------------------------------------------------

def test_error_records_and_exit_codes(tmp_path, capsys):
    code, out, err = _run(capsys, ["fit", "--input", str(_write(tmp_path, ""))])
    assert code == 2 and out == ""
    rec = json.loads(err)
    assert rec["error"]["type"] == "InputError" and rec["schema_version"] == "1"
    code, _, err = _run(capsys, ["fit", "--input", str(_write(tmp_path, "area_id,y,D,x1\na,1,1,1\nb,,1,1\n"))])
    assert code == 2 and json.loads(err)["error"]["line"] == 3
    code, _, err = _run(capsys, ["bootstrap", "--input", "x.csv"])
    assert code == 2 and "seed" in json.loads(err)["error"]["message"]
    code, _, _ = _run(capsys, ["fit", "--input", str(tmp_path / "missing.csv")])
    assert code == 1
    code, _, _ = _run(capsys, ["no-such-command"])
    assert code == 2


def test_fit_report(synth_csv, capsys):
    code, out, _ = _run(capsys, ["fit", "--input", str(synth_csv)])
    assert code == 0
    rep = json.loads(out)
    assert rep["schema_version"] == "1" and rep["command"] == "fit"
    assert len(rep["results"]) == 51
    assert all(0 < r["B_hat"] < 1 for r in rep["results"])


def test_fit_null_components_at_zero(tmp_path, capsys):
    p = _write(tmp_path, "area_id,y,D,x1\n" + "".join(f"a{k},{v},2.0,1\n" for k, v in enumerate([0.1, -0.1, 0.05, 0, 0.02])))
    code, out, _ = _run(capsys, ["fit", "--input", str(p), "--method", "reml"])
    rows = json.loads(out)["results"]
    assert code == 0 and rows[0]["A_hat"] == 0.0 and rows[0]["g1"] is None


def test_bayes_balanced_mg_equals_flat(balanced_csv, capsys):
    code, out, _ = _run(capsys, ["bayes", "--input", str(balanced_csv)])
    assert code == 0
    rows = json.loads(out)["results"]
    mg = {r["area_id"]: r for r in rows if r["prior"] == "mg"}
    flat = {r["area_id"]: r for r in rows if r["prior"] == "flat"}
    assert mg.keys() == flat.keys() and len(mg) == 12
    for k in mg:
        assert mg[k]["e_b"] == pytest.approx(flat[k]["e_b"], rel=1e-8)


def test_bootstrap_default_replicates(balanced_csv, capsys):
    code, out, _ = _run(capsys, ["bootstrap", "--input", str(balanced_csv), "--seed", "1"])
    assert code == 0
    rep = json.loads(out)
    assert rep["config"]["replicates"] == 10_000 and rep["seed"] == 1


def test_csv_and_json_carry_identical_values(balanced_csv, capsys):
    _, js, _ = _run(capsys, ["fit", "--input", str(balanced_csv)])
    _, cs, _ = _run(capsys, ["fit", "--input", str(balanced_csv), "--format", "csv"])
    lines = cs.splitlines()
    assert lines[0] == "# schema_version: 1" and lines[1] == "# command: fit"
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[3:]))))
    for a, b in zip(json.loads(js)["results"], rows):
        assert a["area_id"] == b["area_id"]
        assert float(b["A_hat"]) == a["A_hat"] and float(b["theta_hat"]) == a["theta_hat"]


def test_reports_are_byte_identical_across_runs_and_threads(synth_csv, tmp_path):
    outs = []
    for jobs in ("1", "1", "2"):
        o = tmp_path / f"boot{len(outs)}.json"
        assert main(["bootstrap", "--input", str(synth_csv), "--seed", "5", "--replicates", "300",
                     "--n-jobs", jobs, "--output", str(o)]) == 0
        outs.append(o.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_synth_is_seeded(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    main(["synth", "--seed", "1", "--output", str(a)])
    main(["synth", "--seed", "1", "--output", str(b)])
    main(["synth", "--seed", "2", "--output", str(c)])
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    assert main(["synth"]) == 2


def test_tables(synth_csv, capsys):
    code, out, _ = _run(capsys, ["tables", "--input", str(synth_csv), "--seed", "3", "--replicates", "50"])
    assert code == 0
    rep = json.loads(out)
    t1 = rep["table_1"]
    assert len(t1) == 51 and len(rep["table_2"]) == 51
    mgf = [r["MGF"] for r in t1]
    assert mgf == sorted(mgf, reverse=True)
    assert rep["config"]["shp_stand_in"] == "flat"


def test_simulate_command(tmp_path, capsys):
    cfg = {"study": "theorem1", "simulation": {"m": 25, "replications": 30, "seed": 2}, "m_ladder": [25, 50]}
    p = _write(tmp_path, json.dumps(cfg), "sim.json")
    code, out, _ = _run(capsys, ["simulate", "--config", str(p)])
    assert code == 0
    rep = json.loads(out)
    assert rep["config"]["simulation"]["seed"] == 2 and rep["seed"] == 2
    p2 = _write(tmp_path, json.dumps({"study": "theorem1", "simulation": {"m": 25}}), "noseed.json")
    code, _, err = _run(capsys, ["simulate", "--config", str(p2)])
    assert code == 2 and "seed" in err
    p3 = _write(tmp_path, "{not json", "bad.json")
    assert _run(capsys, ["simulate", "--config", str(p3)])[0] == 2


def test_nerm_grad_command(capsys):
    code, out, _ = _run(capsys, ["nerm-grad", "--n", "2,3,5", "--sigma-v2", "1", "--sigma-e2", "1",
                                 "--area-index", "1", "--k", "1,0"])
    assert code == 0
    rep = json.loads(out)
    assert rep["command"] == "nerm-grad"
    code, _, err = _run(capsys, ["nerm-grad", "--n", "1,1,1", "--sigma-v2", "1", "--sigma-e2", "1", "--k", "1,0"])
    assert code == 1 and "DegenerateDesignError" in err
