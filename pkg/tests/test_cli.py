import csv
import json

import pytest

from iptm.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main

SMALL = {
    "corridor": {
        "intersections": [
            {"position": 250.0, "cycle": 100.0, "green_start": 0.0, "green_duration": 55.0},
            {"position": 520.0, "cycle": 100.0, "green_start": 30.0, "green_duration": 55.0},
        ],
        "length": 800.0,
        "n_background": 40,
        "n_ego": 1,
        "bin_horizon": 300.0,
    },
}


def _cfg(tmp_path, **scenario):
    doc = dict(SMALL, scenario=scenario) if scenario else SMALL
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    cfg = _cfg(root)
    assert main(["--config", cfg, "--out", str(root / "gen"), "--seed", "3", "generate", "--count", "12"]) == EXIT_OK
    return root, cfg


def test_generate(generated):
    root, _ = generated
    traces = sorted((root / "gen" / "traces").glob("*.csv"))
    assert len(traces) == 12
    assert traces[0].read_text().splitlines()[0] == "t_sec,v_mps,x_m"
    rows = list(csv.DictReader(open(root / "gen" / "vehicles.csv")))
    assert len(rows) == 12 and all(1 <= int(r["bin"]) <= 10 for r in rows)


def test_classify_and_aggregate(generated, capsys):
    root, cfg = generated
    tdir = str(root / "gen" / "traces")
    assert main(["--config", cfg, "--out", str(root / "cls"), "classify", tdir]) == EXIT_OK
    rows = list(csv.DictReader(open(root / "cls" / "classification.csv")))
    assert len(rows) == 12
    assert main(["--config", cfg, "--out", str(root / "agg"), "aggregate", tdir]) == EXIT_OK
    head = (root / "agg" / "bins.csv").read_text().splitlines()[0]
    assert head == "bin,t_sec,mean_mps,std_mps,count"


def test_plan_eco(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["--config", cfg, "--out", str(tmp_path / "eco"), "plan-eco", "--depart", "20"]) == EXIT_OK
    info = json.loads((tmp_path / "eco" / "eco_plan.json").read_text())
    assert len(info["crossings_s"]) == 2 and info["arrive_s"] > 20


def test_plan_eco_infeasible(tmp_path):
    cfg = _cfg(tmp_path)
    rc = main(["--config", cfg, "--out", str(tmp_path / "eco"), "plan-eco", "--depart", "0", "--horizon", "30"])
    assert rc == EXIT_INFEASIBLE


def test_simulate_and_compare(tmp_path, capsys):
    a = _cfg(tmp_path, scenario="I", case="A")
    assert main(["--config", a, "--out", str(tmp_path / "a"), "simulate"]) == EXIT_OK
    b = tmp_path / "b.json"
    b.write_text(json.dumps(dict(SMALL, scenario={"scenario": "I", "case": "B"})))
    assert main(["--config", str(b), "--out", str(tmp_path / "b"), "simulate"]) == EXIT_OK
    for f in ("trajectory.csv", "metrics.json", "timing.json"):
        assert (tmp_path / "b" / f).exists()
    rc = main(["--out", str(tmp_path / "cmp"), "compare", f"rule={tmp_path / 'a'}", f"mpc={tmp_path / 'b'}"])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "cmp" / "comparison.csv")))
    assert [r["case"] for r in rows] == ["rule", "mpc"]


def test_simulate_with_trace_file(generated, tmp_path):
    root, cfg = generated
    trace = sorted((root / "gen" / "traces").glob("*.csv"))[0]
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "simulate", "--trace", str(trace)]) == EXIT_OK


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": {"case": "Z"}}))
    assert main(["--config", str(bad), "--out", str(tmp_path), "plan-eco", "--depart", "0"]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "none.json"), "--out", str(tmp_path), "generate"]) == EXIT_CONFIG
    assert main(["--out", str(tmp_path), "compare", str(tmp_path / "x.json"), str(tmp_path / "y.json")]) == EXIT_CONFIG


def test_bad_trace_is_config_error(tmp_path):
    t = tmp_path / "t.csv"
    t.write_text("t_sec,v_mps\n0,1\n0,2\n")
    assert main(["--out", str(tmp_path / "o"), "classify", str(t)]) == EXIT_CONFIG


def test_infeasible_simulation(tmp_path):
    t = tmp_path / "t.csv"
    t.write_text("t_sec,v_mps\n" + "".join(f"{k},{8.0 * k}\n" for k in range(6)))
    rc = main(["--out", str(tmp_path / "o"), "simulate", "--trace", str(t)])
    assert rc == EXIT_INFEASIBLE
    assert (tmp_path / "o" / "trajectory.csv").exists()
