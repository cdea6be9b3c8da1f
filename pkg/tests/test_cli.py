import json
import math
import subprocess
import sys

import pytest

from poisson_control import cli


def run(args, tmp_path=None, name="out.csv"):
    out = None
    if tmp_path is not None:
        out = str(tmp_path / name)
        args = args + ["--out", out]
    code = cli.main(args)
    return code, out


def rows_by(rows, key):
    return {r[key]: r for r in rows}


def test_solve_single_speed_empty_state(tmp_path):
    args = "solve --variant finite --smax 1 --lambda 1 --mu 2 --nu 1".split()
    code, out = run(args + ["--format", "json"], tmp_path, "o.json")
    assert code == 0
    meta, rows = cli.read_report(out)
    assert meta["variant"] == "finite" and meta["lam"] == 1.0
    pi00 = [r for r in rows if r["quantity"] == "pi" and r["index1"] == 0 and r["index2"] == 0]
    assert pi00[0]["value"] == pytest.approx(1 / 6, abs=1e-12)
    # the CSV form carries 10 significant digits
    code, out = run(args, tmp_path)
    _, rows = cli.read_report(out)
    pi00 = [r for r in rows if r["quantity"] == "pi" and r["index1"] == "0" and r["index2"] == "0"]
    assert pi00[0]["value"] == "0.1666666667"


def test_solve_infinite_equal_means(tmp_path):
    code, out = run("solve --variant infinite --lambda 1 --mu 1 --nu 1 --format json".split(),
                    tmp_path, "o.json")
    assert code == 0
    _, rows = cli.read_report(out)
    q = rows_by([r for r in rows if r["index1"] is None], "quantity")
    assert q["EQ"]["value"] == pytest.approx(q["ES"]["value"], rel=1e-9)


def test_solve_mminf_pgf_on_the_x_axis(tmp_path):
    code, out = run("solve --variant observer-mminf --lambda 1 --mu 1 --nu 1 --format json".split(),
                    tmp_path, "o.json")
    assert code == 0
    _, rows = cli.read_report(out)
    for r in rows:
        if r["quantity"] == "pgf" and r["index2"] == 1.0:
            assert r["value"] == pytest.approx(math.exp(r["index1"] - 1), rel=1e-13)


def test_csv_and_json_carry_the_same_numbers(tmp_path):
    base = "solve --variant finite --smax 3 --lambda 1.7 --mu 1 --nu 0.4".split()
    run(base + ["--format", "csv"], tmp_path, "a.csv")
    run(base + ["--format", "json"], tmp_path, "a.json")
    _, csv_rows = cli.read_report(str(tmp_path / "a.csv"))
    _, json_rows = cli.read_report(str(tmp_path / "a.json"))
    assert len(csv_rows) == len(json_rows)
    for c, j in zip(csv_rows, json_rows):
        assert c["quantity"] == j["quantity"]
        assert float(c["value"]) == float(format(j["value"], ".10g"))


def test_every_file_records_the_run_spec(tmp_path):
    code, out = run("sweep --nu-list 0.5,2 --seed 9 --tol 1e-11".split(), tmp_path)
    assert code == 0
    meta, _ = cli.read_report(out)
    for key in ("subcommand", "variant", "lam", "mu", "nu", "smax", "tol", "seed", "nu_list"):
        assert key in meta
    assert meta["seed"] == "9" and meta["tol"] == "1e-11"


def test_run_spec_round_trip():
    spec = cli.spec_from_args("simulate --variant observer-mm1 --mu 2 --seed 3 --horizon 100".split())
    again = cli.RunSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec
    with pytest.raises(Exception):
        cli.RunSpec.from_dict({"subcommand": "solve", "colour": "red"})


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nlambda = 0.5\nnu=3\nsmax=4\n", encoding="utf-8")
    spec = cli.spec_from_args(["solve", "--config", str(cfg), "--nu", "7"])
    assert spec.lam == 0.5 and spec.smax == 4
    assert spec.nu == 7.0  # flag beats config file
    assert spec.mu == 1.0  # default
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=red\n", encoding="utf-8")
    assert cli.main(["solve", "--config", str(bad)]) == cli.EXIT_INVALID


def test_exit_codes(tmp_path):
    assert cli.main("solve --nu -1".split()) == cli.EXIT_INVALID
    assert cli.main("solve --variant finite --smax 1 --lambda 2".split()) == cli.EXIT_INVALID
    assert cli.main("validate --variant finite --qmax 5".split()) == cli.EXIT_NUMERICAL
    assert cli.main(["solve", "--out", str(tmp_path / "missing" / "x.csv")]) == cli.EXIT_IO
    assert cli.main(["solve", "--config", str(tmp_path / "nope.cfg")]) == cli.EXIT_IO
    assert cli.main("sweep --variant infinite --nu-list 1".split()) == cli.EXIT_INVALID
    assert cli.main("sweep --nu-range 1:2".split()) == cli.EXIT_INVALID
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve", "--variant", "tandem"])
    assert exc.value.code == 2


def test_validation_failure_exit(monkeypatch, tmp_path):
    def failing(spec):
        return cli.Report(("check", "deviation", "tolerance", "passed"), [("forced", 1.0, 0.0, False)])
    monkeypatch.setitem(cli.COMMANDS, "validate", failing)
    assert cli.main(["validate", "--out", str(tmp_path / "v.csv")]) == cli.EXIT_VALIDATION


@pytest.mark.parametrize("variant", ["infinite", "finite", "observer-mminf"])
def test_validate_passes(variant, tmp_path):
    code, out = run(["validate", "--variant", variant], tmp_path)
    assert code == 0
    _, rows = cli.read_report(out)
    assert all(r["passed"] == "true" for r in rows)


def test_validate_mm1_residual(tmp_path):
    code, out = run("validate --variant observer-mm1 --mu 2".split(), tmp_path)
    assert code == 0
    _, rows = cli.read_report(out)
    r = rows_by(rows, "check")
    assert float(r["functional_equation"]["deviation"]) < 1e-9


def test_validate_with_simulation(tmp_path):
    code, out = run("validate --variant finite --simulate --horizon 50000".split(), tmp_path)
    assert code == 0
    _, rows = cli.read_report(out)
    assert "simulated_EQ_within_ci" in rows_by(rows, "check")


def test_sweep_schema_and_shape(tmp_path):
    code, out = run("sweep --smax 2 --mu 1 --lambda 1 --nu-list 0.1,1,10,100 --workers 2".split(),
                    tmp_path)
    assert code == 0
    with open(out, encoding="utf-8") as fh:
        header = [ln for ln in fh.read().splitlines() if not ln.startswith("#")][0]
    assert header == "nu,EQ,ES,EQ_err,ES_err"
    _, rows = cli.read_report(out)
    eq = [float(r["EQ"]) for r in rows]
    es = [float(r["ES"]) for r in rows]
    assert all(a > b for a, b in zip(eq, eq[1:]))
    assert all(a > b for a, b in zip(es, es[1:]))
    assert max(float(r["EQ_err"]) for r in rows) < 1e-9


def test_nu_range_is_log_spaced():
    vals = cli.parse_nu_range("0.1:100:4")
    assert vals == pytest.approx([0.1, 1.0, 10.0, 100.0])


def test_simulate_same_seed_same_file(tmp_path):
    args = "simulate --variant observer-mm1 --mu 2 --horizon 20000 --seed 5".split()
    run(args, tmp_path, "a.csv")
    run(args, tmp_path, "b.csv")
    def body(name):
        return [ln for ln in (tmp_path / name).read_text(encoding="utf-8").splitlines()
                if not ln.startswith("# out=")]
    assert body("a.csv") == body("b.csv")


def test_simulate_single_speed_against_closed_form(tmp_path):
    code, out = run("simulate --variant finite --smax 1 --mu 2 --horizon 100000".split(), tmp_path)
    assert code == 0
    _, rows = cli.read_report(out)
    r = rows_by(rows, "name")["EQ"]
    assert abs(float(r["point"]) - float(r["reference"])) <= float(r["half_width"])


def test_simulate_replications(tmp_path):
    code, out = run("simulate --variant observer-mminf --horizon 5000 --replications 3 --workers 3".split(),
                    tmp_path)
    assert code == 0
    _, rows = cli.read_report(out)
    assert [r["name"] for r in rows if r["name"].startswith("EQ")] == ["EQ[0]", "EQ[1]", "EQ[2]"]


def test_conjecture_probe_axis_fractions(tmp_path):
    code, out = run("simulate --probe conjecture --nu 0.001".split(), tmp_path)
    assert code == 0
    meta, rows = cli.read_report(out)
    assert meta["variant"] == "infinite"
    r = rows_by(rows, "name")
    for name in ("q_axis_fraction", "s_axis_fraction"):
        assert abs(float(r[name]["point"]) - 0.5) < 0.05


def test_fluid_probe_report(tmp_path):
    code, out = run("simulate --variant finite --smax 1 --lambda 0.5 --nu 0.001 --probe fluid".split(),
                    tmp_path)
    assert code == 0
    _, rows = cli.read_report(out)
    r = rows_by(rows, "name")
    assert abs(float(r["fluid_stable"]["point"]) - 0.25) < 0.03
    assert float(r["drain_time_0"]["reference"]) == 1.0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "poisson_control", "solve", "--variant", "observer-mm1",
                           "--mu", "2"], capture_output=True, text=True, check=True)
    lines = proc.stdout.splitlines()
    assert lines[0].startswith("# subcommand=solve")
    assert "quantity,index1,index2,value" in lines
