import csv
import json

import pytest

from ldr_expand.cli import main

from helpers import bundled_doc


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_plan_det_writes_outputs(tmp_path):
    out = tmp_path / "det"
    assert main(["plan", "det", "micro3", "--out", str(out)]) == 0
    for name in ("policy.json", "cost.csv", "investments.csv", "sensitivity.csv", "manifest.json"):
        assert (out / name).exists()
    cost = _rows(out / "cost.csv")
    assert cost[0][:2] == ["plan", "investment"]
    assert float(cost[1][cost[0].index("total")]) == pytest.approx(5882.904021757233, rel=1e-6)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "plan"
    assert manifest["instance"] == "micro3"
    assert len(manifest["instance_sha256"]) == 64
    assert "cost.csv" in manifest["outputs"]


def test_plan_ldr_policy_round_trip(tmp_path):
    from ldr_expand.ldr import policy_from_dict
    from ldr_expand.structure import build_structure
    from ldr_expand.instances import load_instance

    out = tmp_path / "ldr"
    assert main(["plan", "ldr", "micro3", "--out", str(out)]) == 0
    inst = load_instance("micro3")
    st = build_structure(inst.system, inst.uncertainty)
    pol = policy_from_dict(json.loads((out / "policy.json").read_text()), st)
    total = float(_rows(out / "cost.csv")[1][4])
    assert pol.objective == pytest.approx(total, rel=1e-9)


def test_gap_table_shape(tmp_path):
    out = tmp_path / "gap"
    assert main(["gap", "micro3", "--eps", "0.1", "--sigma2", "0.05", "--out", str(out)]) == 0
    table = _rows(out / "gap.csv")
    assert [r[0] for r in table] == ["quantity", "primal", "dual", "absolute", "percent"]
    assert len(table[0]) == 3
    for col in (1, 2):
        primal, dual = float(table[1][col]), float(table[2][col])
        assert float(table[3][col]) == pytest.approx(primal - dual)
        assert primal >= dual - 1e-6 * primal


def test_report_without_runs(tmp_path, capsys):
    code = main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "rep")])
    assert code == 6
    err = _error(capsys)
    assert err["error"] == "NOTHING_TO_REPORT"
    assert set(err) == {"error", "message", "details"}


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["plan", "det", "micro3", "--bogus"]) == 2
    assert _error(capsys)["error"] == "USAGE"


def test_invalid_instance(tmp_path, capsys):
    doc = bundled_doc("micro3")
    del doc["system"]["hours"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["plan", "det", str(path), "--out", str(tmp_path / "o")]) == 3
    err = _error(capsys)
    assert err["error"] == "INVALID_INSTANCE"
    assert any("system.hours" in d for d in err["details"])


def test_missing_instance(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["plan", "det", str(tmp_path / "nope.json"), "--out", str(out)]) == 3
    assert _error(capsys)["error"] == "INVALID_INSTANCE"
    assert not out.exists()


def test_worstcase_rejects_uncertain_prices(tmp_path, capsys):
    doc = bundled_doc("desk4_reduced")
    for row in doc["uncertainty"]["factors"]["capex_generation"][1]:
        row[1] = 0.05
    path = tmp_path / "prices.json"
    path.write_text(json.dumps(doc))
    assert main(["worstcase", str(path), "--out", str(tmp_path / "wc")]) == 5
    assert _error(capsys)["error"] == "UNSUPPORTED_UNCERTAINTY"


def test_worstcase_table(tmp_path):
    out = tmp_path / "wc"
    args = ["worstcase", "desk4_reduced", "--budget", "60", "--restarts", "0", "--scenarios", "5", "--seed", "3"]
    assert main(args + ["--out", str(out)]) == 0
    table = _rows(out / "worstcase.csv")
    assert table[0] == ["coordinate", "std", "min", "max", "scenario", "at_min", "at_max"]
    assert len(table) == 5
    for r in table[1:]:
        assert float(r[2]) <= float(r[4]) <= float(r[3])


def test_reruns_are_byte_identical(tmp_path):
    args = ["evaluate", "micro3", "--samples", "40", "--seed", "11", "--dist", "normal", "laplace"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    names = sorted(p.name for p in a.glob("*.csv"))
    assert names == ["emissions.csv", "report.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_is_recorded_when_drawn(tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "micro3", "--samples", "10", "--plans", "det", "--out", str(out)]) == 0
    seed = json.loads((out / "manifest.json").read_text())["seed"]
    assert isinstance(seed, int)
    # the recorded seed reproduces the run
    again = tmp_path / "ev2"
    assert main(["evaluate", "micro3", "--samples", "10", "--plans", "det", "--seed", str(seed), "--out", str(again)]) == 0
    assert (out / "report.csv").read_bytes() == (again / "report.csv").read_bytes()


def test_report_renders_figures(tmp_path):
    det, ev = tmp_path / "det", tmp_path / "ev"
    assert main(["plan", "det", "micro3", "--out", str(det)]) == 0
    assert main(["evaluate", "micro3", "--samples", "30", "--seed", "2", "--plans", "det", "dro", "--out", str(ev)]) == 0
    rep = tmp_path / "rep"
    assert main(["report", str(det), str(ev), "--out", str(rep), "--seed", "0", "--samples", "100"]) == 0
    for name in ("bands.csv", "sensitivity.csv", "emissions.csv", "capacity_bands.png", "emissions.png", "manifest.json"):
        assert (rep / name).stat().st_size > 0
    assert (rep / "capacity_bands.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert list(rep.glob("sensitivity_*.png"))
