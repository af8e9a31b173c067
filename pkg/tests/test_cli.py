import hashlib
import json

import pytest
import yaml

from bsdelab import cli

SMALL = {"experiment": "comparison-suite", "seed": 3, "grid": {"N": 16, "P": 2000, "T": 1.0},
         "params": {"degree": 3}}


def write_config(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_list_shows_six_experiments_with_anchors(capsys):
    assert cli.main(["list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6
    text = "\n".join(lines)
    for name, anchor in [("lipschitz-convergence", "Prop 3.1"), ("delta-hedge", "Cor 4.5"),
                         ("blowup-sweep", "§5.3 / Prop 5.3"), ("comparison-suite", "Thm 3.5"),
                         ("bounds-audit", "Thm 5.4"), ("utility-suite", "Thm 6.1")]:
        assert any(name in ln and anchor in ln for ln in lines), (name, text)


def test_unknown_experiment_is_usage_error(tmp_path, capsys):
    p = write_config(tmp_path, dict(SMALL, experiment="frobnicate"))
    assert cli.main(["run", str(p), "--output-dir", str(tmp_path / "o")]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "frobnicate" in err and "delta-hedge" in err


def test_missing_seed_is_config_error(tmp_path, capsys):
    cfg = dict(SMALL)
    cfg.pop("seed")
    p = write_config(tmp_path, cfg)
    assert cli.main(["run", str(p), "--output-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


@pytest.mark.parametrize("bad,field", [({"grid": {"N": 1}}, "grid.N"), ({"grid": {"P": 0}}, "grid.P"),
                                       ({"bogus": 1}, "bogus"), ({"seed": -1}, "seed")])
def test_invalid_fields_name_the_field(tmp_path, capsys, bad, field):
    cfg = dict(SMALL, **bad)
    p = write_config(tmp_path, cfg)
    assert cli.main(["run", str(p), "--output-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert field in capsys.readouterr().err


def _run(tmp_path, sub, cfg=SMALL, extra=()):
    p = write_config(tmp_path, cfg, f"{sub}.yaml")
    out = tmp_path / sub
    code = cli.main(["run", str(p), "--output-dir", str(out), *extra])
    return code, out


def test_reruns_are_byte_identical_and_manifest_checks_out(tmp_path):
    c1, o1 = _run(tmp_path, "a")
    c2, o2 = _run(tmp_path, "b")
    assert c1 == c2
    csvs = sorted(p.name for p in o1.glob("*.csv"))
    assert csvs
    for name in csvs + ["summary.json"]:
        assert (o1 / name).read_bytes() == (o2 / name).read_bytes()
    man = json.loads((o1 / "manifest.json").read_text())
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((o1 / name).read_bytes()).hexdigest() == digest
    assert man["config"]["seed"] == 3
    assert "numpy" in man["versions"]


def test_seed_override_changes_output(tmp_path):
    _, o1 = _run(tmp_path, "a")
    _, o2 = _run(tmp_path, "b", extra=("--seed", "4"))
    assert json.loads((o2 / "manifest.json").read_text())["config"]["seed"] == 4
    assert any((o1 / p.name).read_bytes() != p.read_bytes() for p in o2.glob("*.csv"))


def test_failed_check_writes_failure_record(tmp_path):
    cfg = {"experiment": "lipschitz-convergence", "seed": 0, "grid": {"N": 8, "P": 200},
           "params": {"y_tol": 1e-15, "z_tol": 1e-15}}
    code, out = _run(tmp_path, "f", cfg)
    assert code == cli.EXIT_FAIL
    rec = json.loads((out / "failure.json").read_text())
    assert rec["failed_checks"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "fail" and "failure.json" in man["outputs"]


def test_csv_uses_repr_floats_and_lf(tmp_path):
    p = tmp_path / "t.csv"
    cli.write_csv(p, ["a", "b"], [(0.1, 3), (1e-20, True)])
    assert p.read_bytes() == b"a,b\n0.1,3\n1e-20,true\n"
