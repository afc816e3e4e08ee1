import csv
import json
import shutil
import subprocess
from pathlib import Path

import pytest

from pdmplab.cli import main
from pdmplab.config import ConfigError, validate_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

HEADERS = {
    "growth_rate.csv": ["p", "lambda_p"],
    "feynman_kac.csv": ["p", "exact", "mc_mean", "mc_se", "z"],
    "lyapunov.csv": ["lambda_switch", "chi", "ci_lo", "ci_hi"],
    "critical_rate.csv": ["lo", "hi", "resolved"],
    "coupling.csv": ["replica", "t", "distance", "bound"],
    "tree.csv": ["id", "parent", "birth", "death", "trait_at_birth"],
    "population.csv": ["replica", "n_alive", "total_trait"],
    "many_to_one.csv": ["functional", "lhs", "lhs_se", "rhs", "rhs_se", "z"],
    "convergence.csv": ["epsilon", "n_hits", "tv_pi_star", "ks_mu_bar", "sup_dist_prehit"],
    "concentration.csv": ["s", "mean_conc_M", "mean_conc_P", "cv_M", "cv_P"],
    "concentration_sim.csv": ["s", "mean_conc_M", "mean_conc_P", "cv_M", "cv_P"],
    "moments.csv": ["s", "EM", "EP", "VarM", "VarP", "CovMP"],
    "cv_scan.csv": ["lambda1", "sigma1", "lambda2", "tauR", "tauD", "V0", "mu_p", "cv2"],
    "trajectory.csv": None,
}

# small overrides keep each run to a second or two
FAST = {
    "malthus": ["--replicas", "2000"],
    "planar": ["--replicas", "4"],
    "coupling": [],
    "branching": ["--replicas", "200"],
    "ifire": ["--replicas", "1", "--horizon", "300"],
    "gene": ["--replicas", "500"],
    "cvscan": [],
}


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, scenario, out, extra=()):
    cfg = CONFIGS / f"{scenario}.yaml"
    return main([scenario, "--config", str(cfg), "--out", str(out), *FAST[scenario], *extra])


# validation -------------------------------------------------------------------

def test_minimal_malthus_config(tmp_path):
    cfg = validate_config(write(tmp_path, "scenario: malthus\nparams:\n  Q: [[-1, 1], [1, -1]]\n  a: [1, -1]\n"))
    assert cfg.scenario == "malthus" and cfg.seed == 0


def test_gene_order_constraint(tmp_path):
    text = ("scenario: gene\nparams:\n  params:\n    lambda1: 1\n    sigma1: 1\n    lambda2: 1\n"
            "    tauR: 1.0\n    tauD: 1.0\n")
    with pytest.raises(ConfigError) as err:
        validate_config(write(tmp_path, text))
    assert "tauR < tauD" in str(err.value)


def test_unknown_key_listed_with_line(tmp_path):
    text = ("scenario: gene\nparams:\n  params:\n    lambda1: 1\n    sigma1: 1\n    lambda2: 1\n"
            "    lambda3: 2\n    tauR: 0.2\n    tauD: 1.0\n")
    with pytest.raises(ConfigError) as err:
        validate_config(write(tmp_path, text))
    errs = err.value.errors
    assert any("lambda3" in e["msg"] and e["line"] == 7 for e in errs)


def test_every_error_is_listed(tmp_path):
    text = "scenario: malthus\nseed: -3\nbogus: 1\nparams:\n  Q: [[-1, 1], [1, -1]]\n"
    with pytest.raises(ConfigError) as err:
        validate_config(write(tmp_path, text))
    locs = {e["loc"] for e in err.value.errors}
    assert {"seed", "bogus", "params.a"} <= locs


def test_json_config_accepted(tmp_path):
    p = write(tmp_path, json.dumps({"scenario": "malthus", "params": {"Q": [[-1, 1], [1, -1]], "a": [1, -1]}}),
              "cfg.json")
    assert validate_config(p).scenario == "malthus"


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.yaml")):
        validate_config(path)


def test_validate_command_and_error_json(tmp_path, capsys):
    assert main(["validate", "--config", str(CONFIGS / "planar.yaml")]) == 0
    capsys.readouterr()
    bad = write(tmp_path, "scenario: planar\nparams: {rates: [-1]}\n")
    assert main(["validate", "--config", str(bad)]) == 2
    payload = json.loads(capsys.readouterr().out)
    assert payload["error"] == "config" and payload["errors"]


def test_usage_errors(tmp_path, capsys):
    assert main(["planar", "--config", str(CONFIGS / "malthus.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["cvscan", "--config", str(CONFIGS / "cvscan.yaml"), "--out", str(tmp_path),
                 "--horizon", "3"]) == 2
    assert capsys.readouterr().out.count('"error": "usage"') == 2


def test_model_error_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "scenario: malthus\nparams:\n  Q: [[0, 0], [1, -1]]\n  a: [1, -1]\n")
    assert main(["malthus", "--config", str(cfg), "--out", str(tmp_path / "o"), "--replicas", "10"]) == 1
    payload = json.loads(capsys.readouterr().out)
    assert payload["error"] in ("model", "runtime") and payload["scenario"] == "malthus"


# runs -------------------------------------------------------------------------------

@pytest.mark.parametrize("scenario", list(FAST))
def test_scenario_headers_and_reproducibility(tmp_path, scenario, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(tmp_path, scenario, a) == 0
    assert run(tmp_path, scenario, b) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"] and ma["outputs"]
    for name in ma["outputs"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
        with open(a / name, newline="") as fh:
            header = next(csv.reader(fh))
        expected = HEADERS[name]
        if expected is None:
            assert header[0] == "t" and header[-2:] == ["env", "event_tag"]
        else:
            assert header == expected
    assert ma["schema_version"] == 1 and ma["config"]["scenario"] == scenario


def test_seed_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(tmp_path, "branching", a, ["--seed", "1"])
    run(tmp_path, "branching", b, ["--seed", "2"])
    assert (a / "tree.csv").read_bytes() != (b / "tree.csv").read_bytes()


@pytest.mark.skipif(shutil.which("pdmplab") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["pdmplab", "cvscan", "--config", str(CONFIGS / "cvscan.yaml"), "--out",
                          str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stdout + res.stderr
    assert json.loads(res.stdout)["ok"]
