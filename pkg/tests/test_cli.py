import json
import subprocess
import sys

import pytest

from retropanel.cli import main


def run(args, cwd=None):
    return subprocess.run([sys.executable, "-m", "retropanel", *map(str, args)], capture_output=True, text=True, cwd=cwd)


SMALL_SIM = ["--n-at", 8, "--n-lt", 6, "--periods", 16, "--t0", 6, "--tau", 0.2]


@pytest.fixture(scope="module")
def panel(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--output-dir", str(out), "--seed", "3", *map(str, SMALL_SIM)]) == 0
    return out / "panel.csv"


@pytest.fixture
def two_by_two(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("unit,period,outcome,treated\na,1,1,1\na,2,2,1\nb,1,1,0\nb,2,5,1\n")
    return path


class TestExitCodes:
    def test_bad_flag(self):
        proc = run(["fit", "--bogus"])
        assert proc.returncode == 1
        assert json.loads(proc.stderr.strip().splitlines()[-1])["exit_code"] == 1

    def test_missing_input(self, tmp_path):
        assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--output-dir", str(tmp_path)]) == 2

    def test_no_later_treated(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("unit,period,outcome,treated\na,1,1,1\na,2,2,1\nb,1,1,1\nb,2,5,1\n")
        proc = run(["fit", "--input", path, "--output-dir", tmp_path])
        assert proc.returncode == 2
        err = json.loads(proc.stderr.strip().splitlines()[-1])
        assert err["error"] == "NoLaterTreated"

    def test_placebo_without_post_window(self, two_by_two, tmp_path):
        assert main(["placebo", "--input", str(two_by_two), "--output-dir", str(tmp_path)]) == 2

    def test_elapsed_without_propensity(self, panel, tmp_path):
        args = ["fit", "--input", str(panel), "--output-dir", str(tmp_path), "--no-propensity-weights"]
        assert main(args) == 1

    def test_unknown_config_key(self, panel, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_bootstraps": 5}))
        assert main(["fit", "--input", str(panel), "--config", str(cfg)]) == 1


class TestFit:
    def test_did_two_by_two(self, two_by_two, tmp_path):
        args = ["fit", "--input", str(two_by_two), "--output-dir", str(tmp_path), "--estimator", "did", "--n-boot", "0"]
        assert main(args) == 0
        lines = (tmp_path / "effects.csv").read_text().splitlines()
        assert lines == ["period,tau,ci_lower,ci_upper", "1,3.0,,", "pooled,3.0,,"]

    def test_mc_outputs(self, panel, tmp_path):
        args = ["fit", "--input", str(panel), "--output-dir", str(tmp_path), "--n-boot", "10", "--seed", "1"]
        assert main(args) == 0
        for name in ["effects.csv", "fit.json", "latent_trends.csv", "weights.json"]:
            assert (tmp_path / name).exists()
        rows = (tmp_path / "effects.csv").read_text().splitlines()
        assert len(rows) == 1 + 6 + 1
        record = json.loads((tmp_path / "fit.json").read_text())
        assert record["n_boot"] == 10 and record["n_failed"] <= 1

    def test_config_file_and_flag_precedence(self, two_by_two, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"estimator": "scm", "n_boot": 0}))
        assert main(["fit", "--input", str(two_by_two), "--config", str(cfg), "--estimator", "did",
                     "--output-dir", str(tmp_path)]) == 0
        record = json.loads((tmp_path / "fit.json").read_text())
        assert record["config"]["estimator"] == "did" and record["config"]["n_boot"] == 0


class TestOtherCommands:
    def test_compare_single_estimator(self, panel, tmp_path):
        args = ["compare", "--input", str(panel), "--output-dir", str(tmp_path), "--estimators", "did", "--n-runs", "2"]
        assert main(args) == 0
        lines = (tmp_path / "compare.csv").read_text().splitlines()
        assert lines[0] == "estimator,ratio,mode,metric,value,stderr"
        assert len(lines) == 4 and all(l.startswith("did,") for l in lines[1:])

    def test_placebo_t0_override(self, panel, tmp_path):
        args = ["placebo", "--input", str(panel), "--output-dir", str(tmp_path), "--t0", "5",
                "--n-boot", "10", "--mode", "simultaneous"]
        assert main(args) == 0
        lines = (tmp_path / "placebo.csv").read_text().splitlines()
        assert len(lines) == 2


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.mark.parametrize(
    "cmd",
    [
        ["simulate", *SMALL_SIM],
        ["fit", "--n-boot", "8"],
        ["placebo", "--n-boot", "8", "--ratios", "0.5"],
        ["compare", "--n-runs", "2", "--ratios", "0.5,0.8"],
    ],
    ids=["simulate", "fit", "placebo", "compare"],
)
def test_byte_determinism(cmd, panel, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        args = [*cmd, "--seed", "7", "--output-dir", d]
        if cmd[0] != "simulate":
            args += ["--input", panel]
        proc = run(args)
        assert proc.returncode == 0, proc.stderr
        outs.append(_outputs(d))
    assert outs[0] and outs[0] == outs[1]
