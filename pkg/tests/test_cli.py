import csv
import hashlib
import json
from pathlib import Path

import pytest

from sobolev_ipm.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, git_blob_sha1, main, write_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# small budgets: the full runs live in the acceptance suite
QUICK = {
    "ipm": ["--config", str(CONFIGS / "two_gaussians.cfg"), "--grid", "32"],
    "pde": ["--config", str(CONFIGS / "two_gaussians.cfg"), "--grid", "32"],
    "descent": ["--config", str(CONFIGS / "descent_1d.cfg"), "--iters", "3", "--grid", "257"],
    "gan": ["--config", str(CONFIGS / "gan_gaussian.cfg"), "--iters", "15"],
    "seqgen": ["--seed", "1", "--iters", "10"],
    "ssl": ["--seed", "2", "--iters", "10"],
    "selftest": [],
}


def run(command, out, *extra):
    return main([command, "--out", str(out), *QUICK[command], *extra])


def manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


class TestExitCodes:
    def test_selftest_passes(self, tmp_path, capsys):
        assert run("selftest", tmp_path) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) >= 6 and all(line.startswith("PASS") for line in lines)
        assert json.loads((tmp_path / "selftest.json").read_text())["failed"] == 0

    def test_training_needs_seed(self, tmp_path, capsys):
        assert main(["ssl", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "seed is required" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[gan]\nbogus = 1\n")
        assert main(["gan", "--seed", "0", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
        assert "bogus" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["ipm", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_threads(self, tmp_path):
        assert main(["ipm", "--threads", "0", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main(["serve"])
        assert err.value.code == 2

    def test_runtime_failure_recorded(self, tmp_path):
        cfg = tmp_path / "sing.cfg"
        cfg.write_text("[P]\nmean = 0, 0\ncov = 1, 2; 2, 1\n")
        status = main(["ipm", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert status in (EXIT_USAGE, EXIT_FAIL)
        m = manifest(tmp_path / "o")
        assert m["error"] and m["exit_status"] == status


class TestArtifacts:
    def test_ipm_point_masses(self, tmp_path):
        assert main(["ipm", "--config", str(CONFIGS / "point_masses.cfg"), "--out", str(tmp_path)]) == EXIT_OK
        res = {r["method"]: r for r in json.loads((tmp_path / "ipm.json").read_text())["results"]}
        assert res["cramer1d"]["value"] == pytest.approx(3.0, abs=1e-9)
        assert res["wasserstein1d"]["value"] == pytest.approx(3.0, abs=1e-9)

    def test_pde_outputs(self, tmp_path):
        assert run("pde", tmp_path) == EXIT_OK
        rows = list(csv.reader((tmp_path / "critic.csv").open(newline="")))
        assert rows[0] == ["x", "y", "f"] and len(rows) == 1 + 32 * 32
        summary = json.loads((tmp_path / "pde.json").read_text())
        assert summary["pde_residual"] <= 1e-8
        assert (tmp_path / "critic.svg").read_text().startswith("<svg")

    def test_manifest_checksums(self, tmp_path):
        assert run("descent", tmp_path) == EXIT_OK
        m = manifest(tmp_path)
        assert m["seed"] == 0 and m["threads"] == 1 and not m["partial"]
        assert m["config_sha1"] == git_blob_sha1((CONFIGS / "descent_1d.cfg").read_bytes())
        names = {a["path"] for a in m["artifacts"]}
        assert {"trajectory.csv", "energy.csv", "descent.json"} <= names
        for a in m["artifacts"]:
            data = (tmp_path / a["path"]).read_bytes()
            assert hashlib.sha256(data).hexdigest() == a["sha256"] and len(data) == a["bytes"]

    def test_seed_flag_overrides_config(self, tmp_path):
        assert run("gan", tmp_path, "--seed", "5") == EXIT_OK
        assert manifest(tmp_path)["seed"] == 5

    def test_csv_format(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [2, 1 / 3]])
        assert p.read_bytes() == b"a,b\r\n1,0.1\r\n2,0.3333333333333333\r\n"

    def test_git_blob_sha1(self):
        # `git hash-object` of an empty file
        assert git_blob_sha1(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


@pytest.mark.parametrize("command", list(QUICK))
def test_deterministic_artifacts(tmp_path, command):
    assert run(command, tmp_path / "a") == EXIT_OK
    assert run(command, tmp_path / "b") == EXIT_OK
    a, b = manifest(tmp_path / "a"), manifest(tmp_path / "b")
    assert a["artifacts"] == b["artifacts"]
    assert a["artifacts"]
