import json
import os

import pytest

from fdelab.cli import main
from fdelab.report import ManifestError, RunManifest, run_suites


SMALL = dict(grid_shape=17, grid_nt=17, box_half=4.0, levels=1,
             suites=("scalar", "meanchange"))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        man = RunManifest(**SMALL)
        path = str(tmp_path / "m.json")
        man.to_json(path)
        back = RunManifest.from_json(path)
        assert back == man

    def test_unknown_field_named_in_error(self, tmp_path):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            json.dump({"schema_version": 1, "grdi_shape": 33}, fh)
        with pytest.raises(ManifestError, match="grdi_shape"):
            RunManifest.from_json(path)

    def test_invalid_value_names_key(self):
        with pytest.raises(ManifestError, match="t_start"):
            RunManifest(t_start=-1.0).validate()
        with pytest.raises(ManifestError, match="suites"):
            RunManifest(suites=("nope",)).validate()

    def test_schema_version_checked(self, tmp_path):
        path = str(tmp_path / "v.json")
        with open(path, "w") as fh:
            json.dump({"schema_version": 99}, fh)
        with pytest.raises(ManifestError, match="schema_version"):
            RunManifest.from_json(path)


class TestSuites:
    def test_scalar_and_meanchange_pass(self):
        entries = run_suites(RunManifest(**SMALL))
        assert entries and all(e["passed"] for e in entries)

    def test_empty_selection_gives_empty_report(self):
        entries = run_suites(RunManifest(**SMALL), suites=())
        assert entries == []


class TestCli:
    def test_empty_suite_exits_zero(self, tmp_path):
        out = str(tmp_path / "out")
        code = main(["verify", "--suite", "", "--out", out])
        assert code == 0
        lines = open(os.path.join(out, "verify.jsonl")).read()
        assert lines == ""

    def test_verify_deterministic_across_threads(self, tmp_path):
        man = RunManifest(**SMALL)
        man_path = str(tmp_path / "man.json")
        man.to_json(man_path)
        outs = []
        for threads, tag in ((1, "a"), (8, "b")):
            out = str(tmp_path / tag)
            code = main(["verify", "--manifest", man_path, "--out", out,
                         "--seed", "42", "--threads", str(threads)])
            assert code == 0
            outs.append(open(os.path.join(out, "verify.jsonl"), "rb").read())
        assert outs[0] == outs[1]
        # and re-running with the same seed is byte-identical too
        out = str(tmp_path / "c")
        main(["verify", "--manifest", man_path, "--out", out, "--seed", "42"])
        assert open(os.path.join(out, "verify.jsonl"), "rb").read() == outs[0]

    def test_invalid_manifest_exit_code(self, tmp_path):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            json.dump({"schema_version": 1, "t_start": -3.0}, fh)
        assert main(["verify", "--manifest", path]) == 2

    def test_forced_failure_is_nonzero_and_named(self, tmp_path, capsys):
        # a nontrivial check driven to an impossible tolerance must fail the
        # run and name the failing report
        man = RunManifest(grid_shape=17, grid_nt=17, levels=1,
                          suites=("energy",), energy_gamma_cap=0.0)
        man_path = str(tmp_path / "man.json")
        man.to_json(man_path)
        code = main(["verify", "--manifest", man_path,
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert "FAIL energy:" in capsys.readouterr().out

    def test_solve_command_emits_tables(self, tmp_path):
        man = RunManifest(grid_shape=17, grid_nt=17, levels=1)
        man_path = str(tmp_path / "man.json")
        man.to_json(man_path)
        out = str(tmp_path / "out")
        code = main(["solve", "--manifest", man_path, "--out", out])
        assert code == 0
        assert os.path.exists(os.path.join(out, "convergence.csv"))
        assert os.path.exists(os.path.join(out, "trajectory_l1.npz"))

    def test_profile_command(self, tmp_path):
        man = RunManifest(grid_shape=17, grid_nt=17, geom_S=0.2, geom_R=1.0,
                          s_span_log2=12.0)
        man_path = str(tmp_path / "man.json")
        man.to_json(man_path)
        out = str(tmp_path / "out")
        assert main(["profile", "--manifest", man_path, "--out", out]) == 0
        header = open(os.path.join(out, "profile.csv")).readline().strip()
        assert header == "s,r_tilde,r,lambda,theta,subintrinsic,intrinsic"
