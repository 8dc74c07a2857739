import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from latentcat.cli import run

GEN_CFG = """\
[generator]
s_x = 3
s_z = 3
w_cells = 2
strength = 0.3
separation = 0.3
z_mix = 0.8
latent_uniform_mix = 0.8
min_singular_value = 0.1
"""

GOLDEN = Path(__file__).parent / "data" / "golden_report.txt"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full fixed-seed pipeline: simulate -> test -> identify -> estimate."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "gen.cfg"
    spec.write_text(GEN_CFG)
    paths = {
        "root": root,
        "spec": spec,
        "synth": root / "synth.csv",
        "schema": root / "synth.schema.cfg",
        "report": root / "report.json",
        "models": root / "models.json",
        "fit": root / "fit.json",
    }
    assert run(["simulate", "--spec", str(spec), "--n", "8000", "--seed", "3",
                "--out", str(paths["synth"])]) == 0
    assert run(["test", "--input", str(paths["synth"]), "--schema",
                str(paths["schema"]), "--by-cell", "--B", "199", "--seed", "42",
                "--out", str(paths["report"])]) == 0
    assert run(["identify", "--input", str(paths["synth"]), "--schema",
                str(paths["schema"]), "--by-cell", "--method", "cmle",
                "--starts", "4", "--seed", "7", "--ord", "enforce",
                "--out", str(paths["models"])]) == 0
    assert run(["estimate", "--models", str(paths["models"]), "--data",
                str(paths["synth"]), "--schema", str(paths["schema"]),
                "--model", "hoprobit", "--target", "latent", "--seed", "11",
                "--out", str(paths["fit"])]) == 0
    return paths


def test_pipeline_artifacts_and_manifests(pipeline):
    for key in ("synth", "report", "models", "fit"):
        path = pipeline[key]
        assert path.exists()
        manifest = Path(str(path) + ".manifest.json")
        assert manifest.exists()
        payload = json.loads(manifest.read_text())
        assert payload["command"] in {"simulate", "test", "identify", "estimate"}
        assert "options" in payload and "timings" in payload
        for input_path, digest in payload["inputs"].items():
            assert len(digest) == 64


def test_artifacts_have_schema_versions(pipeline):
    for key in ("report", "models", "fit"):
        payload = json.loads(pipeline[key].read_text())
        assert payload["schema_version"] == "1"


def test_replay_reproduces_bytes(pipeline, tmp_path):
    out_dir = tmp_path / "replayed"
    code = run(["replay", str(pipeline["fit"]) + ".manifest.json",
                "--out-dir", str(out_dir)])
    assert code == 0
    original = pipeline["fit"].read_bytes()
    replayed = (out_dir / "fit.json").read_bytes()
    assert original == replayed


def test_replay_rejects_changed_inputs(pipeline, tmp_path):
    manifest = json.loads((str(pipeline["models"]) + ".manifest.json") and
                          Path(str(pipeline["models"]) + ".manifest.json").read_text())
    # point the manifest at a tampered copy of one input
    tampered_dir = tmp_path / "tampered"
    tampered_dir.mkdir()
    synth = pipeline["synth"].read_text()
    bad_input = tampered_dir / "synth.csv"
    bad_input.write_text(synth.replace("1", "2", 1))
    manifest["inputs"][str(bad_input)] = manifest["inputs"].pop(str(pipeline["synth"]))
    manifest["options"]["input"] = str(bad_input)
    bad_manifest = tampered_dir / "m.json"
    bad_manifest.write_text(json.dumps(manifest))
    assert run(["replay", str(bad_manifest)]) == 1


def test_report_text_stars_and_layout(pipeline, capsys):
    assert run(["report", str(pipeline["report"])]) == 0
    out = capsys.readouterr().out
    assert "90%" in out and "95%" in out and "99%" in out
    assert "* p<0.10, ** p<0.05, *** p<0.01" in out


def test_report_fit_mentions_median_scale(pipeline, capsys):
    assert run(["report", str(pipeline["fit"])]) == 0
    out = capsys.readouterr().out
    assert "median" in out
    assert "mean" not in out.split("median")[0]


def test_report_csv_export(pipeline, capsys):
    assert run(["report", str(pipeline["fit"]), "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "term,estimate,std_error"


def test_report_golden_file(pipeline):
    rendered = pipeline["root"] / "rendered.txt"
    assert run(["report", str(pipeline["report"]), str(pipeline["fit"]),
                "--out", str(rendered)]) == 0
    assert rendered.read_bytes() == GOLDEN.read_bytes()


def test_report_models_artifact(pipeline, capsys):
    assert run(["report", str(pipeline["models"])]) == 0
    out = capsys.readouterr().out
    assert "P(reported | latent)" in out
    assert "latent marginal" in out
    assert "cell 0" in out
    assert "converged starts agree" in out


def test_estimate_latent_bootstrap_se(pipeline, tmp_path):
    out = tmp_path / "fit_se.json"
    assert run(["estimate", "--models", str(pipeline["models"]), "--data",
                str(pipeline["synth"]), "--schema", str(pipeline["schema"]),
                "--model", "linear", "--target", "latent", "--boot", "12",
                "--boot-starts", "2", "--threads", "1", "--seed", "11",
                "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    se = payload["fit"]["std_errors"]
    assert se is not None and len(se) == 2
    assert all(v > 0 for v in se)
    assert payload["boot"]["b"] == 12


def test_simulate_malformed_spec_exit(tmp_path):
    spec = tmp_path / "bad.cfg"
    spec.write_text("[generator]\nstrength = nine\n")
    assert run(["simulate", "--spec", str(spec), "--n", "10", "--seed", "1",
                "--out", str(tmp_path / "s.csv")]) == 1
    spec.write_text("just text, no sections\n")
    assert run(["simulate", "--spec", str(spec), "--n", "10", "--seed", "1",
                "--out", str(tmp_path / "s.csv")]) == 1


def test_report_schema_mismatch_exit(tmp_path):
    bogus = tmp_path / "bogus.json"
    bogus.write_text('{"mystery": 1}')
    assert run(["report", str(bogus)]) == 1


def test_exit_codes_subprocess():
    env = dict(os.environ)
    def code(args):
        return subprocess.run(
            [sys.executable, "-m", "latentcat.cli", *args],
            capture_output=True, env=env,
        ).returncode

    assert code(["test", "--help"]) == 0
    assert code(["--version"]) == 0
    assert code(["test", "--bogus"]) == 64
    assert code(["frobnicate"]) == 64
    assert code(["report"]) == 64


def test_missing_input_file_exit(tmp_path):
    schema = tmp_path / "s.cfg"
    schema.write_text(
        "[columns]\nx=x\ny=y\nz=z\nw=\n\n[recode]\nx = 1:1 2:2 3:3\n"
    )
    assert run(["test", "--input", str(tmp_path / "nope.csv"),
                "--schema", str(schema), "--seed", "1",
                "--out", str(tmp_path / "r.json")]) == 1


def test_estimate_latent_requires_models(pipeline, tmp_path):
    assert run(["estimate", "--data", str(pipeline["synth"]), "--schema",
                str(pipeline["schema"]), "--model", "linear", "--target",
                "latent", "--seed", "1", "--out", str(tmp_path / "f.json")]) == 1


def test_simulate_truth_sidecar(tmp_path):
    spec = tmp_path / "gen.cfg"
    spec.write_text(GEN_CFG)
    out = tmp_path / "s.csv"
    truth = tmp_path / "truth.csv"
    assert run(["simulate", "--spec", str(spec), "--n", "500", "--seed", "5",
                "--out", str(out), "--truth", str(truth)]) == 0
    assert truth.exists()
    assert len(truth.read_text().splitlines()) == 501


def test_identify_spectral_method(pipeline, tmp_path):
    out = tmp_path / "spectral.json"
    code = run(["identify", "--input", str(pipeline["synth"]), "--schema",
                str(pipeline["schema"]), "--by-cell", "--method", "spectral",
                "--seed", "1", "--tol", "1e-4", "--out", str(out)])
    assert code in (0, 2)  # finite-sample cells may fail assumption gates
    payload = json.loads(out.read_text())
    assert payload["method"] == "spectral"
    assert len(payload["cells"]) == 2
    for entry in payload["cells"]:
        assert "model" in entry or "error" in entry
        if "model" in entry:
            mat = entry["model"]["m_x_given_xstar"]
            assert mat["rows"] == 3 and mat["cols"] == 3
            assert len(mat["data"]) == 9
            assert "diagnostics" in entry


def test_identify_cmle_includes_start_diagnostics(pipeline):
    payload = json.loads(pipeline["models"].read_text())
    entry = payload["cells"][0]
    assert entry["n_starts_converged"] >= 1
    assert len(entry["starts"]) == 4
    assert {"index", "kind", "final_loglik", "converged"} <= set(entry["starts"][0])


def test_identify_boot_standard_errors(pipeline, tmp_path):
    out = tmp_path / "models_se.json"
    assert run(["identify", "--input", str(pipeline["synth"]), "--schema",
                str(pipeline["schema"]), "--method", "cmle", "--starts", "3",
                "--seed", "7", "--ord", "enforce", "--boot", "30",
                "--boot-starts", "2", "--threads", "1", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    entry = payload["cells"][0]
    assert "std_errors" in entry
    se = entry["std_errors"]
    assert len(se["f_xstar"]) == 3
    assert all(v >= 0 for v in se["f_xstar"])
    assert entry["boot"]["b"] == 30


def test_exclusions_reported_on_stderr(pipeline, capsys):
    assert run(["test", "--input", str(pipeline["synth"]), "--schema",
                str(pipeline["schema"]), "--B", "99", "--seed", "1",
                "--out", str(pipeline["root"] / "tmp_report.json")]) == 0
    err = capsys.readouterr().err
    assert "records read: 8000" in err
