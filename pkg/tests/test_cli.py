import csv
import io
import json
import subprocess
import sys

import pytest

from bnmf import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_batch_range_parsing():
    assert cli.parse_batch_range("8") == [8]
    assert cli.parse_batch_range("4,8,16") == [4, 8, 16]
    assert cli.parse_batch_range("4:10:3") == [4, 7, 10]
    assert cli.parse_float_range("1.0:1.2:0.1") == pytest.approx([1.0, 1.1, 1.2])


def test_fixed_point_all_methods_json(capsys):
    code, out, _ = run(capsys, "fixed-point", "--phi", "relu", "--B", "8", "--method", "all")
    assert code == 0
    doc = json.loads(out)
    assert [r["method"] for r in doc["results"]] == ["laplace", "spherical", "gegenbauer"]
    for r in doc["results"]:
        assert r["q_star"] == pytest.approx(0.5, abs=1e-10)
    man = doc["manifest"]
    assert man["command"] == "fixed-point" and man["descriptor"] == "relu" and man["batch"] == [8]
    assert {"quadrature", "version", "timestamp", "seed"} <= set(man)


def test_method_all_skips_inapplicable_routes(capsys):
    code, out, _ = run(capsys, "fixed-point", "--phi", "tanh", "--B", "6", "--method", "all")
    assert code == 0
    doc = json.loads(out)
    assert [r["method"] for r in doc["results"]] == ["spherical", "gegenbauer"]
    assert doc["manifest"]["skipped"][0]["method"] == "laplace"


def test_eigen_csv(capsys):
    code, out, _ = run(capsys, "eigen", "--phi", "relu", "--B", "4:8:4")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# manifest: ")
    json.loads(lines[0][len("# manifest: "):])
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert [int(r["B"]) for r in rows] == [4, 8]
    assert float(rows[1]["lambda_G_down"]) == pytest.approx(1.7881899766587481, abs=1e-12)


def test_output_file(tmp_path, capsys):
    path = tmp_path / "out.json"
    code, out, _ = run(capsys, "cross-batch", "--phi", "id", "--B", "8", "-o", str(path))
    assert code == 0 and out == ""
    rows = json.loads(path.read_text())["results"]
    assert len(rows) == 3
    for r in rows:
        assert r["lambda_cb"] == pytest.approx(0.93128378129200470758, abs=1e-10)


def test_gegenbauer_command(capsys):
    code, out, _ = run(capsys, "gegenbauer", "--phi", "relu", "--B", "8", "--lmax", "10")
    assert code == 0
    rows = json.loads(out)["results"]
    assert [r["l"] for r in rows] == list(range(11))


def test_depth_scale_values(capsys):
    code, out, _ = run(capsys, "depth-scale", "--phi", "tanh@gamma=0.1", "--B", "8",
                       "--method", "spherical", "--format", "json")
    assert code == 0
    r = json.loads(out)["results"][0]
    assert r["depth16"] == pytest.approx(16 * r["xi"])
    assert r["xi"] > 3.0


def test_output_is_deterministic_apart_from_timestamp(capsys):
    argv = ("fixed-point", "--phi", "leaky-relu:0.2", "--B", "5,9")
    a = json.loads(run(capsys, *argv)[1])
    b = json.loads(run(capsys, *argv)[1])
    a["manifest"].pop("timestamp")
    b["manifest"].pop("timestamp")
    assert a == b


@pytest.mark.parametrize("argv,code", [
    (("fixed-point", "--phi", "relu", "--B", "2"), 2),
    (("eigen", "--phi", "relu", "--B", "3"), 2),
    (("mc-validate", "--phi", "relu", "--B", "8"), 2),
    (("fixed-point", "--phi", "nope", "--B", "8"), 2),
    (("fixed-point", "--phi", "relu"), 2),
    (("fixed-point", "--phi", "tanh", "--B", "8", "--method", "laplace"), 1),
    (("eigen", "--phi", "const:1", "--B", "8", "--method", "spherical"), 1),
])
def test_exit_codes(capsys, argv, code):
    assert run(capsys, *argv)[0] == code


def test_mc_validate_small(capsys):
    code, out, _ = run(capsys, "mc-validate", "--phi", "relu", "--B", "6", "--seed", "1",
                       "--width", "256", "--depth", "20", "--replicas", "8")
    assert code == 0
    doc = json.loads(out)
    names = [r["quantity"] for r in doc["results"]]
    assert names == ["q_star", "nu_star", "log_lambda_G_down", "lambda_cb"]
    assert doc["manifest"]["mc"]["seed"] == 1
    assert "all_pass" in doc["manifest"]


def test_alpha_sweep(capsys):
    code, out, _ = run(capsys, "mc-validate", "--phi", "relu", "--B", "8", "--seed", "0",
                       "--width", "128", "--depth", "10", "--replicas", "2",
                       "--alpha-sweep", "1.0:2.0:0.5", "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO("\n".join(out.splitlines()[1:]))))
    assert [float(r["alpha"]) for r in rows] == [1.0, 1.5, 2.0]


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bnmf.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "bnmf" in proc.stdout
