"""CLI contract: flags, exit codes, determinism, input immutability."""

import hashlib
import json

import pytest

from bwnet import cli, data


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def cli_model(tmp_path_factory):
    """A small trained model + dataset directory for CLI runs."""
    base = tmp_path_factory.mktemp("cli")
    data_dir = base / "data"
    data.save_dataset(data.synthetic_digits(256, seed=5, noise=0.45), data_dir)
    model_dir = base / "model"
    rc = cli.main([
        "train-baseline", "--arch", "(1x4C3)-MP2-10FC-Softmax",
        "--data", str(data_dir), "--out", str(model_dir),
        "--name", "tiny", "--iters", "60", "--seed", "0",
    ])
    assert rc == 0
    return model_dir / "tiny.manifest", data_dir


class TestExitCodes:
    def test_unknown_command_is_validation_error(self, capsys):
        assert cli.main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_is_validation_error(self, capsys):
        assert cli.main(["eval", "--bogus", "x"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err

    def test_missing_model_file(self, tmp_path, capsys):
        rc = cli.main(["eval", "--model", str(tmp_path / "nope.manifest"),
                       "--data", "synthetic:32"])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_runtime_error_is_exit_2(self, cli_model, tmp_path, capsys):
        manifest, data_dir = cli_model
        # fine-tuning a float model violates the binary-mode precondition
        rc = cli.main(["finetune", "--model", str(manifest), "--data", str(data_dir),
                       "--out", str(tmp_path / "ft"), "--iters", "1"])
        assert rc == 2
        assert "runtime error" in capsys.readouterr().err


class TestBinarize:
    def test_writes_manifest_and_report(self, cli_model, tmp_path, capsys):
        manifest, data_dir = cli_model
        out = tmp_path / "bin" / "tiny_bin.manifest"
        rc = cli.main(["binarize", "--model", str(manifest), "--data", str(data_dir),
                       "--out", str(out), "--max-iter", "20", "--seed", "42"])
        assert rc == 0
        assert out.is_file()
        report = json.loads((out.parent / "tiny_bin.report.json").read_text())
        assert len(report["layers"]) == 2
        payload = json.loads(capsys.readouterr().out)
        assert payload["layers"] == 2

    def test_pipeline_config_switches(self, cli_model, tmp_path):
        manifest, data_dir = cli_model
        out = tmp_path / "skip" / "skip.manifest"
        rc = cli.main(["binarize", "--model", str(manifest), "--data", str(data_dir),
                       "--out", str(out), "--skip-first",
                       "--target-from", "full_precision", "--seed", "42"])
        assert rc == 0
        doc = json.loads(out.read_text())
        weighted = [l for l in doc["layers"] if l["kind"] in ("Conv", "FullyConnected")]
        assert not weighted[0].get("binarized", False)
        assert weighted[0].get("binary_ref") is None
        assert weighted[1]["binarized"]

    def test_identical_invocations_byte_identical(self, cli_model, tmp_path):
        manifest, data_dir = cli_model
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = cli.main(["binarize", "--model", str(manifest), "--data", str(data_dir),
                           "--out", str(out), "--seed", "42"])
            assert rc == 0
            digests.append(_tree_digest(out))
        assert digests[0] == digests[1]

    def test_inputs_never_mutated(self, cli_model, tmp_path):
        manifest, data_dir = cli_model
        before = _tree_digest(manifest.parent) + _tree_digest(data_dir)
        cli.main(["binarize", "--model", str(manifest), "--data", str(data_dir),
                  "--out", str(tmp_path / "out"), "--seed", "42"])
        after = _tree_digest(manifest.parent) + _tree_digest(data_dir)
        assert before == after


class TestOtherCommands:
    def test_eval(self, cli_model, capsys):
        manifest, data_dir = cli_model
        rc = cli.main(["eval", "--model", str(manifest), "--data", str(data_dir)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0.0 <= payload["top1"] <= 1.0

    def test_verify_oracle(self, tmp_path, capsys):
        report = tmp_path / "oracle.json"
        rc = cli.main(["verify", "--oracle", "--s-max", "10", "--trials", "20",
                       "--seed", "1", "--out", str(report)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["trials"] == 20
        assert payload["below_oracle"] == 0
        doc = json.loads(report.read_text())
        assert len(doc["reports"]) == 20

    def test_verify_requires_oracle_flag(self, capsys):
        assert cli.main(["verify"]) == 1

    def test_curve(self, cli_model, tmp_path, capsys):
        manifest, data_dir = cli_model
        out = tmp_path / "curve.json"
        rc = cli.main(["curve", "--model", str(manifest), "--data", str(data_dir),
                       "--out", str(out), "--seed", "42"])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert set(doc) == {"conv1", "fc1"}
        for entry in doc.values():
            values = [v for _, v in entry["series"]]
            assert all(b <= a for a, b in zip(values, values[1:]))
            assert values[0] <= entry["initial_objective"] + 1e-9

    def test_finetune_binary_model(self, cli_model, tmp_path, capsys):
        manifest, data_dir = cli_model
        bin_out = tmp_path / "bin" / "tiny_bin.manifest"
        assert cli.main(["binarize", "--model", str(manifest), "--data", str(data_dir),
                         "--out", str(bin_out), "--seed", "42"]) == 0
        capsys.readouterr()
        ft_out = tmp_path / "ft" / "tiny_ft.manifest"
        rc = cli.main(["finetune", "--model", str(bin_out), "--data", str(data_dir),
                       "--out", str(ft_out), "--iters", "20", "--seed", "0"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert "top1_after" in payload
        assert ft_out.is_file()

    def test_ablate(self, cli_model, tmp_path, capsys):
        manifest, data_dir = cli_model
        out = tmp_path / "ablate.json"
        rc = cli.main(["ablate", "--model", str(manifest), "--data", str(data_dir),
                       "--eval-data", "synthetic:64:9", "--out", str(out),
                       "--seed", "42"])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["rows"][0]["depth"] == 0
