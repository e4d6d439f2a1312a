import json

import pytest

from prunekit import cli, model_io, pruner

DATA = "synth:count=160,classes=3,dims=1x12x12,seed=21,noise=0.2"
TEST_DATA = "synth:count=80,classes=3,dims=1x12x12,seed=22,noise=0.2"
FAST_TRAIN = ["--widths", "4,6", "--epochs", "1", "--batch-size", "32",
              "--lr", "0.05", "--seed", "0"]


def run(argv):
    return cli.main(argv)


@pytest.fixture()
def ckpt_path(tmp_path):
    out = tmp_path / "base.ckpt"
    assert run(["train", "--data", DATA, "--eval-data", TEST_DATA,
                "--out", str(out)] + FAST_TRAIN) == 0
    return out


class TestTrainEval:
    def test_train_writes_checkpoint(self, ckpt_path, capsys):
        assert ckpt_path.exists()
        ckpt = model_io.load_checkpoint(ckpt_path)
        assert ckpt.metadata["epochs"] == 1

    def test_eval_prints_accuracy(self, ckpt_path, capsys):
        assert run(["eval", "--checkpoint", str(ckpt_path),
                    "--data", TEST_DATA]) == 0
        out = capsys.readouterr().out
        assert out.startswith("accuracy 0.")

    def test_config_file_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("epochs = 1\nwidths = 4,6\nlr = 0.05\nbatch_size = 32\n")
        out = tmp_path / "m.ckpt"
        assert run(["train", "--data", DATA, "--out", str(out),
                    "--config", str(cfg)]) == 0
        assert model_io.load_checkpoint(out).metadata["epochs"] == 1

    def test_missing_data_fails_with_diagnostic(self, tmp_path, capsys):
        code = run(["train", "--out", str(tmp_path / "m.ckpt")])
        assert code == 1
        assert "error: missing --data" in capsys.readouterr().err


class TestPruneFinetune:
    def test_prune_with_cr_writes_artifacts(self, ckpt_path, tmp_path, capsys):
        out = tmp_path / "pruned.ckpt"
        report = tmp_path / "report.json"
        trace = tmp_path / "run.trace"
        code = run(["prune", "--checkpoint", str(ckpt_path), "--data", DATA,
                    "--test-data", TEST_DATA, "--out", str(out),
                    "--cr", "1.5", "--probe-images", "12", "--locations", "4",
                    "--report", str(report), "--trace", str(trace)])
        assert code == 0
        assert out.exists()
        payload = json.loads(report.read_text())
        assert payload["variant"] == "cpli"
        assert "timings" not in payload
        assert len(pruner.read_traces(trace)) >= 1
        assert "CR" in capsys.readouterr().out

    def test_prune_with_explicit_budgets(self, ckpt_path, tmp_path):
        out = tmp_path / "pruned.ckpt"
        code = run(["prune", "--checkpoint", str(ckpt_path), "--data", DATA,
                    "--out", str(out), "--budgets", "2=3",
                    "--probe-images", "8", "--locations", "4",
                    "--variant", "magnitude"])
        assert code == 0
        pruned = model_io.load_checkpoint(out)
        assert pruned.spec.layers[0].out_channels == 3

    def test_prune_requires_budget_or_cr(self, ckpt_path, tmp_path, capsys):
        code = run(["prune", "--checkpoint", str(ckpt_path), "--data", DATA,
                    "--out", str(tmp_path / "p.ckpt")])
        assert code == 1
        assert "either --budgets or --cr" in capsys.readouterr().err

    def test_finetune_round(self, ckpt_path, tmp_path, capsys):
        out = tmp_path / "tuned.ckpt"
        code = run(["finetune", "--checkpoint", str(ckpt_path), "--data", DATA,
                    "--eval-data", TEST_DATA, "--out", str(out),
                    "--epochs", "1", "--batch-size", "32"])
        assert code == 0
        assert out.exists()
        assert "finetuned 1 epochs" in capsys.readouterr().out


class TestExperimentAndReport:
    def test_experiment_grid_and_report_printing(self, tmp_path, capsys):
        outdir = tmp_path / "exp"
        code = run(["experiment", "--data", DATA, "--test-data", TEST_DATA,
                    "--outdir", str(outdir), "--variants", "cpli,magnitude",
                    "--seeds", "0", "--locations", "4", "--cr", "1.5",
                    "--widths", "4,6,6,8", "--epochs", "1",
                    "--finetune-epochs", "1", "--batch-size", "32",
                    "--probe-images", "8"])
        assert code == 0
        out = capsys.readouterr().out
        assert "variant\tlocations" in out
        table = json.loads((outdir / "table.json").read_text())
        assert {r["variant"] for r in table["rows"]} == {"cpli", "magnitude"}

        assert run(["report", "--file", str(outdir / "table.json")]) == 0
        printed = capsys.readouterr().out
        assert "cpli" in printed and "magnitude" in printed

        report_files = sorted(outdir.glob("report_*.json"))
        assert run(["report", "--file", str(report_files[0])]) == 0
        assert "FLOPs" in capsys.readouterr().out

    def test_bad_dataset_descriptor(self, tmp_path, capsys):
        code = run(["train", "--data", "bogus:x=1",
                    "--out", str(tmp_path / "m.ckpt"), "--epochs", "0"])
        assert code == 1
        assert "unknown dataset descriptor" in capsys.readouterr().err

    def test_missing_checkpoint_file(self, tmp_path, capsys):
        code = run(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
                    "--data", TEST_DATA])
        assert code == 1
        assert "error:" in capsys.readouterr().err
