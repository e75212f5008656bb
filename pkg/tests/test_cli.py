import csv

import pytest

from attrnet.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, load_synthetic_spec, main, resolve_config, build_parser
from attrnet.metrics import MetricsReport
from attrnet.trainer import Checkpoint


@pytest.fixture
def synth_cfg(tmp_path):
    p = tmp_path / "synth.cfg"
    p.write_text("# tiny synthetic set\nn_train = 40\nn_test = 10\nnoise = 0.3\nseed = 2\n"
                 "correlation = Male, Young, 0.8\ncorrelation = Bald, Receding_Hairline, 0.7\n")
    return p


def test_synthetic_spec_file(synth_cfg):
    spec = load_synthetic_spec(synth_cfg)
    assert spec.n_train == 40 and spec.noise == 0.3
    assert list(spec.correlations) == [("Male", "Young", 0.8), ("Bald", "Receding_Hairline", 0.7)]


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 3\nlr = 0.5  # comment\nvariant = independent\n")
    args = build_parser().parse_args(["train", "--config", str(cfg), "--lr", "0.1"])
    rc = resolve_config(args)
    assert (rc.epochs, rc.lr, rc.variant, rc.batch) == (3, 0.1, "independent", 100)


def test_params_command(capsys):
    assert main(["params"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "11,546,732" in out and "1,804,681" in out and "AUX adds 1,600" in out


@pytest.mark.parametrize("variant", ["mcnn-aux", "independent"])
def test_train_then_inspect(tmp_path, synth_cfg, capsys, variant):
    out = tmp_path / "run"
    argv = ["train", "--variant", variant, "--synthetic", str(synth_cfg), "--epochs", "2", "--batch", "20",
            "--out", str(out), "--threads", "1"]
    if variant == "independent":
        argv += ["--attribute", "Male"]
    assert main(argv) == EXIT_OK
    ck = Checkpoint.load(out / "checkpoint.mtck")
    with open(out / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    stages = {r["stage"] for r in rows}
    report = MetricsReport.read_csv(out / "metrics.csv")
    if variant == "mcnn-aux":
        assert stages == {"mcnn", "aux"} and ck.topology.variant == "mcnn_aux"
        assert len(report.attributes) == 40
        assert main(["heatmap", "--checkpoint", str(out / "checkpoint.mtck"), "--out", str(out)]) == EXIT_OK
        assert (out / "heatmap.csv").exists() and (out / "heatmap.pgm").exists()
        rel = tmp_path / "rel.txt"
        assert main(["relationships", "--checkpoint", str(out / "checkpoint.mtck"), "--out", str(rel)]) == EXIT_OK
        assert rel.read_text().startswith("Attribute")
    else:
        assert stages == {"independent"} and report.attributes == ["Male"]
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.mtck"), "--synthetic", str(synth_cfg),
                 "--out", str(tmp_path / "ev")]) == EXIT_OK


def test_synth_command_writes_loadable_dataset(tmp_path, synth_cfg):
    from attrnet.data import load_dataset
    assert main(["synth", "--synthetic", str(synth_cfg), "--out", str(tmp_path / "d"), "--image-format", "ppm"]) == EXIT_OK
    assert len(load_dataset(tmp_path / "d")) == 50


def test_exit_codes(tmp_path, synth_cfg, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "bogus"])
    assert exc.value.code == EXIT_USAGE
    assert main(["train", "--synthetic", str(synth_cfg), "--variant", "independent", "--epochs", "1"]) == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "missing")]) == EXIT_DATA
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["train", "--config", str(bad), "--synthetic", str(synth_cfg)]) == EXIT_USAGE
    assert main(["heatmap", "--checkpoint", str(tmp_path / "nope")]) == EXIT_DATA
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert main(["relationships", "--checkpoint", str(junk)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "error:" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, synth_cfg):
    assert main(["train", "--synthetic", str(synth_cfg), "--variant", "independent", "--attribute", "Male",
                 "--epochs", "3", "--lr", "1e30", "--out", str(tmp_path / "x")]) == EXIT_DIVERGED
