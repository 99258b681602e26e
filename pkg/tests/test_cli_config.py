import csv
import io
import re

import pytest

from tres_iqa import cli
from tres_iqa import config as cfgmod
from tres_iqa.config import ConfigError, RunConfig, load_config, parse_value, schema

TINY = ["--backbone.channels", "4,4,8,8", "--encoder.width", "8", "--encoder.heads", "2", "--encoder.n_layers", "1",
        "--model.head_hidden", "8", "--train.epochs", "1", "--train.batch_size", "8", "--train.patch_size", "32",
        "--run.workers", "1"]
SYNTH = ["--synth.n_refs", "4", "--synth.image_size", "32,32", "--synth.families", "gaussian_blur,white_noise",
         "--synth.levels", "2"]


@pytest.fixture
def run(capsys, caplog):
    """Invoke the CLI; stderr text includes log records captured by pytest."""
    def invoke(*argv):
        caplog.clear()
        with caplog.at_level("INFO", logger="tres_iqa"):
            code = cli.main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err + caplog.text
    return invoke


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), *SYNTH]) == 0
    assert cli.main(["train", "--manifest", str(root / "data" / "manifest.csv"), "--out", str(root / "run"),
                     *TINY]) == 0
    return root


# --- config ----------------------------------------------------------------------

def test_parse_value_types():
    assert parse_value("4,4,8,8", tuple[int, int, int, int]) == (4, 4, 8, 8)
    assert parse_value("a, b", tuple[str, ...]) == ("a", "b")
    assert parse_value("yes", bool) is True and parse_value("off", bool) is False
    assert parse_value("none", int | None) is None
    assert parse_value("2.5e-3", float) == 2.5e-3
    for text, tp in (("x", int), ("1,2", tuple[int, int, int]), ("maybe", bool), ("x", float)):
        with pytest.raises(ConfigError):
            parse_value(text, tp)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\ntrain.epochs = 3   # inline\nloss.lambda2 = 0.1\n\nbackbone.channels = 2,4,6,8\n")
    rc = load_config(p, {"train.epochs": "4"})
    assert rc.train.epochs == 4 and rc.loss.lambda2 == 0.1 and rc.backbone.channels == (2, 4, 6, 8)
    assert rc.train.weights is rc.loss
    assert RunConfig.from_flat({k: cfgmod.format_value(v) for k, v in rc.flat().items()}).flat() == rc.flat()
    (tmp_path / "bad.cfg").write_text("train.nope = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(tmp_path / "bad.cfg")
    (tmp_path / "bad2.cfg").write_text("train.epochs\n")
    with pytest.raises(ConfigError, match="key = value"):
        load_config(tmp_path / "bad2.cfg")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        RunConfig.from_flat({"encoder.width": "10", "encoder.heads": "3"})


def test_default_loss_weights_in_dump():
    dump = RunConfig().dump()
    assert "loss.lambda1 = 0.5\n" in dump and "loss.lambda2 = 0.05\n" in dump and "loss.lambda3 = 1.0\n" in dump


def test_shipped_toy_config_parses():
    from pathlib import Path
    rc = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy.cfg")
    assert rc.synth.n_refs == 25 and rc.synth.image_size == (64, 64) and rc.synth.levels == 4
    assert rc.train.batch_size == 16 and rc.train.lr == 1e-3 and rc.train.epochs <= 10


# --- CLI -----------------------------------------------------------------------------

def test_help_lists_every_config_key(run):
    for command in cli.COMMANDS:
        code, out, _ = run(command, "--help")
        assert code == 0
        flags = set(re.findall(r"--([a-z_]+\.[a-z_0-9]+)", out))
        assert flags == set(schema()), command
        assert "stdout:" in out


def test_usage_errors(run):
    assert run("bogus")[0] == 1
    assert run()[0] == 1
    assert run("eval")[0] == 1
    code, _, err = run("synth", "--out", "x", "--train.epochs", "many")
    assert code == 1 and "train.epochs" in err


def test_data_error_exit_code(run, tmp_path):
    code, _, err = run("eval", "--ckpt", tmp_path / "nope", "--manifest", tmp_path / "m.csv")
    assert code == 2 and "data error" in err
    bad = tmp_path / "bad.csv"
    bad.write_text("path,score,ref_id\na,1,x\nb,2,x\nc,3,x\nd,oops,x\n")
    code, _, err = run("train", "--manifest", bad, "--out", tmp_path / "run")
    assert code == 2 and "line 5" in err


def test_synth_and_resolved_config_log(run, tmp_path):
    code, out, err = run("synth", "--out", tmp_path / "d", *SYNTH)
    assert code == 0 and out.strip().endswith(",20")
    assert "loss.lambda1 = 0.5" in err and "loss.lambda2 = 0.05" in err and "loss.lambda3 = 1.0" in err


def test_train_outputs(trained):
    run_dir = trained / "run"
    for name in ("checkpoint/meta.txt", "checkpoint/index.csv", "checkpoint/tensors.bin", "metrics.csv",
                 "train_log.csv", "resolved_config.txt", "train_manifest.csv", "test_manifest.csv"):
        assert (run_dir / name).is_file(), name
    rows = list(csv.reader(io.StringIO((run_dir / "metrics.csv").read_text())))
    assert rows[0] == ["dataset", "n", "srocc", "plcc", "beta1", "beta2", "beta3", "beta4"] and len(rows) == 2


def test_eval_predict_and_analysis_commands(run, trained):
    ck, data = trained / "run" / "checkpoint", trained / "run" / "test_manifest.csv"
    code, out, _ = run("eval", "--ckpt", ck, "--manifest", data)
    assert code == 0 and len(out.strip().splitlines()) == 2
    code, out, _ = run("eval", "--ckpt", ck, "--manifest", data, "--no-header")
    assert code == 0 and len(out.strip().splitlines()) == 1
    img = trained / "data" / "images" / "ref000_pristine.ppm"
    code, out, _ = run("predict", "--ckpt", ck, img)
    assert code == 0 and out.splitlines()[1].startswith(str(img))
    code, out, _ = run("flip-report", "--ckpt", ck, "--manifest", data)
    assert code == 0 and out.splitlines()[-1].startswith("#aggregate")
    code, out, _ = run("retrieve", "--ckpt", ck, "--query", img, "--manifest",
                       trained / "data" / "manifest.csv", "--k", "2")
    assert code == 0 and out.splitlines()[1].split(",")[1] == str(img)
    code, out, _ = run("qmap", "--ckpt", ck, "--image", img, "--out", trained / "qm")
    assert code == 0 and out.splitlines()[0].endswith(".heat.ppm")
    code, out, _ = run("plot", "--ckpt", ck, "--manifest", data, "--out", trained / "s.svg")
    assert code == 0 and (trained / "s.svg").read_text().startswith("<svg")


def test_ablate_command(run, trained):
    code, out, _ = run("ablate", "--manifest", trained / "data" / "manifest.csv",
                       "--axes", "ranking_loss=0,1", *TINY)
    assert code == 0 and out.splitlines()[0] == "label,ranking_loss,srocc,plcc" and len(out.splitlines()) == 3
    assert run("ablate", "--manifest", trained / "data" / "manifest.csv", "--axes", "dropout=0,1")[0] == 1


def test_gradcheck_command(run, monkeypatch):
    from tres_iqa import gradcheck
    monkeypatch.setattr(gradcheck, "CASES", {k: gradcheck.CASES[k] for k in ("linear", "softmax")})
    code, out, _ = run("gradcheck", "--points", "2")
    assert code == 0 and out.splitlines()[0] == "op,max_rel_error,passed" and len(out.splitlines()) == 3
    assert run("gradcheck", "--points", "1", "--tol", "-1")[0] == 3
