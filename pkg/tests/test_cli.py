"""Command-line surface: exit codes, artifacts, and output contracts."""

import csv

import pytest

from roomdet import cli
from roomdet.data import read_labels
from roomdet.metrics import EvalReport
from roomdet.model import ModelConfig, build, count_params, read_header
from roomdet.toydata import make_toy_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Toy dataset plus a trained tiny run, shared by the read-only tests."""
    base = tmp_path_factory.mktemp("cliws")
    manifest = make_toy_dataset(base / "toy", num_images=4, num_classes=2,
                                image_size=64, seed=6)
    run = base / "run"
    code = cli.main([
        "train", "--data", str(manifest), "--out", str(run),
        "--epochs", "2", "--batch-size", "2", "--input-size", "64",
        "--width-mult", "0.0625", "--num-classes", "2",
        "--no-augment", "--quiet",
    ])
    assert code == 0
    return {"manifest": manifest, "run": run, "base": base}


def test_train_writes_run_artifacts(workspace):
    run = workspace["run"]
    for name in ("last.ckpt", "best.ckpt", "losses.csv", "metrics.csv",
                 "config.echo", "map_curve.svg"):
        assert (run / name).is_file(), name
    rows = list(csv.reader(open(run / "losses.csv")))
    assert rows[0] == ["iteration", "epoch", "lr", "total", "cls", "dfl", "ciou", "num_pos"]
    assert len(rows) == 1 + 2 * 2
    echo = (run / "config.echo").read_text()
    assert "width_mult = 0.0625" in echo
    assert "epochs = 2" in echo


def test_config_echo_reload(workspace):
    # the echoed config is itself a valid --config file
    run2 = workspace["base"] / "run2"
    code = cli.main([
        "train", "--config", str(workspace["run"] / "config.echo"),
        "--data", str(workspace["manifest"]), "--out", str(run2),
        "--epochs", "1", "--quiet",
    ])
    assert code == 0
    assert (run2 / "last.ckpt").is_file()


def test_eval_prints_results_table(workspace, capsys, tmp_path):
    code = cli.main([
        "eval", "--weights", str(workspace["run"] / "best.ckpt"),
        "--data", str(workspace["manifest"]), "--split", "val",
        "--out", str(tmp_path),
    ])
    assert code == 0
    out = capsys.readouterr().out
    head = out.splitlines()[0]
    cols = [c.strip() for c in head.split("|")]
    assert cols == list(EvalReport.COLUMNS)
    report_rows = list(csv.reader(open(tmp_path / "report.csv")))
    assert report_rows[0] == list(EvalReport.COLUMNS)
    cm_rows = list(csv.reader(open(tmp_path / "confusion_matrix.csv")))
    assert cm_rows[0][0] == "true\\pred"
    assert cm_rows[0][-1] == "background"


def test_infer_save_txt_reparses(workspace, tmp_path, capsys):
    img_dir = workspace["base"] / "toy" / "images" / "train"
    out = tmp_path / "infer"
    code = cli.main([
        "infer", "--weights", str(workspace["run"] / "best.ckpt"),
        "--input", str(img_dir), "--conf", "0.001",
        "--data", str(workspace["manifest"]),
        "--out", str(out), "--save-txt", "--save-img",
    ])
    assert code == 0
    txts = sorted(out.glob("*.txt"))
    pngs = sorted(out.glob("*.png"))
    assert len(txts) == 4 and len(pngs) == 4
    for t in txts:
        rows = read_labels(t, num_classes=2)  # must satisfy the label grammar
        assert rows.shape[1] == 5
    stdout = capsys.readouterr().out
    assert "detections" in stdout


def test_bench_reports_reference_context(workspace, capsys):
    code = cli.main([
        "bench", "--weights", str(workspace["run"] / "last.ckpt"),
        "--iterations", "3", "--warmup", "1",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "12.2" in out
    assert "mean" in out and "p95" in out


def test_inspect_table_is_conserved(workspace, capsys):
    code = cli.main(["inspect", "--weights", str(workspace["run"] / "last.ckpt")])
    assert code == 0
    out = capsys.readouterr().out
    assert "Param(M)" in out
    header = read_header(workspace["run"] / "last.ckpt")
    cfg = ModelConfig.from_dict(header["config"])
    total = count_params(build(cfg, seed=0))
    assert f"{total:,}" in out or str(total) in out


def test_inspect_from_config_only(capsys):
    code = cli.main(["inspect", "--summary", "--size", "64"])
    assert code == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("Size 64 | Param(M)")


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_exit_code_bad_config_value(workspace, tmp_path, capsys):
    code = cli.main([
        "train", "--data", str(workspace["manifest"]), "--out", str(tmp_path / "x"),
        "--width-mult", "0.0", "--quiet",
    ])
    assert code == 2
    assert capsys.readouterr().err.startswith("error: config:")


def test_exit_code_unknown_config_key(workspace, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("promulgate = 7\n")
    code = cli.main([
        "train", "--config", str(cfg), "--data", str(workspace["manifest"]),
        "--out", str(tmp_path / "x"), "--quiet",
    ])
    assert code == 2
    assert "promulgate" in capsys.readouterr().err


def test_exit_code_missing_config_file(workspace, tmp_path, capsys):
    code = cli.main([
        "train", "--config", str(tmp_path / "absent.cfg"),
        "--data", str(workspace["manifest"]), "--out", str(tmp_path / "x"),
    ])
    assert code == 2


def test_exit_code_dataset_error(tmp_path, capsys):
    bad = tmp_path / "manifest.txt"
    bad.write_text("names = a, b\nroot = .\ntrain = images/train\n")
    code = cli.main(["train", "--data", str(bad), "--out", str(tmp_path / "x"),
                     "--quiet"])
    assert code == 3
    assert capsys.readouterr().err.startswith("error: dataset:")


def test_exit_code_label_error(tmp_path, capsys):
    manifest = make_toy_dataset(tmp_path / "toy", num_images=2, num_classes=2,
                                image_size=64)
    lbl = next((tmp_path / "toy" / "labels" / "train").glob("*.txt"))
    lbl.write_text("40 0.5 0.5 0.2 0.2\n")
    code = cli.main(["train", "--data", str(manifest), "--out", str(tmp_path / "x"),
                     "--epochs", "1", "--input-size", "64", "--width-mult", "0.0625",
                     "--num-classes", "2", "--quiet"])
    assert code == 3
    err = capsys.readouterr().err
    assert "class 40" in err


def test_exit_code_corrupt_checkpoint(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((workspace["run"] / "last.ckpt").read_bytes())
    raw[-50] ^= 0xFF
    bad.write_bytes(bytes(raw))
    code = cli.main(["eval", "--weights", str(bad),
                     "--data", str(workspace["manifest"])])
    assert code == 5
    assert capsys.readouterr().err.startswith("error: checkpoint:")


def test_exit_code_undecodable_image(workspace, tmp_path, capsys):
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"this is not an image at all")
    code = cli.main([
        "infer", "--weights", str(workspace["run"] / "last.ckpt"),
        "--input", str(junk), "--out", str(tmp_path / "o"),
    ])
    assert code == 6
    assert capsys.readouterr().err.startswith("error: decode:")


def test_exit_code_class_count_mismatch(workspace, tmp_path, capsys):
    # manifest has 2 classes; model asks for 5
    code = cli.main([
        "train", "--data", str(workspace["manifest"]), "--out", str(tmp_path / "x"),
        "--num-classes", "5", "--input-size", "64", "--width-mult", "0.0625",
        "--quiet",
    ])
    assert code == 2


def test_argparse_usage_error_is_exit_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["eval"])  # missing required flags
    assert e.value.code == 2


def test_config_value_coercion(tmp_path, workspace):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(
        "width_mult = 0.0625\ninput_size = 64\nnum_classes = 2\n"
        "epochs = 1\nbatch_size = 2\naugment = false\nstage_depths = 3,6,9,3\n"
    )
    model_cfg, train_cfg, run = cli.resolve_run_config(str(cfg), {})
    assert model_cfg.width_mult == 0.0625
    assert model_cfg.stage_depths == (3, 6, 9, 3)
    assert train_cfg.augment is False
    assert train_cfg.epochs == 1
