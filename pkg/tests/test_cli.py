import csv
import hashlib
import subprocess
import sys

import numpy as np
import pytest

from inception_mamba import cli
from inception_mamba.config import HELP
from inception_mamba.data import read_mask, write_image
from inception_mamba.gradcheck import GradReport
from inception_mamba.model import init_params, toy_config

TOY_CONFIG = """\
# toy widths on 32x32 images
input_h=32
input_w=32
stem_channels=8
stage_channels=8,12,16
c_bottleneck=10
c_dec=10
band_k=5
ssm_n_state=4
epochs=1
batch_size=4
data_image_size=32
data_radius_min=4
data_radius_max=8
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def sha(paths):
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "toy.cfg").write_text(TOY_CONFIG)
    assert run("gen-data", "--spec", root / "toy.cfg", "--out", root / "data", "--n", 5) == 0
    return root


def test_gen_data_writes_corpus(workspace):
    data = workspace / "data"
    assert len(list((data / "images").glob("*.ppm"))) == 5 and len(list((data / "masks").glob("*.pgm"))) == 5
    assert len((data / "manifest.tsv").read_text().splitlines()) == 5


def test_gen_data_four_and_checksums(workspace, tmp_path, capsys):
    for out in ("a", "b"):
        assert run("gen-data", "--spec", workspace / "toy.cfg", "--out", tmp_path / out, "--n", 4) == 0
    assert "foreground_fraction" in capsys.readouterr().out
    files = {out: [p for p in (tmp_path / out).rglob("*") if p.is_file()] for out in ("a", "b")}
    assert len(files["a"]) == 9
    assert sha(files["a"]) == sha(files["b"])


@pytest.mark.parametrize("line, key", [("data_radius_max=40", "data_radius_max"),
                                       ("data_radius_min=0", "data_radius_min"),
                                       ("data_clutter_density=2", "data_clutter_density")])
def test_gen_data_invalid_spec(tmp_path, capsys, line, key):
    (tmp_path / "bad.cfg").write_text(TOY_CONFIG + line + "\n")
    assert run("gen-data", "--spec", tmp_path / "bad.cfg", "--out", tmp_path / "o", "--n", 2) == 2
    err = capsys.readouterr().err
    assert key in err and len(err.strip().splitlines()) == 1


def test_train_single_model(workspace, tmp_path):
    assert run("train", "--config", workspace / "toy.cfg", "--data", workspace / "data" / "manifest.tsv",
               "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "model_log.csv").open()))
    assert len(rows) == 1 and list(rows[0]) == ["epoch", "train_loss", "val_dice", "val_iou", "wall_ms"]
    assert (tmp_path / "model.ckpt").is_file() and is_png(tmp_path / "model_curves.png")


def test_train_is_reproducible(workspace, tmp_path):
    losses = []
    for out in ("a", "b"):
        run("train", "--config", workspace / "toy.cfg", "--data", workspace / "data" / "manifest.tsv",
            "--out", tmp_path / out, "--epochs", 2)
        losses.append(list(csv.DictReader((tmp_path / out / "model_log.csv").open()))[-1]["train_loss"])
        assert (tmp_path / out / "model.ckpt").read_bytes() == (tmp_path / "a" / "model.ckpt").read_bytes()
    assert losses[0] == losses[1]


@pytest.fixture(scope="module")
def folds(workspace):
    out = workspace / "cv"
    assert run("train", "--config", workspace / "toy.cfg", "--data", workspace / "data" / "manifest.tsv",
               "--out", out, "--folds", 5) == 0
    return out


def test_cross_validation_outputs(folds):
    rows = list(csv.DictReader((folds / "cv_summary.csv").open()))
    assert len(rows) == 5 and all((folds / r["checkpoint"]).is_file() for r in rows)
    vals = [set(r["val_indices"].split()) for r in rows]
    assert all(not a & b for i, a in enumerate(vals) for b in vals[i + 1:])
    assert set().union(*vals) == {str(i) for i in range(5)}
    assert is_png(folds / "cv_curves.png")


def test_folds_out_of_range(workspace, tmp_path, capsys):
    assert run("train", "--config", workspace / "toy.cfg", "--data", workspace / "data" / "manifest.tsv",
               "--out", tmp_path, "--folds", 9) == 2
    assert "--folds" in capsys.readouterr().err


def test_eval_report_and_ensemble_idempotence(workspace, folds, tmp_path):
    ckpt, manifest = folds / "r0_f0.ckpt", workspace / "data" / "manifest.tsv"
    assert run("eval", "--ckpts", ckpt, "--data", manifest, "--report", tmp_path / "one.csv") == 0
    assert run("eval", "--ckpts", ckpt, ckpt, "--data", manifest, "--report", tmp_path / "two.csv") == 0
    assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()
    assert is_png(tmp_path / "one_dice.png")
    rows = list(csv.reader((tmp_path / "one.csv").open()))
    assert rows[0] == ["id", "dice", "iou", "hd95"] and len(rows) == 5 + 4


def test_converged_model_fits_its_training_sample(workspace, tmp_path):
    extra = "epochs=60\nbatch_size=1\nval_fraction=0\nlr=0.003\naugment_rotate=false\naugment_flip=false\n"
    (tmp_path / "fit.cfg").write_text(TOY_CONFIG + extra)
    first = (workspace / "data" / "manifest.tsv").read_text().splitlines()[0]
    (tmp_path / "one.tsv").write_text(first.replace("\timages/", f"\t{workspace}/data/images/")
                                      .replace("\tmasks/", f"\t{workspace}/data/masks/") + "\n")
    assert run("train", "--config", tmp_path / "fit.cfg", "--data", tmp_path / "one.tsv", "--out", tmp_path) == 0
    assert run("eval", "--ckpts", tmp_path / "model.ckpt", "--data", tmp_path / "one.tsv",
               "--report", tmp_path / "r.csv") == 0
    dice = float(list(csv.reader((tmp_path / "r.csv").open()))[1][1])
    assert dice > 0.95


def test_infer_writes_readable_mask(folds, tmp_path, capsys):
    image = np.random.default_rng(0).integers(0, 256, (3, 48, 40)) / 255.0
    write_image(tmp_path / "x.ppm", image)
    args = ("infer", "--ckpts", folds / "r0_f0.ckpt", folds / "r0_f1.ckpt", "--image", tmp_path / "x.ppm")
    assert run(*args, "--out", tmp_path / "m.pgm") == 0
    mask = read_mask(tmp_path / "m.pgm")
    assert mask.shape == (48, 40) and set(np.unique(mask)) <= {0, 1}
    assert run(*args, "--out", tmp_path / "m2.pgm") == 0
    assert (tmp_path / "m.pgm").read_bytes() == (tmp_path / "m2.pgm").read_bytes()


def test_mixed_class_counts_rejected(folds, tmp_path, capsys):
    from inception_mamba.model import Checkpoint, save_checkpoint
    three = toy_config(num_classes=3)
    save_checkpoint(tmp_path / "three.ckpt", Checkpoint.from_store(three, init_params(three)))
    write_image(tmp_path / "x.ppm", np.zeros((3, 32, 32)))
    code = run("infer", "--ckpts", folds / "r0_f0.ckpt", tmp_path / "three.ckpt", "--image", tmp_path / "x.ppm",
               "--out", tmp_path / "m.pgm")
    assert code == 2 and "class count" in capsys.readouterr().err


@pytest.mark.parametrize("content", [b"not a checkpoint", None])
def test_bad_checkpoint_paths(workspace, tmp_path, capsys, content):
    path = tmp_path / "x.ckpt"
    if content is not None:
        path.write_bytes(content)
    assert run("eval", "--ckpts", path, "--data", workspace / "data" / "manifest.tsv",
               "--report", tmp_path / "r.csv") == 2
    assert capsys.readouterr().err.startswith("inception-mamba: error:")


def test_position_sweep(workspace, tmp_path, capsys):
    args = ("train", "--config", workspace / "toy.cfg", "--data", workspace / "data" / "manifest.tsv",
            "--sweep-imm-position")
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    rows = list(csv.DictReader((tmp_path / "a" / "imm_position.csv").open()))
    assert [r["position"] for r in rows] == ["first", "second", "third"]
    assert sorted(r["rank"] for r in rows) == ["1", "2", "3"]
    assert (tmp_path / "a" / "imm_position.csv").read_text() == (tmp_path / "b" / "imm_position.csv").read_text()
    assert is_png(tmp_path / "a" / "imm_position.png")


def test_gradcheck_passes_on_toy_config(workspace, capsys):
    assert run("gradcheck", "--config", workspace / "toy.cfg") == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 11 and all(line.split()[3] == "ok" for line in lines)


def test_gradcheck_failure_exits_nonzero(monkeypatch, capsys):
    monkeypatch.setattr(cli, "block_suite", lambda cfg, seed: {"conv": GradReport(2e-5, "w[0]", 1)})
    assert run("gradcheck") == 1
    assert "exceeded" in capsys.readouterr().err


def test_count_single_pointwise_row(tmp_path, capsys):
    # a 16x16 input leaves an 8x8 stem; its 5->10 skip projection is a 3200-MAC 1x1 conv
    (tmp_path / "c.cfg").write_text("input_h=16\ninput_w=16\nstem_channels=5\nc_dec=10\n")
    assert run("count", "--config", tmp_path / "c.cfg", "--csv", tmp_path / "c.csv") == 0
    rows = {r["layer"]: r for r in csv.DictReader((tmp_path / "c.csv").open())}
    assert rows["skip"]["macs"] == "3200" and rows["skip"]["kind"] == "conv"
    out = capsys.readouterr().out
    assert f"registry params {rows['total']['params']}" in out


def test_count_registry_matches_model(workspace, capsys):
    assert run("count", "--config", workspace / "toy.cfg", "--input", 64) == 0
    out = capsys.readouterr().out
    total = next(line for line in out.splitlines() if line.startswith("total")).split()[1]
    assert f"registry params {total}" in out and "input 64x64" in out
    assert int(total) == init_params(toy_config()).count()


def test_count_rejects_bad_input(capsys):
    assert run("count", "--input", 50) == 2


@pytest.mark.parametrize("command", ["gen-data", "train", "eval", "infer", "gradcheck", "count", "config"])
def test_help_lists_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        run(command, "--help")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in out
        if action.default not in (None, False) and action.option_strings and action.dest != "help":
            assert f"(default: {action.default})" in out


def test_dump_defaults_documents_every_key(capsys):
    assert run("config", "--dump-defaults") == 0
    out = capsys.readouterr().out
    keys = [line.split("=")[0] for line in out.splitlines() if not line.startswith("#")]
    assert keys == list(HELP) and out.count("# ") == len(HELP)


def test_dumped_defaults_parse_back(tmp_path, capsys):
    run("config", "--dump-defaults")
    (tmp_path / "d.cfg").write_text(capsys.readouterr().out)
    assert run("config", "--check", tmp_path / "d.cfg") == 0


@pytest.mark.parametrize("text, needle", [("colour=red\n", "colour"), ("epochs=many\n", "epochs"),
                                         ("c_dec=x\n", "c_dec"), ("just words\n", "line 1"),
                                         ("precision=float16\n", "precision")])
def test_config_errors_name_the_key(tmp_path, capsys, text, needle):
    (tmp_path / "bad.cfg").write_text(text)
    assert run("config", "--check", tmp_path / "bad.cfg") == 2
    assert needle in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "inception_mamba", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
