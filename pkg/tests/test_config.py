import pytest

from inception_mamba.config import HELP, ConfigError, RunConfig, load, parse_text
from inception_mamba.data import BlobSpec
from inception_mamba.model import ModelConfig
from inception_mamba.training import TrainPlan


def test_defaults():
    rc = parse_text("")
    assert rc.model == ModelConfig() and rc.plan == TrainPlan() and rc.blobs == BlobSpec()
    assert rc.precision == "float64"


def test_every_key_is_documented():
    assert set(RunConfig().items()) == set(HELP)


def test_dump_roundtrip():
    rc = parse_text("c_dec=12\nuse_fcm=false\nimm_order=mamba,identity,square,band_row,band_col\n"
                    "train_seed=4\nseed=9\ndata_seed=2\nlr=0.01\nprecision=float32\n")
    assert parse_text(rc.dump()) == rc
    assert rc.model.seed == 9 and rc.plan.seed == 4 and rc.blobs.seed == 2
    assert rc.model.imm_order[0] == "mamba" and not rc.model.use_fcm


def test_comments_and_blank_lines(tmp_path):
    (tmp_path / "r.cfg").write_text("# note\n\n  epochs = 3  \n")
    assert load(tmp_path / "r.cfg").plan.epochs == 3


@pytest.mark.parametrize("text, needle", [
    ("bogus=1", "bogus"), ("epochs=1.5", "epochs"), ("use_fcm=maybe", "use_fcm"), ("folds=1", "folds"),
    ("input_h=40", "input size"), ("data_radius_min=abc", "data_radius_min"), ("x", "line 1"),
])
def test_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_text(text)
