import pytest

from tqground.config import RunConfig, format_config, load_config, parse_config
from tqground.timeline import ValidationError


def test_defaults_match_the_published_recipe():
    cfg = RunConfig()
    t = cfg.train
    assert (t.batch_size, t.lr, t.lr_after, t.lr_drop_epoch) == (16, 1e-3, 2e-4, 10)
    assert (t.adam_beta1, t.adam_beta2, t.adam_eps) == (0.9, 0.999, 1e-8)
    assert (cfg.loss.lambda1, cfg.loss.lambda2) == (0.5, 0.25)
    assert (cfg.wsqg.alpha, cfg.wsqg.scoring, cfg.wsqg.refine) == (0.5, "mean", True)
    assert cfg.synth.fps == 0.5


def test_parse_values_and_comments():
    cfg = parse_config("""
        # comment line
        lr = 0.01   # trailing comment
        refine = false
        scales = 2, 3
        synth_seed = 9
        seed = 4
        alpha = 0.25
    """)
    assert cfg.train.lr == 0.01 and cfg.wsqg.refine is False and cfg.train.scales == (2, 3)
    assert cfg.synth.seed == 9 and cfg.train.seed == 4 and cfg.wsqg.alpha == 0.25


def test_round_trip():
    cfg = parse_config("epochs = 3\nlambda2 = 0.5\nscoring = sum\nnoise = 0.1\n")
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text, match", [
    ("bogus = 1", "unknown config key 'bogus'"),
    ("lr 0.1", "expected 'key = value'"),
    ("epochs = many", "cannot parse"),
    ("scoring = max", "scoring"),
    ("alpha = -1", "alpha"),
])
def test_bad_config(text, match):
    with pytest.raises(ValidationError, match=match):
        parse_config(text)


def test_unknown_key_reports_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr = 0.1\nnope = 2\n")
    with pytest.raises(ValidationError, match=r"c.cfg:2"):
        load_config(p)


def test_missing_file():
    with pytest.raises(ValidationError, match="cannot read config"):
        load_config("/nonexistent/c.cfg")
