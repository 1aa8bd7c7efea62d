import pytest

from dmm.config import ConfigParseError, dump_config, load_config, parse_config
from dmm.train import PAPER_SCHEDULE

GOOD = """
# desk run
dataset = data/shapes.dmmd
out_dir = runs/a
epochs = 12          # short
lr_schedule = 0:1e-3, 5:3e-4
encoder_hidden = 64, 32
N = 8
m = 8
log_recon = false
gamma = 0
"""


def test_parse_good_config():
    rc = parse_config(GOOD)
    assert rc.dataset == "data/shapes.dmmd" and rc.out_dir == "runs/a"
    t = rc.train
    assert t.epochs == 12 and t.lr_schedule == ((0, 1e-3), (5, 3e-4))
    assert t.dims.encoder_hidden == (64, 32) and t.dims.N == 8
    assert t.log_recon is False and t.weights.gamma == 0.0
    assert t.weights.beta == 0.25


def test_unknown_key_reports_line():
    with pytest.raises(ConfigParseError, match=r":3: unknown key 'epohcs'"):
        parse_config("seed = 1\n\nepohcs = 3\n")


@pytest.mark.parametrize("text, line", [
    ("seed = 1\nbatch_size = many\n", 2),
    ("lr_schedule = 0-1e-3\n", 1),
    ("fixed_codebook = maybe\n", 1),
    ("just a line\n", 1),
    ("seed = 1\nseed = 2\n", 2),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigParseError) as err:
        parse_config(text)
    assert err.value.line == line


def test_semantic_validation():
    with pytest.raises(ConfigParseError, match="schedule"):
        parse_config("lr_schedule = 3:1e-3\n")
    with pytest.raises(ConfigParseError):
        parse_config("beta = -1\n")


def test_presets():
    rc = parse_config("", preset="paper")
    assert rc.train.lr_schedule == PAPER_SCHEDULE and rc.train.dims.N == 256
    assert parse_config("preset = paper\nepochs = 3\n").train.epochs == 3
    with pytest.raises(ConfigParseError):
        parse_config("preset = fancy\n")
    # presets do not leak state between parses
    parse_config("N = 8\nm = 8\n")
    assert parse_config("").train.dims.N == 16


def test_dump_round_trip(tmp_path):
    rc = parse_config(GOOD)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(rc))
    back = load_config(path)
    assert back == rc


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="absent.cfg"):
        load_config(tmp_path / "absent.cfg")
