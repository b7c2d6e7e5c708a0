import pytest

from sdanet.config import ConfigError, RunConfig, parse_config_text, parse_overrides


def test_parse_text_with_comments():
    vals = parse_config_text("# header\nlr = 0.01\n\nbatch-size=4  # inline\n")
    assert vals == {"lr": "0.01", "batch_size": "4"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("lr=1\nnonsense\n")


def test_parse_overrides():
    assert parse_overrides(["--lr", "0.1", "--max-adapt-iters=3"]) == {"lr": "0.1", "max_adapt_iters": "3"}
    with pytest.raises(ConfigError):
        parse_overrides(["--lr"])
    with pytest.raises(ConfigError):
        parse_overrides(["lr", "1"])


def test_flags_override_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("lr=0.01\nepochs=3\nshift_gamma=2.5\nband_means=0.1,0.3,0.5,0.7,0.9\n")
    rc = RunConfig.load(p, {"epochs": "7"})
    tc = rc.train_config()
    assert tc.lr == 0.01 and tc.epochs == 7
    assert rc.shift_config().gamma == 2.5
    assert rc.phantom_config().band_means == (0.1, 0.3, 0.5, 0.7, 0.9)
    assert rc.sources["epochs"] == "flag" and rc.sources["lr"] == str(p)


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lrr"):
        RunConfig.load(overrides={"lrr": "1"})
    with pytest.raises(FileNotFoundError):
        RunConfig.load(tmp_path / "nope.cfg")


def test_bad_values():
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig.load(overrides={"epochs": "many"})
    with pytest.raises(ValueError):
        RunConfig.load(overrides={"first_kernel": "5"}).train_config()
    assert RunConfig.load(overrides={"shift_speckle": "yes"}).shift_config().speckle is True


def test_echo_lists_every_field_once():
    rc = RunConfig.load(overrides={"seed": "4"})
    lines = rc.echo(rc.train_config(), rc.phantom_config())
    keys = [ln.split("=", 1)[0] for ln in lines]
    assert len(keys) == len(set(keys))
    assert "seed=4  # flag" in lines
    assert "lr=0.001  # default" in lines
