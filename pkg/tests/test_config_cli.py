import subprocess
import sys

import pytest

from ppguide import cli
from ppguide.config import ConfigError, PipelineConfig, dump_config, load_config, parse_config


def test_defaults_follow_stage_fractions():
    cfg = PipelineConfig(policy_epochs=500)
    assert cfg.collect_epochs() == [100, 150, 200, 250, 300]
    assert cfg.eval_epochs() == [450, 500]
    assert cfg.w_sr == pytest.approx(cfg.w_fr / 10)


def test_parse_values_and_comments():
    cfg = parse_config("""
        # toy run
        seed = 3
        strength_values = 0.1, 0.25
        scale_by_sigma = yes   # trailing comment
        schedule = constant
    """)
    assert cfg.seed == 3 and cfg.strength_values == [0.1, 0.25]
    assert cfg.scale_by_sigma is True and cfg.schedule == "constant"
    assert cfg.n_demos == PipelineConfig().n_demos


@pytest.mark.parametrize("text", ["bogus = 1", "seed = abc", "seed", "scale_by_sigma = maybe"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_parse_roundtrip(tmp_path):
    cfg = PipelineConfig(seed=7, tau=1.75, zscore_values=[1.5, 2.0], scale_by_sigma=True)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_show_config(capsys):
    assert cli.main(["show-config", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "seed = 4" in out and "tau = 2.0" in out


def test_unknown_config_key_exits_1(tmp_path, capsys):
    path = tmp_path / "c.txt"
    path.write_text("not_a_key = 1\n")
    assert cli.main(["show-config", "--config", str(path)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert cli.main(["show-config", "--config", str(tmp_path / "nope.txt")]) == 1


def test_unknown_subcommand_exits_1():
    assert cli.main(["frobnicate"]) == 1


def test_missing_artifact_exits_2(tmp_path, capsys):
    assert cli.main(["train-mil", "--out-dir", str(tmp_path)]) == 2
    assert "collect" in capsys.readouterr().err


def test_single_outcome_corpus_exits_2(tmp_path, capsys):
    # untrained checkpoints roll out to little besides failures at these seeds
    cfg = tmp_path / "c.txt"
    cfg.write_text("n_demos = 4\npolicy_epochs = 0\ncollect_fractions = 0,0\nrollout_episodes = 3\n"
                   "eval_fractions = 0\n")
    assert cli.main(["train-policy", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    code = cli.main(["collect", "--config", str(cfg), "--out-dir", str(tmp_path)])
    assert code == 2
    assert "single outcome" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ppguide", "show-config"], capture_output=True, text=True)
    assert proc.returncode == 0 and "policy_epochs" in proc.stdout
