import io
import json
import logging
import math
import subprocess
import sys

import pytest

from fedshield import get_preset, load_config
from fedshield.cli import configure_logging, main, list_presets, read_rounds_csv
from fedshield.config import PRESETS, ConfigError, config_from_dict, preset_id

SMALL = """
preset = "tlfa_iid"
num_rounds = 12
seed = 4

[attack]
active_rounds = [3, 12]
"""


@pytest.fixture
def small_toml(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_toml_overlays_preset(small_toml):
    cfg = load_config(small_toml)
    assert cfg.num_rounds == 12 and cfg.seed == 4
    assert cfg.attack.kind == "tlfa" and cfg.attack.active_rounds == (3, 12)
    assert cfg.training.learning_rate == get_preset("tlfa_iid").training.learning_rate


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"num_round": 3})
    with pytest.raises(ConfigError):
        config_from_dict({"attack": {"kindd": "tlfa"}})
    with pytest.raises(ConfigError):
        config_from_dict({"attack": 3})
    bad = tmp_path / "bad.toml"
    bad.write_text("num_rounds = [")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert main(["run", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_presets_are_versioned_and_immutable():
    assert all(preset_id(n).endswith("@v1") for n in PRESETS)
    with pytest.raises(TypeError):
        PRESETS["tlfa_iid"] = {}
    a = get_preset("tlfa_iid")
    with pytest.raises(Exception):
        a.num_rounds = 3
    assert get_preset("tlfa_iid") == a
    with pytest.raises(ConfigError):
        get_preset("does_not_exist")


def test_list_presets(capsys):
    buf = io.StringIO()
    list_presets(buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == len(PRESETS) and all("@v1" in l for l in lines)
    assert main(["--list-presets"]) == 0
    assert capsys.readouterr().out.splitlines() == lines


def test_run_writes_outputs_consistent_with_each_other(small_toml, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(small_toml), "--out", str(out)]) == 0
    rows = read_rounds_csv(out / "rounds.csv")
    summary = json.loads((out / "summary.json").read_text())
    assert [int(r["round"]) for r in rows] == list(range(1, 13))
    assert summary["summary_rounds"] == list(range(3, 13))
    for k, v in summary["mean"].items():
        vals = [r[k] for r in rows if 3 <= r["round"] and not math.isnan(r[k])]
        if vals:
            assert v == pytest.approx(math.fsum(vals) / len(vals), rel=1e-12)
        else:
            assert v is None
    assert summary["version"] == "v0.1.0" and summary["config"]["seed"] == 4


@pytest.mark.slow
def test_console_script_reruns_are_byte_identical(small_toml, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        subprocess.run([sys.executable, "-m", "fedshield.cli", "run", "--config", str(small_toml),
                        "--out", str(out)], check=True)
        outs.append(out)
    for f in ("rounds.csv", "summary.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_preset_and_override_flags(tmp_path):
    out = tmp_path / "p"
    assert main(["run", "--preset", "benign_iid", "--seed", "1", "--defense", "fedavg", "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["preset"] == "benign_iid@v1" and s["config"]["defense"] == "fedavg"


@pytest.mark.parametrize("seed", ["-1", str(2 ** 64)])
def test_out_of_range_seed_fails(seed, tmp_path, capsys):
    assert main(["run", "--preset", "tlfa_iid", "--seed", seed, "--out", str(tmp_path)]) == 1
    assert "seed" in capsys.readouterr().err


def test_no_command_is_a_usage_error():
    assert main([]) == 2


def test_conflicting_sources_rejected(small_toml):
    with pytest.raises(SystemExit):
        main(["run", "--config", str(small_toml), "--preset", "tlfa_iid"])


@pytest.mark.parametrize("value,level", [(None, logging.ERROR), ("info", logging.INFO),
                                         ("DEBUG", logging.DEBUG), ("error", logging.ERROR)])
def test_log_levels(value, level):
    env = {} if value is None else {"FEDSHIELD_LOG": value}
    assert configure_logging(env) == level
    assert logging.getLogger("fedshield").level == level


def test_unknown_log_level_warns(capsys):
    assert configure_logging({"FEDSHIELD_LOG": "loud"}) == logging.ERROR
    assert "loud" in capsys.readouterr().err
