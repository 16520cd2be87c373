import csv

import pytest
from hypothesis import given, settings, strategies as st

from macpf.cli import main
from macpf.config import VARIANTS, ConfigError, ExperimentConfig, bundled_config_path, parse_pairs

TINY = """\
# small matrix-game run
env = matrix_game
variant = macpf
seeds = 0,1
episodes = 40
eval_interval = 20
eval_episodes = 10
batch_size = 8
hidden = 8
correction_hidden = 8
hyper_hidden = 8
mixer_embed = 4
"""


@settings(max_examples=40)
@given(st.sampled_from(VARIANTS), st.lists(st.integers(0, 999), min_size=1, max_size=5, unique=True),
       st.integers(1, 50_000), st.floats(1e-6, 1.0), st.booleans(), st.sampled_from(["mixer", "shared"]))
def test_config_round_trip(variant, seeds, episodes, lr, zero, temp):
    cfg = ExperimentConfig(variant=variant, seeds=tuple(seeds), episodes=episodes, lr=lr,
                           zero_init_corrections=zero, local_temperature=temp)
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


def test_parse_comments_and_errors():
    assert parse_pairs("a = 1  # note\n\n# only comment\nb=x") == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError, match="line 2"):
        parse_pairs("a = 1\nbroken")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_pairs("a = 1\na = 2")
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.loads("colour = red")
    with pytest.raises(ConfigError, match="bad value"):
        ExperimentConfig.loads("episodes = many")


def test_overrides_win():
    cfg = ExperimentConfig.loads(TINY, ["seeds=1", "lr = 0.01"])
    assert cfg.seeds == (1,) and cfg.lr == 0.01


def test_bundled_configs_load():
    for name in ("matrix_game", "point_mass"):
        cfg = ExperimentConfig.load(bundled_config_path(name))
        assert cfg.env == name
    mg = ExperimentConfig.load(bundled_config_path("matrix_game"))
    assert (mg.lr, mg.batch_size, mg.alpha_init, mg.alpha_final, mg.alpha_decay) == (3e-4, 64, 1.0, 0.5, 0.999)
    assert mg.target_interval == 200 and len(mg.seeds) == 5


def test_unknown_variant_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(TINY.replace("variant = macpf", "variant = fop"))
    assert main(["train", str(path)]) == 1
    assert "unknown variant" in capsys.readouterr().err


def test_usage_error_exits_1():
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 1


def test_train_and_export(tmp_path, capsys):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    out = tmp_path / "run"
    assert main(["train", str(path), "--override", "seeds=1", "--out", str(out)]) == 0
    assert (out / "metrics_seed1.csv").exists() and not (out / "metrics_seed0.csv").exists()
    assert "dep_greedy" in capsys.readouterr().out

    assert main(["export", str(out), "learning-curve"]) == 0
    rows = list(csv.reader(open(out / "learning_curve.csv")))
    assert rows[0][:3] == ["episode", "n_seeds", "dep_mean"] and [r[0] for r in rows[1:]] == ["20", "40"]

    assert main(["export", str(out), "joint-policy-table", "--out", str(tmp_path / "t.csv")]) == 0
    table = list(csv.reader(open(tmp_path / "t.csv")))
    assert table[0] == ["a1\\a2", "A", "B", "C", "D"]
    assert sum(float(x) for r in table[1:] for x in r[1:]) == pytest.approx(1.0, abs=1e-5)

    assert main(["export", str(out), "trajectories"]) == 1
    assert main(["export", str(tmp_path / "missing"), "learning-curve"]) == 1


def test_output_root_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + "output_dir = runs/x\n")
    monkeypatch.setenv("MACPF_OUT", str(tmp_path / "root"))
    assert main(["train", str(path), "--override", "seeds=0", "--override", "episodes=20"]) == 0
    assert (tmp_path / "root" / "runs" / "x" / "summary.json").exists()


def test_verify_exit_codes(capsys):
    assert main(["verify", "gradients"]) == 0
    assert "all checks passed" in capsys.readouterr().out
    assert main(["verify", "gradients", "--inject-fault", "sign-flip"]) == 2
    assert "FAIL" in capsys.readouterr().out
