from pathlib import Path

import pytest

from magshape.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from magshape.mesh import MeshError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_shipped_default_is_the_builtin_default():
    cfg = load_config(CONFIGS / "default.cfg")
    assert cfg.with_output(RunConfig().output.directory) == RunConfig()


def test_empty_text_gives_defaults():
    assert parse_config("") == RunConfig()


def test_round_trip():
    cfg = parse_config("[target]\namplitude = 0.7\nharmonic = 8\n[run]\nseed = 5\n[solver]\nnewton_tol = 1e-9  # tighter\n")
    assert cfg.target.amplitude == 0.7 and cfg.target.harmonic == 8 and cfg.seed == 5
    assert cfg.solver.newton_tol == 1e-9
    assert parse_config(dump_config(cfg)) == cfg
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


def test_floats_survive_exactly():
    cfg = parse_config("[material]\neps = 0.1\nc = 3799.9999999999995\n")
    again = parse_config(dump_config(cfg))
    assert again.material.c == 3799.9999999999995 and again.material.eps == 0.1


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("[nonsense]\nx = 1\n", "unknown section"),
        ("[target]\nfrequency = 3\n", "unknown key 'frequency'"),
        ("[run]\nseeds = 1\n", "[run] unknown key"),
        ("[target]\nharmonic = four\n", "cannot parse 'four' as int"),
        ("[solver]\nnewton_tol = -1\n", "solver tolerances"),
        ("[target]\nharmonic = 0\n", "harmonic"),
        ("[alpha]\nnear = 0\n", "alpha values"),
        ("[optimizer]\ntau_min_factor = 0\n", "optimizer factors"),
        ("[material]\nn_samples = 1\n", "n_samples"),
        ("key = 1\n", "malformed config"),
    ],
)
def test_invalid_configs(text, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert fragment in str(info.value)


def test_bad_geometry_is_reported():
    with pytest.raises(MeshError, match="gamma0_radius"):
        parse_config("[geometry]\ngamma0_radius = 0.05\n")


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config("/nonexistent/run.cfg")


def test_hash_and_seed():
    a, b = RunConfig(), parse_config(dump_config(RunConfig()))
    assert a.hash() == b.hash() and len(a.hash()) == 64
    assert a.with_seed(3).hash() != a.hash()
    assert a.with_seed(3).seed == 3 and a.seed == 0
    assert a.with_output("x").output.directory == "x"
