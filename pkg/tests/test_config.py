import json

import numpy as np
import pytest

from pcroa import config
from pcroa.basis import BasisFamily
from pcroa.errors import ConfigError, ParseError


def minimal(**extra):
    raw = {
        "system": {"states": ["x1", "x2"],
                   "params": [{"name": "c", "dist": "uniform", "low": 0.7, "high": 1.3}],
                   "rhs": ["-x2", "x1 - c*x2"]},
        "pce": {"p": 2},
    }
    raw.update(extra)
    return raw


@pytest.mark.parametrize("name, n, fam", [("vdp.json", 2, BasisFamily.LEGENDRE),
                                           ("forced_cubic.json", 2, BasisFamily.LEGENDRE)])
def test_bundled_configs_load(name, n, fam):
    cfg = config.load_config(name)
    assert cfg.system.n == n and cfg.family is fam
    assert len(cfg.hash) == 16


def test_hash_ignores_key_order():
    a = minimal()
    b = json.loads(json.dumps(a, sort_keys=True))
    assert config.config_hash(a) == config.config_hash(dict(reversed(list(b.items()))))
    assert config.config_hash(a) != config.config_hash(minimal(name="other"))


def test_family_defaults_from_params():
    cfg = config.build(minimal())
    assert cfg.family is BasisFamily.LEGENDRE
    raw = minimal()
    raw["system"]["params"] = [{"name": "c", "dist": "gaussian", "mean": 1.0, "std": 0.1}]
    assert config.build(raw).family is BasisFamily.HERMITE


def test_uniform_bounds_rejected():
    raw = minimal()
    raw["system"]["params"][0].update(low=1.3, high=0.7)
    with pytest.raises(ConfigError):
        config.build(raw)


@pytest.mark.parametrize("patch", [
    lambda r: r.update(extra=1),
    lambda r: r["pce"].update(order=3),
    lambda r: r["system"]["params"][0].update(shape=2.0),
    lambda r: r.update(roa={"deg_V": 3}),
    lambda r: r.update(validate={"outer_scales": [0.5]}),
    lambda r: r["pce"].pop("p"),
])
def test_schema_rejects(patch):
    raw = minimal()
    patch(raw)
    with pytest.raises(ConfigError) as exc:
        config.build(raw)
    assert exc.value.code == "schema"


def test_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps(minimal()))
    cfg = config.load_config(f, {"pce.p": 4, "roa.deg_V": 4, "validate.seed": None})
    assert cfg.p == 4 and cfg.section("roa")["deg_V"] == 4
    assert cfg.section("validate")["seed"] == 0
    assert config.load_config(f).hash != cfg.hash


def test_sweep_scalar_and_matrix():
    cfg = config.build(minimal(recover={"sweep": [0.0, 0.01, [[0.02, 0.001], [0.001, 0.03]]]}))
    s = cfg.sweep()
    assert np.array_equal(s[0], np.zeros((2, 2)))
    assert np.array_equal(s[1], 0.01 * np.eye(2))
    assert s[2][0, 1] == 0.001
    assert np.array_equal(config.build(minimal()).sweep()[0], np.zeros((2, 2)))


@pytest.mark.parametrize("sig, code", [([[0.1]], "shape"), ([[0.1, 0.0], [0.01, 0.1]], "not_symmetric")])
def test_bad_covariance(sig, code):
    with pytest.raises(ConfigError) as exc:
        config.build(minimal(recover={"sigma2": sig}))
    assert exc.value.code == code


def test_rhs_count_mismatch():
    raw = minimal()
    raw["system"]["rhs"].append("x1")
    with pytest.raises(ConfigError) as exc:
        config.build(raw)
    assert exc.value.code == "dimension"


def test_mean_start_length():
    with pytest.raises(ConfigError):
        config.build(minimal(simulate={"mean_start": [1.0]}))


def test_parse_error_position():
    raw = minimal()
    raw["system"]["rhs"][1] = "x1 - c*x2 +* x1"
    with pytest.raises(ParseError) as exc:
        config.build(raw)
    assert "system/rhs/1" in str(exc.value)
    assert exc.value.position is not None and 9 <= exc.value.position <= 12


def test_undeclared_symbol():
    raw = minimal()
    raw["system"]["rhs"][0] = "-x2 + k"
    with pytest.raises(ConfigError):
        config.build(raw)


def test_invalid_json(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{"system": ')
    with pytest.raises(ConfigError) as exc:
        config.load_config(f)
    assert exc.value.code == "json" and "line 1" in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        config.load_config(tmp_path / "nowhere.json")
    assert exc.value.code == "missing"
