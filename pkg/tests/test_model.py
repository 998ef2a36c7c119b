import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outmpc.model import (
    DESK1, Measurement, ModelError, UncertainSystem, config_from_dict, config_hash, desk1, ds_contains,
    load_config, make_diag_S, validate,
)


def _kinds(cfg_overrides=None, sys_kwargs=None):
    try:
        c = desk1(**(cfg_overrides or {}))
    except ModelError as exc:
        return [k for k, _ in exc.report]
    sys = c.sys
    if sys_kwargs:
        sys = UncertainSystem(**{**sys.__dict__, **sys_kwargs})
    return [k for k, _ in validate(sys, c.spec, raise_on_error=False)]


def test_desk1_is_valid():
    c = desk1()
    assert validate(c.sys, c.spec) == []
    assert (c.sys.nx, c.sys.ny, c.sys.nu, c.sys.np_, c.sys.nna) == (2, 1, 1, 1, 1)
    assert np.array_equal(c.u_prev0, [0.0])


def test_non_canonical_output():
    assert _kinds(sys_kwargs={"c": np.array([[0.0, 1.0]])}) == ["C-not-canonical"]


def test_ru_zero_rejected():
    assert "R_u-not-PD" in _kinds({"ru": [[0.0]]})


def test_full_state_output_rejected():
    assert "ny-not-less-than-nx" in _kinds({"ny": 2})


def test_dimension_and_bound_errors():
    assert "dimension-mismatch" in _kinds({"g": [[0.05, 0.0], [0.1, 0.0]], "dq": [[0.05, 0.0, 0.0]]})
    assert "invalid-bound" in _kinds({"du_max": 0.0})
    assert "invalid-horizon" in _kinds({"horizon": 0})
    assert "R_x-not-PSD" in _kinds({"rx": [[1.0, 0.0], [0.0, -1.0]]})
    assert "S-not-PSD" in _kinds({"s": [[-1.0]]})
    assert sorted(_kinds({"ru": [[0.0]], "du_max": -1.0})) == ["R_u-not-PD", "invalid-bound"]


def test_ds_contains_examples():
    c = desk1()
    assert ds_contains(c.spec, [5.0, 0.0])
    assert not ds_contains(desk1(s=[[1.0]]).spec, [0.0, 1.5])
    assert ds_contains(desk1(s=[[4.0]]).spec, [0.0, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 10), st.floats(0.1, 5))
def test_ds_contains_scale_consistent(xa, xna, s, alpha):
    a = desk1(s=[[s]]).spec
    b = desk1(s=[[s / alpha**2]]).spec
    lhs = ds_contains(a, [xa, xna])
    q = s * xna**2
    if abs(q - 1.0) > 1e-9:
        assert lhs == ds_contains(b, [alpha * xa, alpha * xna])


def test_make_diag_S_examples():
    assert np.array_equal(make_diag_S([1.0]), [[1.0]])
    S = make_diag_S([1.0, 1.0])
    corner = np.ones(2)
    assert corner @ S @ corner == pytest.approx(1.0)
    with pytest.raises(ModelError) as ei:
        make_diag_S([0.0])
    assert ei.value.kind == "nonpositive-bound"
    with pytest.raises(ModelError):
        make_diag_S([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=4))
def test_make_diag_S_contains_box(bounds):
    S = make_diag_S(bounds)
    b = np.array(bounds)
    for signs in np.array(np.meshgrid(*[[-1, 1]] * len(b))).reshape(len(b), -1).T:
        x = signs * b
        assert x @ S @ x <= 1.0 + 1e-12


def test_config_roundtrip_and_hash(tmp_path):
    p = tmp_path / "plant.json"
    p.write_text(json.dumps(DESK1))
    cfg = load_config(p)
    assert cfg.digest() == config_hash(DESK1)
    assert config_hash(dict(reversed(list(DESK1.items())))) == config_hash(DESK1)
    assert config_hash({**DESK1, "u_max": 2.0}) != config_hash(DESK1)


def test_config_rejects_unknown_and_missing_keys():
    with pytest.raises(ModelError) as ei:
        config_from_dict({**DESK1, "gamma": 1.0})
    assert ei.value.kind == "unknown-key"
    d = dict(DESK1)
    del d["s"]
    with pytest.raises(ModelError):
        config_from_dict(d)


def test_measurement_rejects_nan():
    with pytest.raises(ModelError):
        Measurement([np.nan], [0.0])
