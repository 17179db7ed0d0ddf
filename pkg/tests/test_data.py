import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from partialbridge import simgen
from partialbridge.data import (AnalysisConfig, BoundFn, BoundsSpec, MultiTrialData,
                                ObservationRecord, TrialSample, load_config, load_trials,
                                parse_config, preset_bounds, validate_bounds, write_trials)
from partialbridge.errors import (ConfigError, ConvexityViolation, EmptySample, InvalidOutcome,
                                  InvalidTreatment, MissingColumn, OrderViolation,
                                  PseudoRiskOutOfRange, StarRowHasOutcome)


def _frame(rows):
    return pd.DataFrame(rows, columns=["trial_id", "w", "a", "y"])


def test_roundtrip_is_exact(tmp_path):
    data = simgen.generate_dataset(simgen.SIZES["smaller"], 3)
    path = tmp_path / "d.csv"
    write_trials(data, path)
    back = load_trials(path)
    assert np.array_equal(back.star, data.star)
    for a, b in zip(back.trials, data.trials):
        assert a.trial_id == b.trial_id
        assert np.array_equal(a.w, b.w) and np.array_equal(a.a, b.a) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.l, b.l)


def test_two_phase_roundtrip(tmp_path):
    t = TrialSample("1", [0.1, np.nan, 0.3], [0, 1, 0], [1, 0, 0], delta=[1, 0, 1])
    data = MultiTrialData(np.array([0.2, 0.4]), (t,))
    path = tmp_path / "d.csv"
    write_trials(data, path)
    back = load_trials(path)
    assert back.two_phase
    assert np.array_equal(back.trials[0].delta, [1, 0, 1])
    assert np.isnan(back.trials[0].w[1])


def test_trial_order_follows_file(tmp_path):
    path = tmp_path / "d.csv"
    _frame([("star", 0.5, None, None), ("b", 0.1, 0, 1), ("a", 0.2, 1, 0), ("b", 0.3, 1, 1)]) \
        .to_csv(path, index=False)
    data = load_trials(path)
    assert [t.trial_id for t in data.trials] == ["b", "a"]
    assert data.sizes == (1, 2, 1)
    assert data.n_min == 1


@pytest.mark.parametrize("rows, exc", [
    ([("star", 0.5, 1, None), ("1", 0.1, 0, 1)], StarRowHasOutcome),
    ([("star", 0.5, None, None), ("1", 0.1, 2, 1)], InvalidTreatment),
    ([("star", 0.5, None, None), ("1", 0.1, 0, 0.5)], InvalidOutcome),
    ([("1", 0.1, 0, 1)], EmptySample),
])
def test_load_rejects(tmp_path, rows, exc):
    path = tmp_path / "d.csv"
    _frame(rows).to_csv(path, index=False)
    with pytest.raises(exc):
        load_trials(path)


def test_missing_column(tmp_path):
    path = tmp_path / "d.csv"
    pd.DataFrame({"trial_id": ["star"], "w": [0.1], "a": [None]}).to_csv(path, index=False)
    with pytest.raises(MissingColumn):
        load_trials(path)


def test_schema_renames_columns(tmp_path):
    path = tmp_path / "d.csv"
    pd.DataFrame({"study": ["star", "1"], "marker": [0.5, 0.2], "arm": [None, 1], "case": [None, 0]}) \
        .to_csv(path, index=False)
    data = load_trials(path, schema={"trial_id": "study", "w": "marker", "a": "arm", "y": "case"})
    assert data.trials[0].a[0] == 1


def test_observation_record_rules():
    ObservationRecord(w=None, a=0, y=1, delta=0)
    with pytest.raises(ValueError):
        ObservationRecord(w=0.2, a=0, y=1, delta=0)
    with pytest.raises(ValueError):
        ObservationRecord(w=None, a=0, y=1)
    with pytest.raises(InvalidTreatment):
        ObservationRecord(w=0.1, a=3, y=0)


def test_delta_blanks_unmeasured_w():
    t = TrialSample("1", [0.1, 0.2], [0, 1], [0, 0], delta=[1, 0])
    assert np.isnan(t.w[1])
    assert list(t.observed) == [True, False]
    recs = list(t.records())
    assert recs[1].w is None and recs[0].w == 0.1


def test_bound_fn_table_interpolates_flat():
    f = BoundFn(None, (0.0, 1.0), (0.2, 0.6))
    assert np.allclose(f([-1, 0.5, 2]), [0.2, 0.4, 0.6])
    assert BoundFn.parse({"w": [0, 1], "value": [1, 1]})(0.3) == 1
    with pytest.raises(ValueError):
        BoundFn(None, (1.0, 0.0), (0, 0))


def test_bounds_json_roundtrip():
    spec = preset_bounds("tight", 3)
    again = BoundsSpec.from_json(json.loads(json.dumps(spec.to_json())))
    w = np.linspace(0, 1, 7)
    for a, b in zip(spec.u + spec.ell + spec.v, again.u + again.ell + again.v):
        assert np.array_equal(a(w), b(w))


def test_presets():
    m = validate_bounds(preset_bounds("moderate", 2))
    assert m.path == "univariate" and m.ratio == pytest.approx(1 / 3)
    loose = validate_bounds(preset_bounds("loosest", 2))
    assert loose.path == "univariate" and loose.ratio == 0.0
    with pytest.raises(ValueError):
        preset_bounds("snug")


def test_bivariate_path():
    spec = BoundsSpec(ell=(0, 0.2, 0.1), u=(0, 0.8, 0.9), v=(0, 0.5, 0.5))
    assert validate_bounds(spec).path == "bivariate"


def test_validation_errors():
    with pytest.raises(ConvexityViolation):
        validate_bounds(BoundsSpec(ell=(0, 0), u=(0, 1), v=(0.2, 0.7)))
    with pytest.raises(PseudoRiskOutOfRange):
        validate_bounds(BoundsSpec(ell=(0, 0), u=(0, 1), v=(0.5, 0.5), d0=1.5))
    with pytest.raises(OrderViolation) as info:
        validate_bounds(BoundsSpec(ell=(0.5, 0), u=(0.5, 0), v=(0, 1)))
    assert info.value.w == 0.0


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=5))
def test_convexity_accepts_normalised_weights(raw):
    v = np.array(raw) / np.sum(raw)
    spec = BoundsSpec(ell=(0,) * len(v), u=(0,) + (1,) * (len(v) - 1), v=tuple(v))
    validate_bounds(spec)


def test_config_parse_and_pointers(tmp_path):
    doc = {"bounds": {"preset": "moderate"}, "mu_grid": [0.1, 0.2], "z": 1.96,
           "learners": {"outcome": ["glm"]}, "clips": {"ratio": [0.01, 100]}, "seed": 4}
    bounds, cfg = parse_config(doc)
    assert cfg.mu_grid == (0.1, 0.2) and cfg.z == 1.96 and cfg.ratio_clip == (0.01, 100.0)
    assert bounds.n_trials == 2
    bad = [({"mu_grid": [0.3, 0.2]}, "/mu_grid"), ({"mu_grid": [0.1, "x"]}, "/mu_grid/1"),
           ({"z": "big"}, "/z"), ({"learners": {"outcome": ["forest"]}}, "/learners/outcome/0"),
           ({"bounds": {"ell": [0, 0], "u": 3, "v": [0, 1]}}, "/bounds/u"),
           ({"clips": {"propensity": 0.7}}, "/clips/propensity")]
    for obj, pointer in bad:
        with pytest.raises(ConfigError) as info:
            parse_config(obj)
        assert info.value.pointer == pointer
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_defaults():
    cfg = AnalysisConfig()
    assert cfg.folds == 5 and cfg.z == 1.64 and not cfg.b5
