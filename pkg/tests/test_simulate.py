import numpy as np
import pytest

from rtnm.errors import DegenerateCohort
from rtnm.simulate import DgpConfig, EffectMap, generate_panel, applied_scale_config, simulate


def test_zero_effect_has_zero_truth():
    _, truth = generate_panel(DgpConfig(n_units=300, seed=1))
    assert np.all(truth.values == 0.0)


def test_constant_effect_truth_is_exact():
    _, truth = generate_panel(DgpConfig(n_units=300, seed=1, effect=EffectMap("constant", 2.0)))
    assert truth.index.K == 18
    assert np.all(truth.values == 2.0)


def test_effect_maps():
    cohort = EffectMap("cohort", 1.0, {2: 0.5})
    assert cohort(2, 1) == 0.0 and cohort(2, 3) == 1.5 and cohort(1, 3) == 1.0
    lag = EffectMap.from_dict({"kind": "lag", "base": 0.0, "values": {"1": 2.0}})
    assert lag(2, 3) == 2.0 and lag(2, 2) == 0.0
    table = EffectMap("table", 0.0, {"1,2": 4.0})
    assert table(1, 2) == 4.0 and table(1, 1) == 0.0


def test_panel_is_staggered_and_well_formed():
    sim = simulate(DgpConfig(n_units=500, seed=3))
    data = sim.data
    z = data.treatment_path()
    assert np.all(np.diff(z, axis=1) >= 0)
    assert set(data.cohorts()) == {1, 2, 3, 4}
    assert data.covariates.shape == (500, 9, 2)
    np.testing.assert_array_equal(data.covariates[:, :-1, 0], data.outcomes[:, :-1])


def test_same_seed_same_panel():
    a = simulate(DgpConfig(n_units=200, seed=5)).data
    b = simulate(DgpConfig(n_units=200, seed=5)).data
    assert np.array_equal(a.outcomes, b.outcomes) and np.array_equal(a.adoption, b.adoption)


def test_cohort_quotas():
    cfg = DgpConfig(n_units=400, seed=2, cohort_sizes={1: 10, 2: 20, 3: 30, 4: 40})
    data = simulate(cfg).data
    counts = {g: int(np.sum(data.adoption == g)) for g in (1, 2, 3, 4)}
    assert counts == {1: 10, 2: 20, 3: 30, 4: 40}
    assert int(np.sum(~np.isfinite(data.adoption))) == 300


def test_applied_scale_config_shape():
    cfg = applied_scale_config()
    assert cfg.n_units - sum(cfg.cohort_sizes.values()) == 7890
    assert cfg.n_covariates == 9


def test_impossible_cohorts_are_rejected():
    with pytest.raises(DegenerateCohort):
        simulate(DgpConfig(n_units=20, seed=0, base_hazard=-9.0, hazard_bounds=(0.001, 0.95), max_redraws=2))


def test_config_round_trip():
    cfg = DgpConfig(effect=EffectMap("lag", 1.0, {"0": 1.0}), cohort_sizes={1: 3})
    assert DgpConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DgpConfig(base_hazard=(-2.0, -2.0))
