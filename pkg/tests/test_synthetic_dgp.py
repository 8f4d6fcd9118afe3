import json

import numpy as np
import pytest

from retropanel.errors import UsageError
from retropanel.synthetic_dgp import CovariateSpec, DgpConfig, ar1_noise, generate_panel, write_simulation


class TestGeneratePanel:
    def test_deterministic(self):
        a, ta = generate_panel(DgpConfig(seed=4))
        b, tb = generate_panel(DgpConfig(seed=4))
        np.testing.assert_array_equal(a.outcomes, b.outcomes)
        np.testing.assert_array_equal(ta.L, tb.L)
        c, _ = generate_panel(DgpConfig(seed=5))
        assert not np.array_equal(a.outcomes, c.outcomes)

    def test_observed_outcome_switch(self):
        ds, tr = generate_panel(DgpConfig(tau_true=0.3, seed=1))
        W = ds.treatment
        np.testing.assert_array_equal(ds.outcomes, W * tr.Y1 + (1 - W) * tr.Y0)
        assert tr.tau == pytest.approx(0.3)
        assert np.all(np.isnan(tr.tau_t[24:])) and np.allclose(tr.tau_t[:24], 0.3)

    def test_block_design(self):
        ds, _ = generate_panel(DgpConfig(n_at=3, n_lt=2, T=8, t0=5))
        assert ds.shape == (5, 8)
        assert ds.treatment[:3].all() and not ds.treatment[3:, :5].any() and ds.treatment[3:, 5:].all()
        assert ds.unit_ids[0] == "u000" and ds.period_ids[-1] == "p007"

    def test_fixed_effects_only(self):
        _, tr = generate_panel(DgpConfig(rank=0, noise_sigma=0.0, seed=2))
        np.testing.assert_array_equal(tr.L, 0.0)
        np.testing.assert_allclose(tr.Y0, tr.gamma[:, None] + tr.delta[None, :])

    def test_rank(self):
        _, tr = generate_panel(DgpConfig(rank=3))
        assert np.linalg.matrix_rank(tr.L) == 3

    def test_endogenous_covariate(self):
        cov = CovariateSpec(beta=0.5, shift=0.2)
        ds, tr = generate_panel(DgpConfig(covariate=cov, seed=3))
        W = ds.treatment == 1
        np.testing.assert_array_equal(ds.covariates[W], tr.X1[W])
        np.testing.assert_array_equal(ds.covariates[~W], tr.X0[~W])
        np.testing.assert_allclose(tr.X1 - tr.X0, 0.2)
        np.testing.assert_allclose(tr.tau_t[:24], 0.5 * 0.2)

    def test_ramp_profile(self):
        _, tr = generate_panel(DgpConfig(tau_true=1.0, effect_profile="ramp", ramp_periods=4))
        np.testing.assert_allclose(tr.effect[-1, 24:28], [0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(tr.effect[0, :5], [0.25, 0.5, 0.75, 1.0, 1.0])

    @pytest.mark.parametrize(
        "kw", [dict(t0=0), dict(t0=60), dict(rank=-1), dict(ar_coef=1.0), dict(effect_profile="x"), dict(n_at=0, n_lt=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            generate_panel(DgpConfig(**kw))

    def test_from_dict(self):
        cfg = DgpConfig.from_dict({"seed": 3, "covariate": {"shift": 1.0}})
        assert cfg.covariate.shift == 1.0 and cfg.seed == 3


class TestNoise:
    def test_ar1_stationary_moments(self):
        eps = ar1_noise(np.random.default_rng(0), 4000, 50, 0.1, 0.5)
        assert eps.std() == pytest.approx(0.1, rel=0.02)
        lag = np.mean(eps[:, 1:] * eps[:, :-1]) / eps.var()
        assert lag == pytest.approx(0.5, abs=0.02)
        assert eps[:, 0].std() == pytest.approx(0.1, rel=0.05)


def test_write_simulation(tmp_path):
    ds, tr = generate_panel(DgpConfig(n_at=2, n_lt=2, T=5, t0=2, tau_true=0.1))
    paths = write_simulation(ds, tr, tmp_path)
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["tau"] == pytest.approx(0.1)
    assert paths["panel"].endswith("panel.csv")
    assert (tmp_path / "panel.csv").read_text().startswith("unit,period,outcome,treated")
