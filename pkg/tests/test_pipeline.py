import numpy as np
import pytest

from retropanel.errors import MissingCounterfactual, NoMissingCells, UsageError
from retropanel.inference import DatasetPipeline
from retropanel.panel_data import PanelDataset
from retropanel.pipeline import (
    PipelineConfig,
    effects_from_counterfactual,
    reindex_fit,
    run_on_dataset,
    run_pipeline,
    warm_starts,
)
from retropanel.synthetic_dgp import CovariateSpec, DgpConfig, generate_panel


@pytest.fixture(scope="module")
def sim():
    return generate_panel(DgpConfig(n_at=12, n_lt=8, T=16, t0=6, tau_true=0.5, seed=3))


@pytest.fixture(scope="module")
def sim_cov():
    cfg = DgpConfig(n_at=12, n_lt=8, T=16, t0=6, seed=4, covariate=CovariateSpec(shift=0.3))
    return generate_panel(cfg)


class TestEffects:
    def test_means_over_untreated(self):
        Y = np.zeros((3, 3))
        W = np.array([[1, 1, 1], [0, 1, 1], [0, 0, 1]])
        Y_hat1 = np.array([[9.0, 9.0, 9.0], [1.0, 9.0, 9.0], [3.0, 4.0, 9.0]])
        tau_t, tau = effects_from_counterfactual(Y_hat1, Y, W)
        np.testing.assert_array_equal(tau_t[:2], [2.0, 4.0])
        assert np.isnan(tau_t[2]) and tau == 3.0

    def test_errors(self):
        with pytest.raises(NoMissingCells):
            effects_from_counterfactual(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(MissingCounterfactual):
            effects_from_counterfactual(np.full((2, 2), np.nan), np.zeros((2, 2)), np.zeros((2, 2)))


class TestPipeline:
    def test_did_two_by_two(self):
        Y = np.array([[1.0, 2.0], [1.0, 5.0]])
        W = np.array([[1, 1], [0, 1]])
        res = run_pipeline(Y, W, config=PipelineConfig(estimator="did"))
        assert res.tau == pytest.approx((5.0 - 1.0) - (2.0 - 1.0), abs=1e-10)
        assert res.Y_hat1[1, 0] == pytest.approx(4.0)

    def test_mc_keeps_observed_and_recovers_effect(self, sim):
        ds, truth = sim
        res = run_on_dataset(ds)
        obs = ds.treatment == 1
        np.testing.assert_array_equal(res.Y_hat1[obs], ds.outcomes[obs])
        assert abs(res.tau - truth.tau) < 0.25
        assert res.penalties.outcome is not None and res.penalties.treatment is not None
        assert res.weights.w_tilde[~obs].sum() == 0

    @pytest.mark.parametrize("estimator", ["mc", "did", "scm"])
    def test_all_estimators_run(self, sim, estimator):
        ds, _ = sim
        cfg = PipelineConfig(estimator=estimator, use_covariates=False)
        res = run_on_dataset(ds, cfg)
        assert np.isfinite(res.tau_t[:6]).all() and np.isnan(res.tau_t[6:]).all()

    def test_covariates_used(self, sim_cov):
        ds, _ = sim_cov
        res = run_on_dataset(ds)
        assert res.X_hat is not None and res.covariate_fit is not None
        obs = ds.treatment == 1
        np.testing.assert_array_equal(res.X_hat[obs], ds.covariates[obs])
        off = run_on_dataset(ds, PipelineConfig(use_covariates=False))
        assert off.X_hat is None

    def test_weighting_switches(self, sim):
        ds, _ = sim
        unit = run_on_dataset(ds, PipelineConfig(propensity_weights=False, elapsed_weights=False))
        assert unit.weights is None and unit.treatment_fit is None
        prop = run_on_dataset(ds, PipelineConfig(elapsed_weights=False))
        full = run_on_dataset(ds)
        lt = ds.treatment[:, 0] == 0
        assert not np.allclose(prop.weights.w_tilde[lt], full.weights.w_tilde[lt])
        np.testing.assert_array_equal(prop.weights.w_tilde[~lt], full.weights.w_tilde[~lt])

    @pytest.mark.parametrize(
        "cfg",
        [
            PipelineConfig(estimator="ols"),
            PipelineConfig(propensity_weights=False, elapsed_weights=True),
            PipelineConfig(use_covariates=True),
            PipelineConfig(eps_w=0.5),
        ],
    )
    def test_invalid_config(self, sim, cfg):
        ds, _ = sim
        with pytest.raises(UsageError):
            run_on_dataset(ds, cfg)

    def test_identity_replicate_reproduces_estimate(self, sim):
        ds, _ = sim
        pipe = DatasetPipeline(ds, PipelineConfig())
        res = pipe.fit()
        tau_t, tau = pipe(np.arange(ds.shape[1]))
        assert tau == pytest.approx(res.tau, abs=1e-3)
        np.testing.assert_allclose(tau_t, res.tau_t, atol=5e-3)

    def test_replicate_requires_fit(self, sim):
        with pytest.raises(UsageError):
            DatasetPipeline(sim[0])(np.arange(3))

    def test_warm_starts_reindexed(self, sim):
        ds, _ = sim
        res = run_on_dataset(ds)
        cols = np.array([3, 3, 0, 15])
        ws = warm_starts(res, cols)
        assert set(ws) == {"treatment", "outcome"}
        np.testing.assert_array_equal(ws["outcome"].L_hat, res.outcome_fit.L_hat[:, cols])
        assert reindex_fit(None, cols) is None

    def test_unit_permutation_equivariance(self, sim):
        ds, _ = sim
        perm = np.random.default_rng(0).permutation(ds.shape[0])
        cfg = PipelineConfig(estimator="did")
        a = run_on_dataset(ds, cfg)
        pds = PanelDataset(ds.outcomes[perm], ds.treatment[perm], None, tuple(np.array(ds.unit_ids)[perm]), ds.period_ids)
        b = run_pipeline(pds.outcomes, pds.treatment, config=cfg)
        assert b.tau == pytest.approx(a.tau, abs=1e-10)
