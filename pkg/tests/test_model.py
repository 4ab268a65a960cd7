import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import halfcauchy
from scipy.stats import t as t_dist

from dosemeta.basis import BasisSet, build_basis
from dosemeta.model import (Dataset, DoseResponseModel, ParameterState,
                            SubjectRecord, _corr_chol, half_cauchy_logpdf,
                            linear_predictor, lkj_log_density, log_posterior,
                            log_posterior_gradient, student_t_logpdf)
from conftest import toy_dataset


def toy_model(seed=7, **kwargs):
    data = toy_dataset(seed=seed, **kwargs)
    bases = [build_basis(data.doses_by_trial(k), 1, drug_index=k)
             for k in range(data.n_drugs)]
    return data, bases, DoseResponseModel(data, bases)


def hand_state(J, K, L, P, fill=1.0):
    d = K * L + 1
    return ParameterState(
        mu_alpha=fill,
        mu_phi=np.full((K, L), fill),
        sigma=np.full(d, 0.5),
        omega=np.eye(d),
        z=np.zeros((J, d)),
        beta=np.full(P, fill),
        theta=np.full((K, L), fill),
    )


class TestLinearPredictor:
    def test_untreated_subject_reduces_to_intercept(self):
        state = hand_state(J=2, K=1, L=2, P=2, fill=0.7)
        state.z[1, 0] = 2.0  # alpha_1 = mu_alpha + 0.5 * 2
        basis = BasisSet(drug_index=0, degree=1, interior_knots=(5.0,),
                         boundary_low=0.0, boundary_high=10.0)
        subject = SubjectRecord(trial=1, doses=(0.0,), outcome=0,
                                covariates=(0.0, 0.0), moderator=0)
        assert linear_predictor(state, subject, [basis]) == pytest.approx(0.7 + 1.0)

    def test_zero_theta_removes_moderator_effect(self):
        state = hand_state(J=1, K=1, L=2, P=1, fill=0.9)
        state.theta[:] = 0.0
        basis = BasisSet(drug_index=0, degree=1, interior_knots=(5.0,),
                         boundary_low=0.0, boundary_high=10.0)
        for dose in (0.0, 2.5, 7.0, 10.0):
            values = [
                linear_predictor(
                    state,
                    SubjectRecord(trial=0, doses=(dose,), outcome=0,
                                  covariates=(0.3,), moderator=m),
                    [basis])
                for m in (0, 1)
            ]
            assert values[0] == pytest.approx(values[1])

    def test_hand_computed_sum_with_unit_parameters(self):
        # degree-1 basis on [0, 10] with a knot at 5: at dose 2.5 the two
        # retained hat functions evaluate to 0.5 and 0.0
        state = hand_state(J=1, K=1, L=2, P=2, fill=1.0)
        basis = BasisSet(drug_index=0, degree=1, interior_knots=(5.0,),
                         boundary_low=0.0, boundary_high=10.0)
        subject = SubjectRecord(trial=0, doses=(2.5,), outcome=1,
                                covariates=(1.0, 1.0), moderator=1)
        # alpha + row.(phi + theta) + beta.x = 1 + (0.5+0.0)*2 + 2
        assert linear_predictor(state, subject, [basis]) == pytest.approx(4.0)

    def test_shape_mismatch_rejected(self):
        state = hand_state(J=1, K=1, L=2, P=1)
        basis = BasisSet(drug_index=0, degree=1, interior_knots=(5.0,),
                         boundary_low=0.0, boundary_high=10.0)
        bad = SubjectRecord(trial=0, doses=(1.0, 2.0), outcome=0,
                            covariates=(0.0,), moderator=0)
        with pytest.raises(ValueError):
            linear_predictor(state, bad, [basis, basis])


class TestLogPosterior:
    def test_empty_dataset_matches_closed_form_priors(self):
        J, K, P = 3, 2, 2
        data = Dataset(trial_index=[], doses=np.zeros((0, K)), outcome=[],
                       covariates=np.zeros((0, P)), moderator=[], n_trials=J)
        bases = [BasisSet(drug_index=k, degree=3, interior_knots=(4.0,),
                          boundary_low=0.0, boundary_high=10.0) for k in range(K)]
        model = DoseResponseModel(data, bases)
        u = np.zeros(model.n_params)

        d = 1 + K * bases[0].n_columns
        S = K * bases[0].n_columns
        tril = np.tril_indices(d, -1)
        alpha = 3.0 + (d - 2 - tril[1]) / 2
        from scipy.special import betaln
        expected = (
            (2 * S + P) * t_dist(5, scale=2.5).logpdf(0.0)
            + d * halfcauchy(scale=0.1).logpdf(1.0)       # sigma = 1, log-jacobian 0
            + J * d * (-0.5 * np.log(2 * np.pi))          # z at 0
            + np.sum(-(2 * alpha - 1) * np.log(2) - betaln(alpha, alpha))
        )
        assert model.log_posterior(u) == pytest.approx(float(expected), abs=1e-10)

    def test_half_cauchy_mass_below_threshold(self):
        # inverse-CDF draws from the scale prior: ~95% of mass below 1.3
        rng = np.random.default_rng(31)
        sigma = 0.1 * np.tan(np.pi * rng.random(400_000) / 2)
        mass = (sigma < 1.3).mean()
        assert mass == pytest.approx(0.951, abs=0.005)

    def test_lkj_log_density_2x2(self):
        flat = np.eye(2)
        tilted = np.array([[1.0, 0.5], [0.5, 1.0]])
        diff = lkj_log_density(flat, 3.0) - lkj_log_density(tilted, 3.0)
        assert diff == pytest.approx(2 * (np.log(1.0) - np.log(0.75)))

    def test_correlation_block_matches_direct_jacobian(self):
        # oracle: (eta-1)*logdet(omega(y)) plus the numerical log-Jacobian
        # of y -> lower-triangle(omega), compared between two points
        rng = np.random.default_rng(3)
        d, eta = 4, 3.0
        tril = np.tril_indices(d, -1)
        nc = d * (d - 1) // 2

        def omega_lower(y):
            z = np.zeros((d, d))
            z[tril] = np.tanh(y)
            w, _ = _corr_chol(z)
            return (w @ w.T)[tril]

        def direct(y):
            z = np.zeros((d, d))
            z[tril] = np.tanh(y)
            w, _ = _corr_chol(z)
            _, logdet = np.linalg.slogdet(w @ w.T)
            h = 1e-6
            jac = np.empty((nc, nc))
            for i in range(nc):
                yp, ym = y.copy(), y.copy()
                yp[i] += h
                ym[i] -= h
                jac[:, i] = (omega_lower(yp) - omega_lower(ym)) / (2 * h)
            return (eta - 1) * logdet + np.linalg.slogdet(jac)[1]

        def collapsed(y):
            alpha = eta + (d - 2 - tril[1]) / 2
            return float(np.sum(alpha * np.log(1 - np.tanh(y) ** 2)))

        y1 = rng.uniform(-1.2, 1.2, nc)
        y2 = rng.uniform(-1.2, 1.2, nc)
        assert direct(y1) - direct(y2) == pytest.approx(collapsed(y1) - collapsed(y2), abs=1e-7)

    def test_scalar_prior_helpers_match_scipy(self):
        x = np.linspace(-4, 4, 9)
        np.testing.assert_allclose(student_t_logpdf(x),
                                   t_dist(5, scale=2.5).logpdf(x), atol=1e-12)
        s = np.array([0.01, 0.1, 1.0, 3.0])
        np.testing.assert_allclose(half_cauchy_logpdf(s),
                                   halfcauchy(scale=0.1).logpdf(s), atol=1e-12)

    def test_subject_order_invariance(self):
        data, bases, model = toy_model(seed=5)
        rng = np.random.default_rng(0)
        perm = rng.permutation(data.n_subjects)
        shuffled = Dataset(
            trial_index=data.trial_index[perm], doses=data.doses[perm],
            outcome=data.outcome[perm], covariates=data.covariates[perm],
            moderator=data.moderator[perm], n_trials=data.n_trials)
        model2 = DoseResponseModel(shuffled, bases)
        u = rng.uniform(-1, 1, model.n_params)
        assert model.log_posterior(u) == pytest.approx(model2.log_posterior(u), rel=1e-12)
        np.testing.assert_allclose(model.log_posterior_gradient(u),
                                   model2.log_posterior_gradient(u), rtol=1e-9, atol=1e-10)

    def test_nonfinite_input_rejected_not_propagated(self):
        _, _, model = toy_model()
        u = np.zeros(model.n_params)
        u[0] = np.nan
        lp, grad = model.logp_and_grad(u)
        assert lp == -np.inf
        assert not grad.any()

    def test_reduces_to_plain_logistic_regression(self):
        # single trial, linear (0-knot) model: the likelihood term equals a
        # hand-rolled Bernoulli-logit log-likelihood at the implied coefficients
        rng = np.random.default_rng(42)
        n = 20
        doses = np.zeros((n, 1))
        doses[:10, 0] = rng.uniform(1, 10, 10)
        data = Dataset(trial_index=np.zeros(n, dtype=int), doses=doses,
                       outcome=rng.integers(0, 2, n),
                       covariates=rng.normal(size=(n, 1)),
                       moderator=np.zeros(n, dtype=int), n_trials=1)
        empty = Dataset(trial_index=[], doses=np.zeros((0, 1)), outcome=[],
                        covariates=np.zeros((0, 1)), moderator=[], n_trials=1)
        bases = [build_basis(data.doses_by_trial(0), 0)]
        model = DoseResponseModel(data, bases)
        prior_only = DoseResponseModel(empty, bases)

        u = rng.uniform(-1, 1, model.n_params)
        state = model.constrain(u)
        effects = state.trial_effects()
        alpha, slope = effects[0, 0], effects[0, 1]
        eta = alpha + slope * doses[:, 0] + state.beta[0] * data.covariates[:, 0]
        hand_loglik = float(np.sum(
            data.outcome * eta - np.log1p(np.exp(eta))))
        assert model.log_posterior(u) - prior_only.log_posterior(u) == \
            pytest.approx(hand_loglik, abs=1e-10)


class TestGradient:
    def test_matches_finite_differences(self):
        data, bases, model = toy_model(seed=9)
        rng = np.random.default_rng(1)
        for _ in range(3):
            u = rng.uniform(-1.5, 1.5, model.n_params)
            lp, grad = model.logp_and_grad(u)
            h = 1e-5
            idx = rng.choice(model.n_params, 25, replace=False)
            for i in idx:
                up, um = u.copy(), u.copy()
                up[i] += h
                um[i] -= h
                fd = (model.log_posterior(up) - model.log_posterior(um)) / (2 * h)
                assert abs(grad[i] - fd) <= 1e-6 * max(1.0, abs(fd))

    def test_mu_alpha_gradient_zero_without_data(self):
        data = Dataset(trial_index=[], doses=np.zeros((0, 1)), outcome=[],
                       covariates=np.zeros((0, 0)), moderator=[], n_trials=2)
        bases = [BasisSet(drug_index=0, degree=3, interior_knots=(3.0,),
                          boundary_low=0.0, boundary_high=8.0)]
        model = DoseResponseModel(data, bases)
        grad = model.log_posterior_gradient(np.zeros(model.n_params))
        assert grad[0] == 0.0

    def test_outcome_flip_negates_beta_gradient(self):
        data, bases, model = toy_model(seed=13)
        flipped = Dataset(
            trial_index=data.trial_index, doses=data.doses,
            outcome=1 - data.outcome, covariates=data.covariates,
            moderator=data.moderator, n_trials=data.n_trials)
        model2 = DoseResponseModel(flipped, bases)

        rng = np.random.default_rng(2)
        u = rng.uniform(-1, 1, model.n_params)
        # negating every location coordinate flips the linear predictor's sign
        u2 = u.copy()
        for name in ("mu_alpha", "mu_phi", "z", "beta", "theta"):
            u2[model._slices[name]] = -u[model._slices[name]]
        g1 = model.log_posterior_gradient(u)
        g2 = model2.log_posterior_gradient(u2)
        np.testing.assert_allclose(g2[model._slices["beta"]],
                                   -g1[model._slices["beta"]], rtol=1e-10)


class TestParameterState:
    def test_round_trip_identity(self):
        _, _, model = toy_model()
        rng = np.random.default_rng(17)
        for _ in range(10):
            u = rng.uniform(-2, 2, model.n_params)
            u2 = model.unconstrain(model.constrain(u))
            np.testing.assert_allclose(u2, u, atol=1e-12)

    def test_constrained_states_are_valid(self):
        _, _, model = toy_model()
        rng = np.random.default_rng(23)
        for _ in range(20):
            state = model.constrain(rng.uniform(-4, 4, model.n_params))
            state.validate()
            # reconstructed covariance is symmetric positive-definite
            # (up to float roundoff for near-singular correlation draws)
            cov = np.diag(state.sigma) @ state.omega @ np.diag(state.sigma)
            np.testing.assert_allclose(cov, cov.T, rtol=1e-12)
            eigenvalues = np.linalg.eigvalsh(cov)
            assert eigenvalues.min() > -1e-12 * eigenvalues.max()

    def test_validation_catches_violations(self):
        state = hand_state(J=1, K=1, L=2, P=1)
        state.sigma = np.array([-0.1, 0.5, 0.5])
        with pytest.raises(ValueError):
            state.validate()


class TestModuleWrappers:
    def test_wrappers_agree_with_methods(self):
        data, bases, model = toy_model(seed=3, n=40)
        u = np.random.default_rng(4).uniform(-1, 1, model.n_params)
        assert log_posterior(u, data, bases) == model.log_posterior(u)
        np.testing.assert_array_equal(log_posterior_gradient(u, data, bases),
                                      model.log_posterior_gradient(u))

    def test_dataset_invariants_enforced(self):
        with pytest.raises(ValueError):
            Dataset(trial_index=[0], doses=[[1.0, 2.0]], outcome=[1],
                    covariates=[[0.0]], moderator=[0], n_trials=1)  # two drugs dosed
        with pytest.raises(ValueError):
            Dataset(trial_index=[5], doses=[[1.0]], outcome=[1],
                    covariates=[[0.0]], moderator=[0], n_trials=2)
        with pytest.raises(ValueError):
            Dataset(trial_index=[0], doses=[[-1.0]], outcome=[1],
                    covariates=[[0.0]], moderator=[0], n_trials=1)
        with pytest.raises(ValueError):
            Dataset(trial_index=[0], doses=[[1.0]], outcome=[2],
                    covariates=[[0.0]], moderator=[0], n_trials=1)
