import numpy as np
import pytest

from plmfusion.bandwidth import DEFAULT_S_GRID, cv_scores, dbe_beta, loo_cv_score, select_bandwidth
from plmfusion.errors import ValidationError
from plmfusion.plm import Dataset, fit_pls
from plmfusion.smoother import bandwidth_from_rate, build_smoother, epanechnikov

from conftest import wls_hat_row


def brute_force_loo(z, r, b):
    errs = []
    for i in range(z.size):
        keep = np.arange(z.size) != i
        row = wls_hat_row(z[keep], z[i], b, epanechnikov)
        errs.append(r[i] - row @ r[keep])
    return float(np.mean(np.square(errs)))


class TestDifferenceBasedBeta:
    def test_recovers_beta_when_m_is_smooth(self):
        rng = np.random.default_rng(5)
        n = 2000
        z = rng.uniform(size=n)
        x = np.column_stack([rng.normal(size=n), rng.uniform(size=n)])
        y = np.sin(5 * z) + x @ np.array([2.0, -1.0]) + 0.1 * rng.normal(size=n)
        beta = dbe_beta(Dataset(y=y, x=x, z=z))
        np.testing.assert_allclose(beta, [2.0, -1.0], atol=0.02)

    def test_tied_z_values_are_kept(self):
        rng = np.random.default_rng(1)
        z = np.repeat(np.linspace(0, 1, 400), 5)
        x = rng.normal(size=(z.size, 1))
        y = np.sin(5 * z) + 3.0 * x[:, 0]
        # within-tie differences remove m exactly; the rest leave O(1/400) error
        assert dbe_beta(Dataset(y=y, x=x, z=z))[0] == pytest.approx(3.0, abs=1e-3)

    def test_rejects_multivariate_z(self):
        rng = np.random.default_rng(0)
        data = Dataset(y=rng.normal(size=40), x=rng.normal(size=(40, 1)), z=rng.uniform(size=(40, 2)))
        with pytest.raises(ValidationError, match="d = 1"):
            dbe_beta(data)


class TestLeaveOneOut:
    def test_deletion_identity_matches_brute_force(self, case_one_200):
        data = case_one_200
        r = data.y - data.x @ dbe_beta(data)
        z = data.z[:, 0]
        for s in (0.65, 1.0, 1.5):
            bw = bandwidth_from_rate(s, 0.2, data.n)
            assert loo_cv_score(z, r, bw) == pytest.approx(brute_force_loo(z, r, bw.b), rel=1e-10, abs=1e-12)


class TestSelectBandwidth:
    def test_selected_scale_minimises_cv(self, case_one_200):
        search = cv_scores(case_one_200, "dbe-cv", DEFAULT_S_GRID)
        best = search.s_grid.index(search.best.s)
        assert all(search.scores[best] <= sc for sc in search.scores)
        assert search.best.b == pytest.approx(search.best.s * 200 ** -0.2)

    def test_cv_method_rescores_profiled_beta(self, case_one_200):
        a = cv_scores(case_one_200, "cv", (0.8, 1.0))
        b = cv_scores(case_one_200, "dbe-cv", (0.8, 1.0))
        assert a.scores != b.scores
        assert a.best.s in (0.8, 1.0)

    def test_linear_m_gives_unbiased_beta_for_every_grid_member(self):
        rng = np.random.default_rng(11)
        grid = (0.65, 1.0, 1.25)
        betas = {s: [] for s in grid}
        for _ in range(60):
            n = 150
            z = rng.uniform(size=n)
            x = np.column_stack([z + rng.normal(size=n), rng.uniform(size=n)])
            y = 2.0 + 3.0 * z + x @ np.array([1.0, 1.0]) + rng.normal(size=n)
            data = Dataset(y=y, x=x, z=z)
            assert select_bandwidth(data, "dbe-cv", grid).s in grid
            for s in grid:
                S = build_smoother(z, bandwidth_from_rate(s, 0.2, n))
                betas[s].append(fit_pls(data, S).beta)
        for s in grid:
            B = np.array(betas[s])
            se = B.std(axis=0, ddof=1) / np.sqrt(len(B))
            assert np.all(np.abs(B.mean(axis=0) - 1.0) < 3.5 * se)

    def test_validation(self, case_one_200):
        with pytest.raises(ValidationError):
            cv_scores(case_one_200, "dbe-cv", ())
        with pytest.raises(ValidationError):
            cv_scores(case_one_200, "kfold")
        rng = np.random.default_rng(0)
        small = Dataset(y=rng.normal(size=8), x=rng.normal(size=(8, 1)), z=rng.uniform(size=8))
        with pytest.raises(ValidationError, match="n >= 10"):
            select_bandwidth(small)
