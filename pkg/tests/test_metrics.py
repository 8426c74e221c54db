"""Metric tests: TIC baseline exactness, RMSE conventions, coverage, SSIM.

SSIM's windowed path is checked through exact invariances (identity,
symmetry, sign under negation); the small-grid fallback is checked against
a from-scratch single-window computation.
"""

import numpy as np
import pytest

from gfgl.data import make_dataset
from gfgl.errors import ConfigError, DataError, NumericsError
from gfgl.graph import build_grid_graph
from gfgl.metrics import (
    RAW,
    STANDARDIZED,
    RelativeRateField,
    ci_coverage,
    family_label,
    relative_rate_field,
    rmse_relative,
    run_ablation_suite,
    ssim,
    tic_normalize,
)
from gfgl.priors import GAMMA_LASSO, PLAIN_LASSO
from gfgl.simulate import simulate, smoke_spec
from gfgl.trainer import TrainConfig
from gfgl.variational import HIERARCHICAL, MEAN_FIELD, FamilyConfig, PosteriorSummary


def dataset_from_counts(counts, observed=None, lod=None):
    counts = np.asarray(counts)
    m, d = counts.shape
    rows = 1
    while rows * rows < m:
        rows += 1
    g = build_grid_graph(1, m)
    if observed is None:
        observed = np.ones((m, d), dtype=bool)
    if lod is None:
        lod = np.zeros(d, dtype=np.int64)
    return make_dataset(counts, observed, lod, g, tuple(f"m{k}" for k in range(d)))


class TestTicNormalize:
    def test_single_pixel_is_all_ones(self):
        g = build_grid_graph(1, 1)
        ds = make_dataset([[3, 9]], [[True, True]], [0, 0], g, ("a", "b"))
        field = tic_normalize(ds)
        np.testing.assert_array_equal(field.values, [[1.0, 1.0]])

    def test_two_pixel_example(self):
        ds = dataset_from_counts([[1, 9], [3, 7]])
        field = tic_normalize(ds)
        np.testing.assert_allclose(field.values[:, 0], [0.25, 0.75])

    def test_invariant_to_per_pixel_rescaling(self):
        ds1 = dataset_from_counts([[2, 6, 2], [5, 5, 10]])
        ds2 = dataset_from_counts([[6, 18, 6], [5, 5, 10]])
        np.testing.assert_array_equal(
            tic_normalize(ds1).values, tic_normalize(ds2).values)

    def test_censored_entries_carry_no_mass(self):
        observed = np.array([[True, False], [True, True]])
        ds = dataset_from_counts([[4, 0], [4, 4]], observed, [0, 2])
        field = tic_normalize(ds)
        np.testing.assert_array_equal(field.values[:, 1], [0.0, 1.0])
        # pixel totals count observed entries only
        np.testing.assert_allclose(field.values[:, 0], [2 / 3, 1 / 3])

    def test_fully_censored_molecule_falls_back_to_uniform(self):
        observed = np.array([[True, False], [True, False]])
        ds = dataset_from_counts([[4, 0], [2, 0]], observed, [0, 2])
        field = tic_normalize(ds)
        np.testing.assert_array_equal(field.values[:, 1], [0.5, 0.5])

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(0)
        ds = dataset_from_counts(rng.integers(1, 50, size=(12, 4)))
        np.testing.assert_allclose(tic_normalize(ds).values.sum(axis=0), 1.0,
                                   atol=1e-12)


class TestRelativeRateField:
    def test_normalizes_columns(self):
        field = relative_rate_field([[1.0, 2.0], [3.0, 2.0]], "truth")
        np.testing.assert_allclose(field.values.sum(axis=0), 1.0)
        assert field.provenance == "truth"

    def test_rejects_negative_and_empty_columns(self):
        with pytest.raises(DataError, match="nonnegative"):
            relative_rate_field([[-1.0], [2.0]], "x")
        with pytest.raises(DataError, match="positive mass"):
            relative_rate_field([[0.0], [0.0]], "x")
        with pytest.raises(DataError, match="matrix"):
            relative_rate_field([1.0, 2.0], "x")


class TestRmse:
    def test_identical_fields_score_zero(self):
        rng = np.random.default_rng(1)
        v = rng.random((10, 3)) + 0.1
        a = relative_rate_field(v, "a")
        b = relative_rate_field(v.copy(), "b")
        for scale in (RAW, STANDARDIZED):
            report = rmse_relative(a, b, scale=scale)
            np.testing.assert_array_equal(report.per_molecule, 0.0)
            assert report.overall == 0.0

    def test_constant_offset_gives_that_offset(self):
        rng = np.random.default_rng(2)
        base = rng.random((8, 2)) + 0.5
        shifted = base.copy()
        shifted[:, 1] += 0.125
        a = RelativeRateField(values=shifted, provenance="a")
        b = RelativeRateField(values=base, provenance="b")
        report = rmse_relative(a, b, scale=RAW)
        np.testing.assert_allclose(report.per_molecule, [0.0, 0.125], atol=1e-15)

    def test_overall_pools_square_means(self):
        rng = np.random.default_rng(3)
        a = relative_rate_field(rng.random((20, 4)) + 0.1, "a")
        b = relative_rate_field(rng.random((20, 4)) + 0.1, "b")
        report = rmse_relative(a, b, scale=RAW)
        np.testing.assert_allclose(
            report.overall, np.sqrt((report.per_molecule**2).mean()), rtol=1e-12)

    def test_standardized_divides_by_reference_sd(self):
        rng = np.random.default_rng(4)
        va = rng.random((15, 2)) + 0.1
        vb = rng.random((15, 2)) + 0.1
        a = relative_rate_field(va, "a")
        b = relative_rate_field(vb, "b")
        raw = rmse_relative(a, b, scale=RAW)
        std = rmse_relative(a, b, scale=STANDARDIZED)
        sd = b.values.std(axis=0)
        np.testing.assert_allclose(std.per_molecule, raw.per_molecule / sd, rtol=1e-12)

    def test_zero_variance_reference_needs_raw_scale(self):
        a = relative_rate_field(np.random.default_rng(5).random((6, 1)) + 0.1, "a")
        b = relative_rate_field(np.ones((6, 1)), "b")
        with pytest.raises(NumericsError, match="raw scale"):
            rmse_relative(a, b, scale=STANDARDIZED)
        assert rmse_relative(a, b, scale=RAW).overall > 0

    def test_pixel_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        va = rng.random((12, 3)) + 0.1
        vb = rng.random((12, 3)) + 0.1
        perm = rng.permutation(12)
        r1 = rmse_relative(relative_rate_field(va, "a"), relative_rate_field(vb, "b"))
        r2 = rmse_relative(relative_rate_field(va[perm], "a"),
                           relative_rate_field(vb[perm], "b"))
        np.testing.assert_allclose(r1.per_molecule, r2.per_molecule, rtol=1e-12)

    def test_shape_and_scale_validation(self):
        a = relative_rate_field(np.ones((4, 2)), "a")
        b = relative_rate_field(np.ones((5, 2)), "b")
        with pytest.raises(DataError, match="shape"):
            rmse_relative(a, b)
        with pytest.raises(ConfigError, match="unknown scale"):
            rmse_relative(a, relative_rate_field(np.ones((4, 2)), "b"), scale="other")


def summary_from_bounds(lo: np.ndarray, mid: np.ndarray, hi: np.ndarray) -> PosteriorSummary:
    """A synthetic five-quantile summary with the 90% band (lo, hi)."""
    m, d = lo.shape
    q25 = (lo + mid) / 2
    q75 = (mid + hi) / 2
    values = np.stack([lo, q25, mid, q75, hi])
    return PosteriorSummary(
        quantile_levels=(0.05, 0.25, 0.5, 0.75, 0.95),
        values=values,
        molecule_names=tuple(f"m{k}" for k in range(d)),
    )


class TestCoverage:
    def test_full_band_covers_everything(self):
        truth = relative_rate_field(np.random.default_rng(7).random((6, 2)) + 0.1, "t")
        summary = summary_from_bounds(
            np.zeros((6, 2)), np.full((6, 2), 0.5), np.ones((6, 2)))
        report = ci_coverage(summary, truth, 0.9)
        assert report.overall == 1.0
        np.testing.assert_array_equal(report.per_molecule, 1.0)

    def test_degenerate_band_is_inclusive(self):
        truth = relative_rate_field(np.random.default_rng(8).random((5, 2)) + 0.1, "t")
        at_truth = summary_from_bounds(truth.values, truth.values, truth.values)
        assert ci_coverage(at_truth, truth, 0.9).overall == 1.0
        missed = summary_from_bounds(truth.values + 1e-9, truth.values + 1e-9,
                                     truth.values + 1e-9)
        assert ci_coverage(missed, truth, 0.9).overall == 0.0

    def test_overall_is_mean_of_per_molecule(self):
        rng = np.random.default_rng(9)
        truth = relative_rate_field(rng.random((30, 3)) + 0.1, "t")
        lo = truth.values - rng.random((30, 3)) * 0.02
        hi = truth.values + (rng.random((30, 3)) - 0.45) * 0.02
        report = ci_coverage(summary_from_bounds(lo, (lo + hi) / 2, hi), truth, 0.9)
        np.testing.assert_allclose(report.overall, report.per_molecule.mean(),
                                   rtol=1e-12)

    def test_narrower_level_uses_inner_quantiles(self):
        truth = relative_rate_field(np.full((4, 1), 0.25), "t")
        lo = np.full((4, 1), 0.2)
        hi = np.full((4, 1), 0.35)
        summary = summary_from_bounds(lo, np.full((4, 1), 0.26), hi)
        # the 50% band is (q25, q75) = (0.23, 0.305): still covers 0.25
        assert ci_coverage(summary, truth, 0.5).overall == 1.0
        tight = summary_from_bounds(np.full((4, 1), 0.251), np.full((4, 1), 0.26),
                                    np.full((4, 1), 0.27))
        assert ci_coverage(tight, truth, 0.5).overall == 0.0

    def test_shape_mismatch_rejected(self):
        truth = relative_rate_field(np.ones((3, 2)), "t")
        summary = summary_from_bounds(np.zeros((4, 2)), np.full((4, 2), 0.5),
                                      np.ones((4, 2)))
        with pytest.raises(DataError, match="shape"):
            ci_coverage(summary, truth, 0.9)


class TestSsim:
    def test_identity_is_exactly_one(self):
        g = build_grid_graph(16, 16)
        a = np.random.default_rng(10).random(g.num_vertices)
        assert ssim(a, a, g) == 1.0

    def test_identity_on_masked_grid(self):
        rng = np.random.default_rng(11)
        mask = rng.random((16, 16)) < 0.8
        mask[0, :2] = True  # keep it connected enough to build
        g = build_grid_graph(16, 16, mask)
        a = rng.random(g.num_vertices)
        assert ssim(a, a, g) == 1.0

    def test_symmetry_is_bitwise(self):
        g = build_grid_graph(14, 14)
        rng = np.random.default_rng(12)
        a = rng.random(g.num_vertices)
        b = rng.random(g.num_vertices)
        assert ssim(a, b, g) == ssim(b, a, g)

    def test_negation_of_zero_mean_field_scores_negative(self):
        # a checkerboard has (near) zero mean in every window, so luminance
        # stays ~1 and the structure term -1 drives the score negative
        g = build_grid_graph(16, 16)
        rr, cc = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        a = np.where((rr + cc) % 2 == 0, 1.0, -1.0).reshape(-1)
        score = ssim(a, -a, g)
        assert score < -0.9

    def test_different_images_score_below_one(self):
        g = build_grid_graph(12, 12)
        rng = np.random.default_rng(14)
        a = rng.random(g.num_vertices)
        b = a + rng.normal(scale=0.1, size=g.num_vertices)
        assert ssim(a, b, g) < 1.0

    def test_constant_images(self):
        g = build_grid_graph(12, 12)
        ones = np.ones(g.num_vertices)
        assert ssim(ones, ones.copy(), g) == 1.0
        assert ssim(ones, 2 * ones, g) != 1.0

    def test_small_grid_falls_back_to_global_window(self, caplog):
        g = build_grid_graph(5, 5)
        rng = np.random.default_rng(15)
        a = rng.random(25)
        b = rng.random(25)
        import logging
        with caplog.at_level(logging.INFO, logger="gfgl.metrics"):
            got = ssim(a, b, g)
        assert any("global window" in r.message for r in caplog.records)

        span = max(a.max(), b.max()) - min(a.min(), b.min())
        c1, c2 = (0.01 * span) ** 2, (0.03 * span) ** 2
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        want = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))
        assert got == pytest.approx(want, rel=1e-12)

    def test_rejects_wrong_length(self):
        g = build_grid_graph(12, 12)
        with pytest.raises(DataError, match="vectors"):
            ssim(np.ones(10), np.ones(10), g)


class TestFamilyLabel:
    def test_three_model_labels(self):
        assert family_label(FamilyConfig(family=HIERARCHICAL,
                                         prior_kind=GAMMA_LASSO)) == "HV-GFGL"
        assert family_label(FamilyConfig(family=MEAN_FIELD,
                                         prior_kind=GAMMA_LASSO)) == "MF-GFGL"
        assert family_label(FamilyConfig(family=MEAN_FIELD,
                                         prior_kind=PLAIN_LASSO)) == "MF-GFL"


@pytest.fixture(scope="module")
def tiny_run():
    ds, truth = simulate(smoke_spec(seed=0))
    truth_field = relative_rate_field(truth.theta_tilde, "truth")
    configs = [
        FamilyConfig(family=HIERARCHICAL, prior_kind=GAMMA_LASSO,
                     samples_grad=2, samples_cdf=20),
        FamilyConfig(family=MEAN_FIELD, prior_kind=GAMMA_LASSO,
                     samples_grad=2, samples_cdf=20),
        FamilyConfig(family=MEAN_FIELD, prior_kind=PLAIN_LASSO,
                     samples_grad=2, samples_cdf=20),
    ]
    tc = TrainConfig(max_iters=60, seed=1)
    # the smoke design keeps one molecule constant, so standardized RMSE
    # is undefined and the raw scale is the right one here
    report = run_ablation_suite(ds, truth_field, configs, tc,
                                rmse_scale=RAW, posterior_draws=120)
    return ds, truth_field, configs, tc, report


class TestAblationSuite:
    def test_tic_row_leads_and_has_no_coverage(self, tiny_run):
        _, _, _, _, report = tiny_run
        assert report.rmse_rows[0][0] == "TIC"
        assert [r[0] for r in report.rmse_rows] == ["TIC", "HV-GFGL", "MF-GFGL", "MF-GFL"]
        assert all(r[0] != "TIC" for r in report.coverage_rows)
        assert [r[:2][0] for r in report.coverage_rows] == [
            "HV-GFGL", "HV-GFGL", "MF-GFGL", "MF-GFGL", "MF-GFL", "MF-GFL"]

    def test_per_molecule_columns_match(self, tiny_run):
        ds, _, _, _, report = tiny_run
        assert report.molecule_names == ds.molecule_names
        for _, per_mol, _ in report.rmse_rows:
            assert per_mol.shape == (ds.num_molecules,)
        for _, level, per_mol, _ in report.coverage_rows:
            assert level in (0.9, 0.5)
            assert per_mol.shape == (ds.num_molecules,)

    def test_report_is_byte_stable(self, tiny_run, tmp_path):
        ds, truth_field, configs, tc, report = tiny_run
        again = run_ablation_suite(ds, truth_field, configs, tc,
                                   rmse_scale=RAW, posterior_draws=120)
        report.write_csv(tmp_path / "one")
        again.write_csv(tmp_path / "two")
        for name in ("rmse.csv", "coverage.csv"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_text_table_renders_all_rows(self, tiny_run):
        _, _, _, _, report = tiny_run
        text = report.format_text()
        for label in ("TIC", "HV-GFGL", "MF-GFGL", "MF-GFL"):
            assert label in text
        assert "coverage" in text
