"""Simulator tests: construction exactness, sampling statistics, censoring.

Statistical checks run on fixed seeds with comfortable thresholds (a chi
square goodness-of-fit at alpha 0.01, proportion convergence at 1%), so
they are deterministic despite measuring randomness.
"""

import numpy as np
import pytest
from scipy import stats

from gfgl.data import datasets_equal, load_dataset, save_dataset
from gfgl.errors import ConfigError, DataError
from gfgl.simulate import (
    PRESET_NAMES,
    Disc,
    Rect,
    SimSpec,
    count_change_points,
    get_preset,
    load_spec,
    load_truth,
    paper_like_spec,
    save_spec,
    save_truth,
    simulate,
    smoke_spec,
    true_log_rates,
)


def flat_spec(rows=4, cols=4, d=3, total_scale=300.0, seed=0, **kwargs) -> SimSpec:
    return SimSpec(
        rows=rows,
        cols=cols,
        base_log_rate=(0.0,) * d,
        regions=((),) * d,
        total_scale=total_scale,
        lod=(0,) * d,
        seed=seed,
        **kwargs,
    )


class TestSpecValidation:
    def test_rect_must_fit_grid(self):
        with pytest.raises(ConfigError, match="does not fit"):
            SimSpec(rows=4, cols=4, base_log_rate=(0.0,),
                    regions=((Rect(0, 5, 0, 2, 1.0),),),
                    total_scale=100.0, lod=(0,))

    def test_disc_must_fit_grid(self):
        with pytest.raises(ConfigError, match="does not fit"):
            SimSpec(rows=4, cols=4, base_log_rate=(0.0,),
                    regions=((Disc(0.0, 0.0, 3.0, 1.0),),),
                    total_scale=100.0, lod=(0,))

    def test_per_molecule_lengths_must_agree(self):
        with pytest.raises(ConfigError, match="per molecule"):
            SimSpec(rows=4, cols=4, base_log_rate=(0.0, 0.0),
                    regions=((),), total_scale=100.0, lod=(0, 0))

    def test_negative_lod_rejected(self):
        with pytest.raises(ConfigError, match="nonnegative"):
            SimSpec(rows=2, cols=2, base_log_rate=(0.0,), regions=((),),
                    total_scale=100.0, lod=(-1,))

    def test_default_names(self):
        assert flat_spec(d=3).names() == ("met1", "met2", "met3")


class TestTrueRates:
    def test_no_regions_is_flat(self):
        lt = true_log_rates(flat_spec(d=2))
        np.testing.assert_array_equal(lt, np.zeros((16, 2)))

    def test_offsets_add(self):
        spec = SimSpec(rows=4, cols=4, base_log_rate=(0.5,),
                       regions=((Rect(0, 2, 0, 4, 1.0), Rect(0, 4, 0, 2, 0.25)),),
                       total_scale=100.0, lod=(0,))
        lt = true_log_rates(spec).reshape(4, 4)
        assert lt[0, 0] == 0.5 + 1.0 + 0.25
        assert lt[0, 3] == 0.5 + 1.0
        assert lt[3, 0] == 0.5 + 0.25
        assert lt[3, 3] == 0.5

    def test_disc_ratio_is_exact(self):
        spec = SimSpec(rows=9, cols=9, base_log_rate=(0.2, 0.2),
                       regions=((Disc(4.0, 4.0, 2.0, np.log(4.0)),), ()),
                       total_scale=500.0, lod=(0, 0))
        _, truth = simulate(spec)
        tt = truth.theta_tilde[:, 0]
        inside = Disc(4.0, 4.0, 2.0, 0.0).contains(
            *np.meshgrid(np.arange(9), np.arange(9), indexing="ij")).reshape(-1)
        ratio = tt[inside][0] / tt[~inside][0]
        assert ratio == pytest.approx(4.0, rel=1e-12)
        assert np.unique(tt[inside]).size == 1
        assert np.unique(tt[~inside]).size == 1


class TestSimulate:
    def test_uniform_counts_pass_goodness_of_fit(self):
        ds, _ = simulate(flat_spec(rows=6, cols=6, d=4, total_scale=400.0, seed=3))
        pooled = ds.counts.sum(axis=0)
        res = stats.chisquare(pooled)
        assert res.pvalue > 0.01
        assert ds.observed.all()

    def test_truth_columns_normalized(self):
        _, truth = simulate(flat_spec(seed=1))
        np.testing.assert_allclose(truth.theta_tilde.sum(axis=0), 1.0, atol=1e-12)

    def test_proportions_converge_at_large_scale(self):
        spec = SimSpec(rows=4, cols=4, base_log_rate=(0.0, np.log(2.0), 1.0),
                       regions=((), (), (Rect(0, 2, 0, 4, -0.5),)),
                       total_scale=1e6, lod=(0, 0, 0), seed=5)
        ds, _ = simulate(spec)
        lt = true_log_rates(spec)
        p = np.exp(lt) / np.exp(lt).sum(axis=1, keepdims=True)
        totals = ds.counts.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(ds.counts / totals, p, rtol=0.01)

    def test_censoring_is_exactly_the_lod_rule(self):
        spec = smoke_spec(seed=2)
        ds, _ = simulate(spec)
        lod = np.asarray(spec.lod)
        # observed entries always sit at or above their detection limit
        assert (ds.counts[ds.observed] >= np.broadcast_to(lod, ds.counts.shape)[ds.observed]).all()
        # censored entries exist for the low-abundance molecule and are withheld
        assert (~ds.observed[:, 2]).any()
        assert (ds.counts[~ds.observed] == 0).all()

    def test_fixed_seed_gives_identical_bytes(self, tmp_path):
        ds1, _ = simulate(smoke_spec(seed=9))
        ds2, _ = simulate(smoke_spec(seed=9))
        assert datasets_equal(ds1, ds2)
        save_dataset(ds1, tmp_path / "a.csv", tmp_path / "a.meta")
        save_dataset(ds2, tmp_path / "b.csv", tmp_path / "b.meta")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.meta").read_bytes() == (tmp_path / "b.meta").read_bytes()

    def test_different_seed_differs(self):
        ds1, _ = simulate(smoke_spec(seed=0))
        ds2, _ = simulate(smoke_spec(seed=1))
        assert not datasets_equal(ds1, ds2)

    def test_constant_total_mode(self):
        ds, _ = simulate(flat_spec(d=2, total_scale=250.0, constant_total=True, seed=4))
        np.testing.assert_array_equal(ds.counts.sum(axis=1), 250)

    def test_fully_censored_molecule_still_loads(self, tmp_path):
        spec = SimSpec(rows=3, cols=3, base_log_rate=(0.0, 0.0),
                       regions=((), ()), total_scale=200.0,
                       lod=(0, 10**9), seed=6)
        ds, _ = simulate(spec)
        assert not ds.observed[:, 1].any()
        assert ds.observed[:, 0].all()
        save_dataset(ds, tmp_path / "cens.csv", tmp_path / "cens.meta")
        back = load_dataset(tmp_path / "cens.csv", tmp_path / "cens.meta")
        assert datasets_equal(ds, back)

    def test_overwhelming_censoring_names_the_cure(self):
        spec = SimSpec(rows=3, cols=3, base_log_rate=(0.0,),
                       regions=((),), total_scale=2.0, lod=(4,), seed=7)
        with pytest.raises(DataError, match="total_scale"):
            simulate(spec)


class TestChangePoints:
    def test_constant_field_has_none(self):
        _, truth = simulate(flat_spec(d=2, seed=8))
        report = count_change_points(truth)
        np.testing.assert_array_equal(report.counts, [0, 0])
        assert report.ok

    @pytest.mark.parametrize("r, c", [(2, 3), (4, 4), (1, 5)])
    def test_interior_rectangle_has_perimeter_edges(self, r, c):
        spec = SimSpec(rows=10, cols=10, base_log_rate=(0.0,),
                       regions=((Rect(3, 3 + r, 2, 2 + c, 1.0),),),
                       total_scale=500.0, lod=(0,), seed=9)
        _, truth = simulate(spec)
        report = count_change_points(truth)
        assert report.counts[0] == 2 * (r + c)

    def test_bound_value_and_flag(self):
        # 2x2 grid, D=2: budget is M - M/D = 2; opposite corner bumps
        # cut all 4 edges for the first molecule
        spec = SimSpec(rows=2, cols=2, base_log_rate=(0.0, 0.0),
                       regions=(
                           (Rect(0, 1, 0, 1, 1.0), Rect(1, 2, 1, 2, 1.0)),
                           (),
                       ),
                       total_scale=500.0, lod=(0, 0), seed=10)
        _, truth = simulate(spec)
        report = count_change_points(truth)
        assert report.bound == 2.0
        np.testing.assert_array_equal(report.counts, [4, 0])
        np.testing.assert_array_equal(report.within_bound, [False, True])
        assert not report.ok


class TestPersistence:
    def test_spec_json_round_trip(self, tmp_path):
        spec = paper_like_spec(seed=3)
        save_spec(spec, tmp_path / "spec.json")
        assert load_spec(tmp_path / "spec.json") == spec

    def test_spec_round_trip_keeps_region_types(self, tmp_path):
        spec = smoke_spec(seed=1)
        save_spec(spec, tmp_path / "spec.json")
        back = load_spec(tmp_path / "spec.json")
        assert isinstance(back.regions[0][0], Rect)
        assert isinstance(back.regions[2][0], Disc)

    def test_truth_csv_round_trip(self, tmp_path):
        _, truth = simulate(smoke_spec(seed=4))
        save_truth(truth, tmp_path / "truth.csv")
        values, names = load_truth(tmp_path / "truth.csv")
        np.testing.assert_array_equal(values, truth.theta_tilde)
        assert names == truth.molecule_names

    def test_load_truth_rejects_foreign_files(self, tmp_path):
        p = tmp_path / "other.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(DataError, match="not a truth file"):
            load_truth(p)


class TestPresets:
    def test_names_and_lookup(self):
        assert set(PRESET_NAMES) == {"paper-like", "smoke"}
        for name in PRESET_NAMES:
            assert get_preset(name).seed == 0
        with pytest.raises(ConfigError, match="unknown preset"):
            get_preset("nope")

    def test_paper_like_shape_and_censoring(self):
        spec = paper_like_spec(seed=0)
        assert (spec.rows, spec.cols, spec.num_molecules) == (32, 32, 7)
        ds, truth = simulate(spec)
        censored_frac = (~ds.observed).mean(axis=0)
        np.testing.assert_array_equal(censored_frac[:5], 0.0)
        for j in (5, 6):
            assert 0.05 <= censored_frac[j] <= 0.35
        assert count_change_points(truth).ok

    def test_smoke_preset_is_small_and_censored(self):
        spec = smoke_spec(seed=0)
        assert (spec.rows, spec.cols, spec.num_molecules) == (8, 8, 3)
        ds, _ = simulate(spec)
        assert (~ds.observed[:, 2]).any()
        assert ds.observed[:, :2].all()
