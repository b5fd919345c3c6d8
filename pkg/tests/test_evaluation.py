"""Metrics, rasters, fingerprint localization and structural diagnostics."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FREQ, random_links, random_model
from propsplat.errors import InvalidArgumentError
from propsplat.evaluation import (FingerprintDB, build_fingerprint_db, coverage_grid,
                                  diagnostics, error_metrics, knn_localize, knn_localize_detail,
                                  knn_localize_many, localization_report, read_raster,
                                  write_raster, write_raster_csv)
from propsplat.model import (LinkQuery, ModelState, baseline_path_loss, influence_matrix, predict,
                             predict_batch)

finite = st.floats(-200, 200, allow_nan=False)


class TestErrorMetrics:

    def test_perfect(self):
        r = error_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (r.mae_db, r.rmse_db, r.median_abs_err_db, r.p95_abs_err_db) == (0, 0, 0, 0)

    def test_hand_computed(self):
        r = error_metrics([3.0, -4.0], [0.0, 0.0])
        assert r.mae_db == 3.5 and r.rmse_db == pytest.approx(math.sqrt(12.5), rel=1e-15)

    def test_nearest_rank_p95(self):
        errs = np.arange(1.0, 101.0)
        assert error_metrics(errs, np.zeros(100)).p95_abs_err_db == 95.0

    def test_length_mismatch_and_empty(self):
        with pytest.raises(InvalidArgumentError):
            error_metrics([1.0], [1.0, 2.0])
        with pytest.raises(InvalidArgumentError):
            error_metrics([], [])

    def test_tiny_errors_do_not_underflow(self):
        r = error_metrics([7.5e-183, 0.0], [0.0, 7.5e-183])
        assert r.rmse_db == pytest.approx(7.5e-183, rel=1e-12)

    @given(st.lists(st.tuples(finite, finite), min_size=1, max_size=60))
    def test_mae_not_above_rmse(self, pairs):
        p, t = np.array(pairs).T
        r = error_metrics(p, t)
        assert r.mae_db <= r.rmse_db * (1 + 1e-12) + 1e-300

    def test_tsv(self):
        lines = error_metrics([1.0], [0.0]).to_tsv().splitlines()
        assert lines[0].split("\t") == ["mae_db", "rmse_db", "median_abs_err_db",
                                        "p95_abs_err_db", "n"]


class TestCoverageGrid:

    def test_zero_offset_is_radial_baseline(self):
        m = ModelState.empty(FREQ, 2.7)
        r = coverage_grid(m, [0, 0, 10], (-50, -50, 50, 50), 10.0)
        pts = r.cell_centers()
        np.testing.assert_allclose(
            r.values.ravel(), baseline_path_loss(np.array([0, 0, 10.0]), pts, FREQ, 2.7),
            rtol=0, atol=1e-12)
        d = np.round(np.linalg.norm(pts[:, :2], axis=1), 9)
        for dist in np.unique(d):
            vals = r.values.ravel()[d == dist]
            assert np.ptp(vals) <= 1e-9
        order = np.argsort(d)
        assert np.all(np.diff(r.values.ravel()[order]) >= -1e-9)

    def test_single_cell(self, rng):
        m = random_model(rng, 30)
        r = coverage_grid(m, [3, 4, 20], (0, 0, 5, 5), 5.0)
        assert r.values.shape == (1, 1)
        assert r.values[0, 0] == predict(m, LinkQuery([3, 4, 20], [2.5, 2.5, 1.5], FREQ))

    def test_offset_only_has_zero_mean(self, rng):
        m = random_model(rng, 50)
        r = coverage_grid(m, [0, 0, 10], (-60, -60, 60, 60), 3.0, offset_only=True)
        assert abs(np.mean(r.values)) < 1e-9 and r.kind == "offset"

    def test_transmitter_cell_uses_clamp(self):
        m = ModelState.empty(FREQ, 2.0)
        r = coverage_grid(m, [5, 5, 1.5], (0, 0, 10, 10), 10.0)
        assert r.values[0, 0] == baseline_path_loss([0, 0, 0], [1, 0, 0], FREQ, 2.0)

    def test_file_round_trip(self, rng, tmp_path):
        r = coverage_grid(random_model(rng, 10), [0, 0, 10], (-20, -10, 20, 10), 4.0,
                          offset_only=True)
        write_raster(r, tmp_path / "r.bin")
        back = read_raster(tmp_path / "r.bin")
        np.testing.assert_array_equal(back.values, r.values)
        assert back.origin == r.origin and back.spatial_mean_db == r.spatial_mean_db
        rows = (tmp_path / "r.csv")
        write_raster_csv(r, rows)
        assert len(rows.read_text().splitlines()) == 1 + r.width * r.height
        table = np.loadtxt(rows, delimiter=",", skiprows=1)
        np.testing.assert_array_equal(table[:, 2], r.values.ravel())
        np.testing.assert_array_equal(table[:, :2], r.cell_centers()[:, :2])

    def test_bad_extent(self, rng):
        with pytest.raises(InvalidArgumentError):
            coverage_grid(ModelState.empty(FREQ), [0, 0, 0], (0, 0, -1, 1), 1.0)


def rssi_models(gateways, p0=-40.0, gamma=2.0):
    return {g: ModelState.empty(FREQ, gamma, p0_dbm=p0) for g in gateways}


class TestFingerprintDB:

    def test_single_entry(self):
        gw = {"a": [0.0, 0.0, 2.0]}
        db = build_fingerprint_db(rssi_models(gw), gw, [[3.0, 4.0, 2.0]])
        assert db.fingerprints.shape == (1, 1)
        assert db.fingerprints[0, 0] == -40.0 - baseline_path_loss([3, 4, 2], [0, 0, 2], FREQ, 2.0)

    def test_distance_ordering(self):
        gw = {"a": [0.0, 0.0, 0.0]}
        pos = np.column_stack([np.arange(1.0, 20.0), np.zeros(19), np.zeros(19)])
        db = build_fingerprint_db(rssi_models(gw), gw, pos)
        assert np.all(np.diff(db.fingerprints[:, 0]) < 0)

    def test_twenty_one_gateways(self, rng):
        gw = {f"g{i}": rng.uniform(0, 30, 3) for i in range(21)}
        db = build_fingerprint_db(rssi_models(gw), gw, rng.uniform(0, 30, (10, 3)))
        assert db.fingerprints.shape == (10, 21)

    def test_missing_model_named(self):
        gw = {"a": [0, 0, 0], "b": [1, 0, 0]}
        with pytest.raises(InvalidArgumentError, match="'b'"):
            build_fingerprint_db(rssi_models({"a": None}), gw, [[5, 5, 0]])

    def test_path_loss_model_rejected(self):
        gw = {"a": [0, 0, 0]}
        with pytest.raises(InvalidArgumentError, match="RSSI"):
            build_fingerprint_db({"a": ModelState.empty(FREQ)}, gw, [[5, 5, 0]])


def grid_db(rng, n=40, g=4):
    pos = np.column_stack([rng.uniform(0, 30, (n, 2)), np.ones(n)])
    return FingerprintDB(pos, rng.normal(-60, 10, (n, g)), [f"g{i}" for i in range(g)],
                         rng.uniform(0, 30, (g, 3)))


class TestKnnLocalize:

    def test_exact_match(self, rng):
        db = grid_db(rng)
        for i in (0, 7, 39):
            np.testing.assert_array_equal(knn_localize(db, db.fingerprints[i], 1), db.positions[i])

    def test_k_equals_grid_size(self, rng):
        db = grid_db(rng)
        np.testing.assert_allclose(knn_localize(db, rng.normal(-60, 10, 4), len(db)),
                                   db.positions.mean(axis=0), rtol=1e-12)

    def test_symmetric_midpoint(self):
        db = FingerprintDB([[0, 0, 0], [2, 0, 0]], [[-50.0], [-70.0]], ["a"], [[0, 0, 0]])
        np.testing.assert_array_equal(knn_localize(db, [-60.0], 2), [1, 0, 0])

    def test_ties_prefer_lower_index(self):
        db = FingerprintDB([[0, 0, 0], [2, 0, 0]], [[-50.0], [-70.0]], ["a"], [[0, 0, 0]])
        np.testing.assert_array_equal(knn_localize(db, [-60.0], 1), [0, 0, 0])

    def test_dimension_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            knn_localize(grid_db(rng), [1.0, 2.0], 1)

    def test_k_range(self, rng):
        db = grid_db(rng)
        with pytest.raises(InvalidArgumentError):
            knn_localize(db, db.fingerprints[0], 0)
        with pytest.raises(InvalidArgumentError):
            knn_localize(db, db.fingerprints[0], len(db) + 1)

    @given(st.integers(0, 10 ** 6), finite, st.integers(1, 10))
    def test_common_offset_invariance(self, seed, c, k):
        rng = np.random.default_rng(seed)
        db = grid_db(rng)
        obs = rng.normal(-60, 10, 4)
        shifted = FingerprintDB(db.positions, db.fingerprints + c, db.gateway_ids,
                                db.gateway_positions)
        a = knn_localize_detail(db, obs, k).neighbors
        b = knn_localize_detail(shifted, obs + c, k).neighbors
        # shifting by c is exact only when no rounding occurs; compare sets on clear margins
        d = np.linalg.norm(db.fingerprints - obs, axis=1)
        margin = np.sort(d)[k] - np.sort(d)[k - 1] if k < len(db) else np.inf
        if margin > 1e-6:
            assert set(a) == set(b)

    def test_missing_readings_masked(self, rng):
        db = grid_db(rng)
        obs = db.fingerprints[5].copy()
        obs[2] = np.nan
        res = knn_localize_detail(db, obs, 1)
        np.testing.assert_array_equal(res.position, db.positions[5])
        assert res.used_mask.tolist() == [True, True, False, True]

    def test_batch_matches_single(self, rng):
        db = grid_db(rng)
        obs = rng.normal(-60, 10, (7, 4))
        many = knn_localize_many(db, obs, 3)
        np.testing.assert_array_equal(many, [knn_localize(db, o, 3) for o in obs])


class TestLocalizationReport:

    def test_zero(self):
        r = localization_report([[1, 2, 3]], [[1, 2, 3]])
        assert (r.mean_m, r.median_m) == (0.0, 0.0)

    def test_hand_computed(self):
        r = localization_report([[1, 0, 0], [3, 0, 0]], [[0, 0, 0], [0, 0, 0]])
        assert (r.mean_m, r.median_m) == (2.0, 2.0)

    def test_two_d_ignores_height(self):
        assert localization_report([[0, 0, 5]], [[0, 0, 0]], dims=2).mean_m == 0.0
        assert localization_report([[0, 0, 5]], [[0, 0, 0]], dims=3).mean_m == 5.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            localization_report([[0, 0, 0]], [[0, 0, 0], [1, 1, 1]])


class TestDiagnostics:

    def test_random_model(self, rng):
        m = random_model(rng, 100)
        tx, rx = random_links(rng, 1000)
        rep = diagnostics(m, tx, rx)
        assert rep.max_additivity_error_db < 1e-9
        assert rep.sign_consistency == 1.0 and rep.n_sign_pairs > 0

    def test_zero_offsets_vacuous(self, rng):
        m = random_model(rng, 20)
        m.offset[:] = 0.0
        rep = diagnostics(m, *random_links(rng, 50))
        assert rep.sign_consistency == 1.0 and rep.sign_set_empty

    def test_matches_explicit_removal(self, rng):
        m = random_model(rng, 12)
        tx, rx = random_links(rng, 30)
        full = predict_batch(m, (tx, rx, FREQ))
        for i in range(m.n_gaussians):
            less = predict_batch(m.without(i), (tx, rx, FREQ))
            alpha = influence_matrix(m, tx, rx)[i]
            assert np.max(np.abs((full - less) - m.offset[i] * alpha)) < 1e-9

    def test_empty_queries(self, rng):
        with pytest.raises(InvalidArgumentError):
            diagnostics(random_model(rng, 2), np.zeros((0, 3)), np.zeros((0, 3)))
