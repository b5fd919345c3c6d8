"""CSV ingestion, projection, subsampling, splitting and the model file."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FREQ, random_model
from propsplat.data_io import (RandomFraction, SchemaDescriptor, Spatial, geo_to_local,
                               haversine_m, load_measurements, load_model, local_to_geo,
                               model_from_bytes, model_to_bytes, parse_measurements,
                               records_to_measurements, save_measurements, save_model,
                               spatial_subsample, split_dataset, subsample_indices,
                               write_measurements)
from propsplat.errors import (ChecksumError, InvalidArgumentError, ModelFileError, SchemaError,
                              TruncatedFileError, VersionMismatchError)
from propsplat.measurements import MeasurementSet
from propsplat.model import ModelState

GEO_HEADER = "tx_lat,tx_lon,tx_alt_m,rx_lat,rx_lon,rx_alt_m,freq_hz,path_loss_db\n"


def rx_line(xs):
    """Dataset whose receivers sit on the x axis at the given positions."""
    xs = np.asarray(xs, dtype=float)
    rx = np.column_stack([xs, np.zeros_like(xs), np.full_like(xs, 1.5)])
    tx = np.tile([0.0, -50.0, 17.0], (len(xs), 1))
    return MeasurementSet(tx, rx, FREQ, np.arange(len(xs), dtype=float))


class TestParseMeasurements:

    def test_empty_file_with_header(self):
        assert parse_measurements(io.StringIO(GEO_HEADER)) == []

    def test_round_trip_bit_exact(self):
        row = "51.50722,-0.1275,17.0,51.5101,-0.12,1.5,5850000000.0,123.45678901234567\n"
        records = parse_measurements(io.StringIO(GEO_HEADER + row))
        buf = io.StringIO()
        write_measurements(records, buf)
        again = parse_measurements(io.StringIO(buf.getvalue()))
        assert again == records and len(again) == 1
        assert again[0].value_db == 123.45678901234567

    def test_latitude_out_of_range_names_row(self):
        rows = ("51.5,-0.1,17,51.5,-0.1,1.5,9e8,100\n"
                "51.5,-0.1,17,91,-0.1,1.5,9e8,100\n")
        with pytest.raises(SchemaError) as err:
            parse_measurements(io.StringIO(GEO_HEADER + rows))
        assert err.value.problems[0][:2] == (3, "rx_lat")

    def test_all_bad_fields_reported(self):
        rows = "x,-0.1,17,51.5,-0.1,1.5,9e8,100\n51.5,-0.1,17,51.5,-0.1,1.5,nan,100\n"
        with pytest.raises(SchemaError) as err:
            parse_measurements(io.StringIO(GEO_HEADER + rows))
        assert [(p[0], p[1]) for p in err.value.problems] == [(2, "tx_lat"), (3, "freq_hz")]

    def test_mixed_value_kinds(self):
        text = ("tx_x_m,tx_y_m,tx_z_m,rx_x_m,rx_y_m,rx_z_m,freq_hz,value_db,value_kind\n"
                "0,0,0,1,0,0,9e8,50,path_loss\n0,0,0,2,0,0,9e8,-50,rssi\n")
        with pytest.raises(SchemaError, match="mixed"):
            parse_measurements(io.StringIO(text))

    def test_missing_column(self):
        with pytest.raises(SchemaError, match="path_loss_db"):
            parse_measurements(io.StringIO(GEO_HEADER.replace(",path_loss_db", "")),
                               SchemaDescriptor.geodetic())

    def test_configurable_column_names(self):
        schema = SchemaDescriptor.geodetic(columns={"value": "loss"})
        text = GEO_HEADER.replace("path_loss_db", "loss") + "51.5,-0.1,17,51.5,-0.1,1.5,9e8,7\n"
        assert parse_measurements(io.StringIO(text), schema)[0].value_db == 7.0

    def test_missing_altitudes_use_defaults(self):
        text = "tx_lat,tx_lon,rx_lat,rx_lon,freq_hz,path_loss_db\n51.5,-0.1,51.6,-0.1,9e8,100\n"
        rec = parse_measurements(io.StringIO(text))[0]
        assert rec.tx[2] == 17.0 and rec.rx[2] == 1.5

    def test_rows_are_never_dropped(self):
        body = "".join(f"51.5,-0.1,17,51.5{i},-0.1,1.5,9e8,{i}\n" for i in range(1, 50))
        assert len(parse_measurements(io.StringIO(GEO_HEADER + body))) == 49


class TestGeoToLocal:

    def test_origin(self):
        np.testing.assert_array_equal(geo_to_local(51.5, -0.1, 12.0, (51.5, -0.1)), [0, 0, 12.0])

    def test_thousandth_degree_north(self):
        x, y, _ = geo_to_local(51.501, -0.1, 0.0, (51.5, -0.1))
        assert x == 0.0 and y == pytest.approx(111.19, abs=0.01)

    @given(st.floats(-60, 60), st.floats(-170, 170), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
    def test_inverse(self, lat0, lon0, dlat, dlon):
        origin = (lat0, lon0)
        xyz = geo_to_local(lat0 + dlat, lon0 + dlon, 3.0, origin)
        back = local_to_geo(xyz, origin)
        assert abs(back[0] - (lat0 + dlat)) < 1e-9 and abs(back[1] - (lon0 + dlon)) < 1e-9

    def test_distortion_within_30_km(self):
        rng = np.random.default_rng(4)
        for lat0 in (-50.0, 0.0, 30.0, 55.0):
            origin = (lat0, 10.0)
            lat = lat0 + rng.uniform(-0.13, 0.13, 200)
            lon = 10.0 + rng.uniform(-0.13, 0.13, 200) / np.cos(np.radians(lat0))
            p = geo_to_local(lat, lon, 0.0, origin)
            i, j = rng.integers(0, 200, (2, 500))
            keep = i != j
            planar = np.linalg.norm(p[i[keep], :2] - p[j[keep], :2], axis=1)
            sphere = haversine_m(lat[i[keep]], lon[i[keep]], lat[j[keep]], lon[j[keep]])
            assert np.max(np.abs(planar - sphere) / sphere) < 0.005

    def test_default_origin_is_first_transmitter(self):
        text = GEO_HEADER + "51.5,-0.1,17,51.501,-0.1,1.5,9e8,100\n"
        data, manifest = records_to_measurements(parse_measurements(io.StringIO(text)))
        assert manifest.origin == (51.5, -0.1)
        np.testing.assert_array_equal(data.tx[0], [0, 0, 17])


class TestSpatialSubsample:

    def test_large_spacing_keeps_one(self):
        tr, te = spatial_subsample(rx_line(np.arange(11) * 100.0), 1e6)
        assert len(tr) == 1 and len(te) == 10

    def test_collinear_hand_trace(self):
        tr, _ = spatial_subsample(rx_line(np.arange(11) * 100.0), 300.0)
        np.testing.assert_array_equal(tr.rx[:, 0], [0, 300, 600, 900])

    def test_tiny_spacing_keeps_all(self):
        data = rx_line(np.arange(11) * 100.0)
        tr, te = spatial_subsample(data, 1e-9)
        assert len(tr) == 11 and len(te) == 0

    @given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 200.0))
    def test_minimum_distance_guarantee(self, seed, spacing):
        pts = np.random.default_rng(seed).uniform(-500, 500, (300, 2))
        keep = subsample_indices(pts, spacing)
        sel = pts[keep]
        d = np.linalg.norm(sel[:, None] - sel[None], axis=2)
        d[np.diag_indices(len(sel))] = np.inf
        assert np.all(d >= spacing)
        # greedy maximality: every rejected point is near some kept point
        rest = np.delete(pts, keep, axis=0)
        if len(rest):
            near = np.linalg.norm(rest[:, None] - sel[None], axis=2).min(axis=1)
            assert np.all(near < spacing)


class TestSplitDataset:

    def test_random_sizes(self):
        tr, te = split_dataset(rx_line(np.arange(100.0)), RandomFraction(0.8),
                               np.random.default_rng(0))
        assert (len(tr), len(te)) == (80, 20)

    def test_spatial_delegates(self):
        data = rx_line(np.arange(11) * 100.0)
        a = split_dataset(data, Spatial(300.0))
        b = spatial_subsample(data, 300.0)
        assert a[0] == b[0] and a[1] == b[1]

    def test_same_seed_same_partition(self):
        data = rx_line(np.arange(57.0))
        a = split_dataset(data, RandomFraction(0.3), np.random.default_rng(9))
        b = split_dataset(data, RandomFraction(0.3), np.random.default_rng(9))
        assert a[0] == b[0]

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.2, 1.5])
    def test_fraction_range(self, f):
        with pytest.raises(InvalidArgumentError):
            split_dataset(rx_line([1.0, 2.0]), RandomFraction(f))

    @given(st.integers(1, 200), st.floats(0.01, 0.99), st.integers(0, 1000))
    def test_partition(self, n, f, seed):
        data = rx_line(np.arange(n, dtype=float))
        tr, te = split_dataset(data, RandomFraction(f), np.random.default_rng(seed))
        assert len(tr) + len(te) == n
        assert sorted(np.concatenate([tr.target, te.target])) == list(data.target)


class TestMeasurementFiles:

    def test_local_round_trip(self, tmp_path):
        data = rx_line(np.linspace(3.3, 700.1, 13))
        path = tmp_path / "m.csv"
        save_measurements(data, path)
        back, manifest = load_measurements(path)
        assert back == data and manifest.mode == "local" and manifest.count == 13


class TestModelFile:

    def test_empty_model(self, tmp_path):
        save_model(ModelState.empty(9e8, 2.3), tmp_path / "e.pspl")
        m = load_model(tmp_path / "e.pspl")
        assert m.n_gaussians == 0 and m.gamma == 2.3 and m.p0_dbm is None

    def test_large_model_bit_exact(self, tmp_path):
        m = random_model(np.random.default_rng(0), 9000, p0=-41.25)
        m.origin = (51.5, -0.12)
        m.metadata["note"] = "x"
        save_model(m, tmp_path / "big.pspl")
        back = load_model(tmp_path / "big.pspl")
        for name in ("mu", "log_scale", "quat", "offset"):
            assert getattr(back, name).tobytes() == getattr(m, name).tobytes()
        assert (back.gamma, back.frequency_hz, back.p0_dbm, back.origin) == (
            m.gamma, m.frequency_hz, m.p0_dbm, m.origin)
        assert back.metadata == {"note": "x"}

    def test_corrupted_byte(self):
        blob = bytearray(model_to_bytes(random_model(np.random.default_rng(1), 5)))
        blob[100] ^= 0xFF
        with pytest.raises(ChecksumError):
            model_from_bytes(bytes(blob))

    def test_truncated(self):
        blob = model_to_bytes(random_model(np.random.default_rng(1), 5))
        with pytest.raises(TruncatedFileError):
            model_from_bytes(blob[:-10])

    def test_version(self):
        blob = bytearray(model_to_bytes(ModelState.empty(FREQ)))
        blob[4:8] = struct.pack("<I", 99)
        with pytest.raises(VersionMismatchError):
            model_from_bytes(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(ModelFileError, match="magic"):
            model_from_bytes(b"NOPE" + bytes(100))

    def test_errors_are_distinct(self):
        kinds = {ChecksumError, TruncatedFileError, VersionMismatchError}
        assert len(kinds) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)
