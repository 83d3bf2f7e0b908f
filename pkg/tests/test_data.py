import json
import struct

import numpy as np
import pytest

from ensdown.data import (
    GRID_MAGIC,
    CalendarError,
    DatasetSplit,
    GridField,
    GridFormatError,
    PeriodSpec,
    SynthConfig,
    TimeAxis,
    align_time,
    generate_pseudo_reality,
    latent_state,
    load_grid,
    saturating_map,
    save_grid,
    select_period,
)

SMALL = SynthConfig(coarse_height=4, coarse_width=4, fine_height=8, fine_width=8,
                    start_year=1995, end_year=2010)


def small_field(t=10, c=2, h=3, w=4, start_year=2000):
    rng = np.random.default_rng(0)
    return GridField(
        values=rng.normal(size=(t, c, h, w)),
        variables=[f"v{i}" for i in range(c)],
        lat=np.linspace(30, 40, h),
        lon=np.linspace(-120, -110, w),
        time=TimeAxis(start_year, np.arange(t)),
        units=["u"] * c,
    )


class TestTimeAxis:
    def test_year_range_span(self):
        ax = TimeAxis.year_range(1970, 2100)
        assert len(ax) == 131 * 365
        assert ax.years()[0] == 1970
        assert ax.years()[-1] == 2100

    def test_month_boundaries(self):
        ax = TimeAxis.year_range(2000, 2000)
        months = ax.months()
        assert months[0] == 1
        assert months[30] == 1    # Jan 31
        assert months[31] == 2    # Feb 1
        assert months[58] == 2    # Feb 28
        assert months[59] == 3    # Mar 1
        assert months[364] == 12  # Dec 31
        # no-leap calendar: February always has 28 days
        assert int((months == 2).sum()) == 28

    def test_summer_day_count_single_year(self):
        ax = TimeAxis.year_range(2000, 2000)
        summer = np.isin(ax.months(), [6, 7, 8])
        assert int(summer.sum()) == 92  # 30 + 31 + 31

    def test_take_preserves_stamps(self):
        ax = TimeAxis.year_range(2000, 2001)
        sub = ax.take(np.array([3, 100, 400]))
        np.testing.assert_array_equal(sub.offsets, [3, 100, 400])
        assert not sub.is_contiguous()

    def test_dict_round_trip_contiguous_and_not(self):
        ax = TimeAxis.year_range(1999, 2000)
        assert TimeAxis.from_dict(ax.to_dict()) == ax
        sub = ax.take(np.array([0, 5, 9]))
        assert TimeAxis.from_dict(sub.to_dict()) == sub

    def test_rejects_nonincreasing(self):
        with pytest.raises(CalendarError):
            TimeAxis(2000, [0, 2, 2])


class TestPeriodSpec:
    def test_label_and_parse(self):
        p = PeriodSpec.parse("2006-2040")
        assert p == PeriodSpec(2006, 2040)
        assert p.label == "2006-2040"

    def test_rejects_reversed(self):
        with pytest.raises(ValueError):
            PeriodSpec(2010, 2000)

    def test_rejects_bad_months(self):
        with pytest.raises(ValueError):
            PeriodSpec(2000, 2001, months=frozenset({0, 6}))


class TestSelectPeriod:
    def test_full_range_identity(self):
        f = small_field(t=365 * 2, start_year=2000)
        out = select_period(f, PeriodSpec(2000, 2001))
        np.testing.assert_array_equal(out.values, f.values)

    def test_future_period_day_count(self):
        f = small_field(t=131 * 365, start_year=1970)
        out = select_period(f, PeriodSpec(2006, 2040))
        assert out.values.shape[0] == 35 * 365 == 12775

    def test_idempotent(self):
        f = small_field(t=365 * 4, start_year=2000)
        p = PeriodSpec(2001, 2002)
        once = select_period(f, p)
        twice = select_period(once, p)
        np.testing.assert_array_equal(once.values, twice.values)
        assert once.time == twice.time

    def test_out_of_range_rejected(self):
        f = small_field(t=365, start_year=2000)
        with pytest.raises(CalendarError, match="outside"):
            select_period(f, PeriodSpec(2101, 2110))


class TestAlignTime:
    def test_identity_on_equal_calendars(self):
        a = small_field(t=20)
        b = small_field(t=20)
        ra, rb = align_time(a, b)
        np.testing.assert_array_equal(ra.values, a.values)
        np.testing.assert_array_equal(rb.values, b.values)

    def test_restricts_to_intersection(self):
        long = small_field(t=365 * 6, start_year=2000)  # 2000-2005
        short = small_field(t=365 * 2, start_year=2002)  # 2002-2003
        ra, rb = align_time(long, short)
        assert ra.values.shape[0] == rb.values.shape[0] == 365 * 2
        assert ra.time == rb.time

    def test_disjoint_calendars_rejected(self):
        a = small_field(t=10, start_year=2000)
        b = small_field(t=10, start_year=2050)
        with pytest.raises(CalendarError, match="common"):
            align_time(a, b)


class TestGridFile:
    def test_round_trip_bitwise(self, tmp_path):
        f = small_field()
        path = tmp_path / "field.grid"
        save_grid(f, path)
        g = load_grid(path)
        np.testing.assert_array_equal(g.values, f.values)
        np.testing.assert_array_equal(g.lat, f.lat)
        np.testing.assert_array_equal(g.lon, f.lon)
        assert g.time == f.time
        assert g.variables == f.variables
        assert g.units == f.units

    def test_save_is_deterministic(self, tmp_path):
        f = small_field()
        save_grid(f, tmp_path / "a.grid")
        save_grid(f, tmp_path / "b.grid")
        assert (tmp_path / "a.grid").read_bytes() == (tmp_path / "b.grid").read_bytes()

    def _parts(self, path):
        blob = path.read_bytes()
        off = len(GRID_MAGIC)
        (hlen,) = struct.unpack_from("<I", blob, off)
        header = json.loads(blob[off + 4:off + 4 + hlen])
        return blob, header, blob[off + 4 + hlen:]

    def _rebuild(self, header, payload):
        hb = json.dumps(header, sort_keys=True).encode()
        return GRID_MAGIC + struct.pack("<I", len(hb)) + hb + payload

    def test_header_shape_payload_mismatch(self, tmp_path):
        path = tmp_path / "f.grid"
        save_grid(small_field(), path)
        _, header, payload = self._parts(path)
        header["shape"][0] += 1
        path.write_bytes(self._rebuild(header, payload))
        with pytest.raises(GridFormatError, match="payload"):
            load_grid(path)

    def test_flipped_endianness_marker_rejected(self, tmp_path):
        path = tmp_path / "f.grid"
        save_grid(small_field(), path)
        _, header, payload = self._parts(path)
        header["endianness"] = "big"
        path.write_bytes(self._rebuild(header, payload))
        with pytest.raises(GridFormatError, match="endianness"):
            load_grid(path)

    def test_checksum_mismatch_rejected(self, tmp_path):
        path = tmp_path / "f.grid"
        save_grid(small_field(), path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(GridFormatError, match="checksum"):
            load_grid(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "f.grid"
        save_grid(small_field(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:10])
        with pytest.raises(GridFormatError):
            load_grid(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "f.grid"
        path.write_bytes(b"NOT-A-GRID-FILE-AT-ALL" + b"\x00" * 50)
        with pytest.raises(GridFormatError, match="magic"):
            load_grid(path)


class TestDatasetSplit:
    def test_defaults(self):
        split = DatasetSplit()
        assert split.train.label == "1980-2002"
        assert [p.label for p in split.eval_periods] == ["2006-2040", "2041-2070", "2071-2100"]
        assert split.climatology.label == "1970-2005"

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlaps"):
            DatasetSplit(eval_periods=(PeriodSpec(2000, 2005),))


class TestGenerator:
    def test_deterministic_bitwise(self):
        xa, ya, ta = generate_pseudo_reality(SMALL, seed=7)
        xb, yb, tb = generate_pseudo_reality(SMALL, seed=7)
        np.testing.assert_array_equal(xa.values, xb.values)
        np.testing.assert_array_equal(ya.values, yb.values)
        assert ta == tb

    def test_different_seeds_differ(self):
        _, ya, _ = generate_pseudo_reality(SMALL, seed=1)
        _, yb, _ = generate_pseudo_reality(SMALL, seed=2)
        assert (ya.values != yb.values).any()

    def test_shapes_and_metadata(self):
        x, y, truth = generate_pseudo_reality(SMALL, seed=3)
        t = (2010 - 1995 + 1) * 365
        assert x.values.shape == (t, 12, 4, 4)
        assert y.values.shape == (t, 1, 8, 8)
        assert x.variables[0] == "z500"
        assert y.variables == ["tas"]
        assert len(truth["channel_gains"]) == 12
        assert np.array(truth["pattern"]).shape == (8, 8)

    def test_degenerate_config_constant_in_time(self):
        cfg = SynthConfig(coarse_height=2, coarse_width=2, fine_height=4, fine_width=4,
                          start_year=2000, end_year=2001, seasonal_amplitude=0.0,
                          warming_rate=0.0, latent_noise=0.0, coarse_noise=0.0,
                          fine_noise=0.0)
        x, y, _ = generate_pseudo_reality(cfg, seed=4)
        assert (y.values == y.values[0]).all()
        assert (x.values == x.values[0]).all()

    def test_warming_shift_matches_closed_form(self):
        cfg = SynthConfig(coarse_height=2, coarse_width=2, fine_height=4, fine_width=4,
                          start_year=1970, end_year=2100, warming_rate=0.4,
                          latent_noise=0.0, coarse_noise=0.0, fine_noise=0.0)
        z = latent_state(cfg, seed=5)
        ax = TimeAxis.year_range(1970, 2100)
        years = ax.years()

        def period_mean(y0, y1):
            return z[(years >= y0) & (years <= y1)].mean()

        # trend is rate/decade applied to days past 2006-01-01; seasonal cancels
        # over whole years and other components are time-constant here
        off = ax.offsets.astype(float)
        past_2006 = np.maximum(0.0, off - ax.day_offset(2006))
        sel = (years >= 2071) & (years <= 2100)
        expected = 0.4 * past_2006[sel].mean() / 3650.0
        got = period_mean(2071, 2100) - period_mean(1980, 2002)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_nonstationarity_every_gridpoint(self):
        cfg = SynthConfig(coarse_height=2, coarse_width=2, fine_height=4, fine_width=4,
                          start_year=1970, end_year=2100, warming_rate=0.4,
                          latent_noise=0.0, coarse_noise=0.0, fine_noise=0.0)
        _, y, _ = generate_pseudo_reality(cfg, seed=6)
        years = y.time.years()
        past = y.values[(years >= 1980) & (years <= 2002), 0].mean(axis=0)
        future = y.values[(years >= 2071) & (years <= 2100), 0].mean(axis=0)
        assert (future > past).all()

    def test_heteroscedastic_summer_noise_ratio(self):
        k = 1.5
        cfg = SynthConfig(coarse_height=4, coarse_width=4, fine_height=8, fine_width=8,
                          start_year=1970, end_year=2005, warming_rate=0.0,
                          summer_noise_multiplier=k)
        _, y, truth = generate_pseudo_reality(cfg, seed=8)
        z = latent_state(cfg, seed=8)
        knee = np.array(truth["pattern"]) + truth["bend"]["knee_offset"] * cfg.seasonal_amplitude
        clean = saturating_map(z, knee, truth["bend"]["strength"], truth["bend"]["width"])
        resid = y.values[:, 0] - clean
        months = y.time.months()
        summer_var = resid[np.isin(months, [6, 7, 8])].var()
        winter_var = resid[np.isin(months, [12, 1, 2])].var()
        assert 0.8 * k**2 <= summer_var / winter_var <= 1.2 * k**2

    def test_high_signal_mask_marks_low_noise_half(self):
        _, _, truth = generate_pseudo_reality(SMALL, seed=9)
        mask = np.array(truth["high_signal_mask"])
        sd = np.array(truth["noise_sd_map"])
        assert mask.sum() >= mask.size // 2
        assert sd[mask].mean() < sd[~mask].mean()

    def test_invalid_grid_ratio_rejected(self):
        with pytest.raises(ValueError, match="multiple"):
            SynthConfig(coarse_height=3, coarse_width=3, fine_height=8, fine_width=8)

    def test_saturating_map_is_monotone(self):
        z = np.linspace(-10, 20, 500)
        out = saturating_map(z, knee=np.array(5.0), strength=0.5, width=2.0)
        assert (np.diff(out) > 0).all()


class TestGridFieldValidation:
    def test_rejects_coordinate_mismatch(self):
        with pytest.raises(ValueError, match="coordinate"):
            GridField(values=np.zeros((2, 1, 3, 4)), variables=["v"], lat=np.arange(5),
                      lon=np.arange(4), time=TimeAxis(2000, np.arange(2)), units=["u"])

    def test_rejects_nonmonotone_coords(self):
        with pytest.raises(ValueError, match="monotone"):
            GridField(values=np.zeros((2, 1, 3, 4)), variables=["v"],
                      lat=np.array([1.0, 3.0, 2.0]), lon=np.arange(4),
                      time=TimeAxis(2000, np.arange(2)), units=["u"])

    def test_rejects_time_length_mismatch(self):
        with pytest.raises(ValueError, match="time"):
            GridField(values=np.zeros((2, 1, 3, 4)), variables=["v"], lat=np.arange(3),
                      lon=np.arange(4), time=TimeAxis(2000, np.arange(5)), units=["u"])
