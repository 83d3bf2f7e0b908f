"""Grid fields on a 365-day calendar, grid file I/O, and the pseudo-reality generator.

The generator builds a latent daily climate state on the fine grid (smooth
spatial pattern + seasonal cycle + post-2006 linear warming + autocorrelated
anomalies), derives the predictand through a fixed smooth saturating map plus
heteroscedastic noise (inflated in summer, and spatially varying so the domain
has high- and low-signal regions), and derives the coarse predictors as noisy
per-channel linear projections of the block-averaged latent state. Everything
is reproducible bit-for-bit from (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

GRID_MAGIC = b"ENSDOWN-GRID-v1"

MONTH_LENGTHS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
_MONTH_STARTS = np.concatenate([[0], np.cumsum(MONTH_LENGTHS)])  # day-of-year boundaries

# the paper-scale region these synthetic grids stand in for, metadata only
DEFAULT_LAT_RANGE = (25.0, 55.0)
DEFAULT_LON_RANGE = (-135.0, -100.0)

PREDICTOR_VARIABLES = (
    "z500", "z750", "z800", "z1000",
    "ta500", "ta750", "ta800", "ta1000",
    "hus500", "hus750", "hus800", "hus1000",
)


class GridFormatError(ValueError):
    """Grid file is corrupt, truncated, or not in the expected format."""


class CalendarError(ValueError):
    """Requested period is outside or incompatible with a field's calendar."""


@dataclass(frozen=True)
class PeriodSpec:
    """An inclusive year range, optionally restricted to a set of months."""

    start_year: int
    end_year: int
    months: frozenset | None = None

    def __post_init__(self):
        if self.start_year > self.end_year:
            raise ValueError(f"start_year {self.start_year} > end_year {self.end_year}")
        if self.months is not None:
            months = frozenset(int(m) for m in self.months)
            if not months or not all(1 <= m <= 12 for m in months):
                raise ValueError(f"months must be within 1..12, got {sorted(self.months)}")
            object.__setattr__(self, "months", months)

    @property
    def label(self) -> str:
        return f"{self.start_year}-{self.end_year}"

    @classmethod
    def parse(cls, text: str) -> "PeriodSpec":
        try:
            start, end = text.split("-")
            return cls(int(start), int(end))
        except ValueError as exc:
            raise ValueError(f"period must look like '2006-2040', got {text!r}") from exc


SUMMER_MONTHS = frozenset({6, 7, 8})


class TimeAxis:
    """Daily time stamps on a 365-day no-leap calendar.

    Stored as integer day offsets from Jan 1 of an epoch year; offsets are
    strictly increasing but need not be contiguous (season filtering keeps
    the stamps of the retained days).
    """

    def __init__(self, epoch_year: int, offsets):
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets.ndim != 1 or offsets.size == 0:
            raise CalendarError("time axis needs at least one day")
        if (np.diff(offsets) <= 0).any():
            raise CalendarError("time offsets must be strictly increasing")
        self.epoch_year = int(epoch_year)
        self.offsets = offsets

    @classmethod
    def year_range(cls, start_year: int, end_year: int) -> "TimeAxis":
        n = (end_year - start_year + 1) * 365
        return cls(start_year, np.arange(n, dtype=np.int64))

    def __len__(self):
        return self.offsets.size

    def __eq__(self, other):
        # equality is over physical days, not the (epoch, offset) encoding
        return (isinstance(other, TimeAxis)
                and np.array_equal(self.absolute_days(), other.absolute_days()))

    def years(self) -> np.ndarray:
        return self.epoch_year + self.offsets // 365

    def day_of_year(self) -> np.ndarray:
        return self.offsets % 365

    def months(self) -> np.ndarray:
        return np.searchsorted(_MONTH_STARTS, self.day_of_year(), side="right").astype(np.int64)

    def absolute_days(self) -> np.ndarray:
        """Day stamps comparable across axes with different epochs."""
        return self.epoch_year * np.int64(365) + self.offsets

    def day_offset(self, year: int, month: int = 1, day: int = 1) -> int:
        return (year - self.epoch_year) * 365 + int(_MONTH_STARTS[month - 1]) + (day - 1)

    def is_contiguous(self) -> bool:
        return bool((np.diff(self.offsets) == 1).all()) if len(self) > 1 else True

    def take(self, indices) -> "TimeAxis":
        return TimeAxis(self.epoch_year, self.offsets[indices])

    def to_dict(self) -> dict:
        d = {"type": "noleap365", "epoch_year": self.epoch_year}
        if self.is_contiguous():
            d["start_offset"] = int(self.offsets[0])
            d["n_days"] = int(self.offsets.size)
        else:
            d["offsets"] = self.offsets.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TimeAxis":
        if d.get("type") != "noleap365":
            raise GridFormatError(f"unsupported calendar type {d.get('type')!r}")
        if "offsets" in d:
            return cls(d["epoch_year"], d["offsets"])
        start = int(d["start_offset"])
        return cls(d["epoch_year"], np.arange(start, start + int(d["n_days"]), dtype=np.int64))


@dataclass
class GridField:
    """A (time, channel, lat, lon) block of values with coordinate metadata."""

    values: np.ndarray
    variables: list
    lat: np.ndarray
    lon: np.ndarray
    time: TimeAxis
    units: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        if self.values.ndim != 4:
            raise ValueError(f"values must be [T, C, H, W], got shape {self.values.shape}")
        t, c, h, w = self.values.shape
        if len(self.time) != t:
            raise ValueError(f"time axis has {len(self.time)} days but values have {t}")
        if len(self.variables) != c or len(self.units) != c:
            raise ValueError(f"need {c} variable names and units, got "
                             f"{len(self.variables)} and {len(self.units)}")
        if self.lat.shape != (h,) or self.lon.shape != (w,):
            raise ValueError(f"coordinate lengths {self.lat.shape}/{self.lon.shape} "
                             f"do not match grid {h}x{w}")
        for name, coord in (("lat", self.lat), ("lon", self.lon)):
            if coord.size > 1 and not ((np.diff(coord) > 0).all() or (np.diff(coord) < 0).all()):
                raise ValueError(f"{name} coordinates must be strictly monotone")

    @property
    def shape(self):
        return self.values.shape

    def take_time(self, indices) -> "GridField":
        return GridField(values=self.values[indices], variables=list(self.variables),
                         lat=self.lat, lon=self.lon, time=self.time.take(indices),
                         units=list(self.units))


def select_period(field: GridField, period: PeriodSpec) -> GridField:
    """Contiguous time slice covering the period's year range."""
    years = field.time.years()
    if period.start_year < years[0] or period.end_year > years[-1]:
        raise CalendarError(
            f"period {period.label} outside calendar range {years[0]}-{years[-1]}")
    mask = (years >= period.start_year) & (years <= period.end_year)
    if not mask.any():
        raise CalendarError(f"period {period.label} selects no days")
    idx = np.nonzero(mask)[0]
    return field.take_time(slice(int(idx[0]), int(idx[-1]) + 1))


def align_time(a: GridField, b: GridField):
    """Restrict both fields to their common days, order preserved."""
    common, ia, ib = np.intersect1d(a.time.absolute_days(), b.time.absolute_days(),
                                    assume_unique=True, return_indices=True)
    if common.size == 0:
        raise CalendarError("fields share no common days")
    return a.take_time(ia), b.take_time(ib)


# ---------------------------------------------------------------------------
# grid file format

def save_grid(grid: GridField, path) -> None:
    payload = np.ascontiguousarray(grid.values, dtype="<f8").tobytes()
    header = {
        "format": GRID_MAGIC.decode(),
        "endianness": "little",
        "dtype": "float64",
        "shape": list(grid.values.shape),
        "variables": list(grid.variables),
        "units": list(grid.units),
        "lat": grid.lat.tolist(),
        "lon": grid.lon.tolist(),
        "calendar": grid.time.to_dict(),
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    os.replace(tmp, path)


def load_grid(path) -> GridField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(GRID_MAGIC[:min(len(blob), len(GRID_MAGIC))]) or len(blob) < len(GRID_MAGIC):
        raise GridFormatError("not an ENSDOWN-GRID-v1 file (bad magic)")
    if len(blob) < len(GRID_MAGIC) + 4:
        raise GridFormatError("truncated file: missing header length")
    off = len(GRID_MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + header_len:
        raise GridFormatError("truncated file: header incomplete")
    try:
        header = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFormatError(f"corrupt header: {exc}") from exc
    off += header_len

    if header.get("endianness") != "little":
        raise GridFormatError(
            f"unsupported endianness marker {header.get('endianness')!r}; "
            "ENSDOWN-GRID-v1 payloads are little-endian")
    if header.get("dtype") != "float64":
        raise GridFormatError(f"unsupported dtype {header.get('dtype')!r}")
    try:
        shape = tuple(int(s) for s in header["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"corrupt header: bad shape: {exc}") from exc
    n_vals = int(np.prod(shape))
    payload = blob[off:]
    if len(payload) != n_vals * 8:
        raise GridFormatError(
            f"header declares shape {shape} ({n_vals * 8} bytes) but payload has {len(payload)}")
    declared = header.get("checksum", "")
    actual = "sha256:" + hashlib.sha256(payload).hexdigest()
    if declared != actual:
        raise GridFormatError(f"checksum mismatch: header {declared}, payload {actual}")

    values = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    try:
        return GridField(values=values, variables=list(header["variables"]),
                         lat=np.array(header["lat"]), lon=np.array(header["lon"]),
                         time=TimeAxis.from_dict(header["calendar"]),
                         units=list(header["units"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"corrupt header: {exc}") from exc


# ---------------------------------------------------------------------------
# dataset split conventions

@dataclass(frozen=True)
class DatasetSplit:
    """Default train / evaluation / climatology periods."""

    train: PeriodSpec = PeriodSpec(1980, 2002)
    eval_periods: tuple = (PeriodSpec(2006, 2040), PeriodSpec(2041, 2070), PeriodSpec(2071, 2100))
    climatology: PeriodSpec = PeriodSpec(1970, 2005)

    def __post_init__(self):
        for p in self.eval_periods:
            if p.start_year <= self.train.end_year and p.end_year >= self.train.start_year:
                raise ValueError(f"eval period {p.label} overlaps train period {self.train.label}")


# ---------------------------------------------------------------------------
# synthetic pseudo-reality generator

@dataclass(frozen=True)
class SynthConfig:
    coarse_height: int = 8
    coarse_width: int = 8
    fine_height: int = 32
    fine_width: int = 32
    channels: int = 12
    start_year: int = 1970
    end_year: int = 2100
    seasonal_amplitude: float = 8.0
    warming_rate: float = 0.4          # units per decade, applied from warming_start_year
    warming_start_year: int = 2006
    pattern_scale: float = 4.0
    latent_noise: float = 1.5          # stationary std of the AR(1) anomaly field
    latent_ar: float = 0.8
    n_latent_modes: int = 6
    coarse_noise: float = 0.3
    fine_noise: float = 0.8
    summer_noise_multiplier: float = 1.5
    bend_strength: float = 0.5         # fraction of slope lost above the knee
    bend_offset: float = 0.75          # knee height in units of seasonal amplitude
    spatial_pattern_seed: int | None = None

    def __post_init__(self):
        if self.fine_height % self.coarse_height or self.fine_width % self.coarse_width:
            raise ValueError(
                f"fine grid {self.fine_height}x{self.fine_width} must be an integer multiple "
                f"of coarse grid {self.coarse_height}x{self.coarse_width}")
        for name in ("latent_noise", "coarse_noise", "fine_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.latent_ar < 1.0:
            raise ValueError(f"latent_ar must be in [0, 1), got {self.latent_ar}")
        if not 0.0 <= self.bend_strength < 1.0:
            raise ValueError(f"bend_strength must be in [0, 1), got {self.bend_strength}")
        if self.start_year > self.end_year:
            raise ValueError("start_year must not exceed end_year")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _smooth_bumps(rng, height, width, n_bumps) -> np.ndarray:
    """Random smooth field: a sum of signed Gaussian bumps, zero mean, unit std."""
    hh, ww = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    out = np.zeros((height, width))
    scale = max(height, width)
    for _ in range(n_bumps):
        ch, cw = rng.uniform(0, height), rng.uniform(0, width)
        radius = rng.uniform(0.15, 0.45) * scale
        sign = rng.choice([-1.0, 1.0])
        out += sign * np.exp(-((hh - ch) ** 2 + (ww - cw) ** 2) / (2 * radius ** 2))
    out -= out.mean()
    sd = out.std()
    return out / sd if sd > 0 else out


def _block_mean(fine: np.ndarray, factor_h: int, factor_w: int) -> np.ndarray:
    """Average [..., H, W] over factor_h x factor_w blocks."""
    *lead, h, w = fine.shape
    return fine.reshape(*lead, h // factor_h, factor_h, w // factor_w, factor_w).mean(axis=(-3, -1))


@dataclass
class _LatentWorld:
    config: SynthConfig
    time: TimeAxis
    pattern: np.ndarray          # [Hf, Wf] mean state
    noise_sd_map: np.ndarray     # [Hf, Wf] predictand noise std
    seasonal: np.ndarray         # [T] seasonal cycle (unit amplitude)
    trend: np.ndarray            # [T] warming offset
    anomaly: np.ndarray          # [T, Hf, Wf] autocorrelated anomalies
    rng: np.random.Generator     # positioned after all latent draws

    def state(self) -> np.ndarray:
        cfg = self.config
        z = self.anomaly.copy()
        z += self.pattern
        z += (cfg.seasonal_amplitude * self.seasonal + self.trend)[:, None, None]
        return z


_PEAK_DOY = 196  # mid-July seasonal maximum


def _build_latent(config: SynthConfig, seed: int) -> _LatentWorld:
    cfg = config
    rng = np.random.default_rng(seed)
    pattern_rng = (rng if cfg.spatial_pattern_seed is None
                   else np.random.default_rng(cfg.spatial_pattern_seed))

    pattern = cfg.pattern_scale * _smooth_bumps(pattern_rng, cfg.fine_height, cfg.fine_width, 8)
    # spatially varying predictand noise creates high- and low-signal regions
    sd_shape = _smooth_bumps(pattern_rng, cfg.fine_height, cfg.fine_width, 6)
    sd_unit = (sd_shape - sd_shape.min()) / max(sd_shape.max() - sd_shape.min(), 1e-12)
    noise_sd_map = cfg.fine_noise * (0.6 + 0.8 * sd_unit)

    time = TimeAxis.year_range(cfg.start_year, cfg.end_year)
    doy = time.day_of_year()
    seasonal = np.cos(2.0 * np.pi * (doy - _PEAK_DOY) / 365.0)
    since_start = time.offsets - time.day_offset(cfg.warming_start_year)
    trend = cfg.warming_rate * np.maximum(0, since_start) / 3650.0

    t = len(time)
    modes = np.stack([_smooth_bumps(rng, cfg.fine_height, cfg.fine_width, 4)
                      for _ in range(cfg.n_latent_modes)])
    mode_sd = cfg.latent_noise / np.sqrt(cfg.n_latent_modes)
    rho = cfg.latent_ar
    shocks = rng.normal(size=(t, cfg.n_latent_modes))
    coeffs = np.empty((t, cfg.n_latent_modes))
    coeffs[0] = shocks[0]
    innov = np.sqrt(1.0 - rho ** 2)
    for i in range(1, t):
        coeffs[i] = rho * coeffs[i - 1] + innov * shocks[i]
    anomaly = np.einsum("tk,khw->thw", mode_sd * coeffs, modes)

    return _LatentWorld(config=cfg, time=time, pattern=pattern, noise_sd_map=noise_sd_map,
                        seasonal=seasonal, trend=trend, anomaly=anomaly, rng=rng)


def latent_state(config: SynthConfig, seed: int) -> np.ndarray:
    """The noiseless latent field [T, Hf, Wf]; oracle support for tests."""
    return _build_latent(config, seed).state()


def saturating_map(z: np.ndarray, knee: np.ndarray, strength: float, width: float) -> np.ndarray:
    """Strictly increasing map, slope 1 below the knee and 1 - strength above it."""
    return z - strength * width * np.logaddexp(0.0, (z - knee) / width)


def generate_pseudo_reality(config: SynthConfig, seed: int):
    """Build paired coarse predictors and fine predictand plus ground truth.

    Returns (predictors, predictand, truth) where truth carries every latent
    coefficient needed to reconstruct the noiseless world for oracle tests.
    """
    cfg = config
    world = _build_latent(cfg, seed)
    rng = world.rng
    z = world.state()
    time = world.time

    knee = world.pattern + cfg.bend_offset * cfg.seasonal_amplitude
    bend_width = 0.5 * cfg.seasonal_amplitude if cfg.seasonal_amplitude > 0 else 1.0
    clean = saturating_map(z, knee, cfg.bend_strength, bend_width)

    months = time.months()
    noise_mult = np.where(np.isin(months, list(SUMMER_MONTHS)),
                          cfg.summer_noise_multiplier, 1.0)
    y = clean + world.noise_sd_map * noise_mult[:, None, None] * rng.normal(size=z.shape)

    fh = cfg.fine_height // cfg.coarse_height
    fw = cfg.fine_width // cfg.coarse_width
    z_coarse = _block_mean(z, fh, fw)

    gains = rng.uniform(0.6, 1.4, size=cfg.channels) * rng.choice([-1.0, 1.0], size=cfg.channels)
    offsets = rng.uniform(-2.0, 2.0, size=cfg.channels)
    x = gains[None, :, None, None] * z_coarse[:, None, :, :] + offsets[None, :, None, None]
    x += cfg.coarse_noise * rng.normal(size=x.shape)

    lat_f = np.linspace(*DEFAULT_LAT_RANGE, cfg.fine_height)
    lon_f = np.linspace(*DEFAULT_LON_RANGE, cfg.fine_width)
    lat_c = lat_f.reshape(cfg.coarse_height, fh).mean(axis=1)
    lon_c = lon_f.reshape(cfg.coarse_width, fw).mean(axis=1)

    if cfg.channels == len(PREDICTOR_VARIABLES):
        var_names = list(PREDICTOR_VARIABLES)
    else:
        var_names = [f"var{i:02d}" for i in range(cfg.channels)]

    predictors = GridField(values=x, variables=var_names, lat=lat_c, lon=lon_c,
                           time=time, units=["synthetic"] * cfg.channels)
    predictand = GridField(values=y[:, None, :, :], variables=["tas"], lat=lat_f, lon=lon_f,
                           time=time, units=["synthetic_degC"])

    stat_sd = world.anomaly.std()
    truth = {
        "config": cfg.to_dict(),
        "seed": seed,
        "pattern": world.pattern.tolist(),
        "noise_sd_map": world.noise_sd_map.tolist(),
        "high_signal_mask": (world.noise_sd_map <= np.median(world.noise_sd_map)).tolist(),
        "seasonal_peak_doy": _PEAK_DOY,
        "bend": {"knee_offset": cfg.bend_offset, "strength": cfg.bend_strength,
                 "width": bend_width},
        "channel_gains": gains.tolist(),
        "channel_offsets": offsets.tolist(),
        "anomaly_std": float(stat_sd),
    }
    return predictors, predictand, truth
