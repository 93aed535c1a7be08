"""Crowd-flow grids, external factors, sample assembly and dataset I/O.

A dataset is a dense run of ``T = days * intervals_per_day`` flow maps
``(T, 2, h, w)`` (channel 0 inflow, channel 1 outflow) with one encoded
external-factor row per interval. Global interval ``t`` sits at day
``t // intervals_per_day``, slot ``t % intervals_per_day``.

On disk a dataset is a directory::

    manifest.json   shape, split, normalization range, checksum
    flows.bin       little-endian float64, row-major (T, 2, h, w)
    externals.csv   header + one row per interval
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

WEATHER_CATEGORIES = 16
SUNNY, RAIN = 0, 1


class DatasetError(ValueError):
    """Base class for dataset load/validation failures."""


class ManifestError(DatasetError):
    pass


class LengthMismatchError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# records


@dataclass
class FlowGrid:
    t_index: int
    values: np.ndarray  # (2, h, w)

    @property
    def inflow(self) -> np.ndarray:
        return self.values[0]

    @property
    def outflow(self) -> np.ndarray:
        return self.values[1]


@dataclass(eq=False)
class ExternalRecord:
    weather: np.ndarray  # one-hot, length 16
    temperature: float
    wind: float
    holiday: np.ndarray  # one-hot, length K

    @classmethod
    def from_categories(cls, weather: int, temperature: float, wind: float, holiday: int, n_holiday: int):
        return cls(_one_hot(weather, WEATHER_CATEGORIES), temperature, wind, _one_hot(holiday, n_holiday))

    @property
    def weather_category(self) -> int:
        return int(np.argmax(self.weather))


def _one_hot(k: int, n: int) -> np.ndarray:
    if not 0 <= k < n:
        raise ValueError(f"category {k} outside [0, {n})")
    v = np.zeros(n)
    v[k] = 1.0
    return v


def _check_one_hot(v: np.ndarray, what: str) -> None:
    if not (np.all((v == 0) | (v == 1)) and v.sum() == 1):
        raise ValueError(f"{what} must be one-hot with exactly one bit set, got {v.tolist()}")


def external_length(n_holiday: int) -> int:
    return WEATHER_CATEGORIES + 2 + n_holiday


def encode_external(rec: ExternalRecord) -> np.ndarray:
    """``[weather one-hot | temperature | wind | holiday one-hot]``."""
    weather = np.asarray(rec.weather, dtype=np.float64)
    holiday = np.asarray(rec.holiday, dtype=np.float64)
    if weather.shape != (WEATHER_CATEGORIES,):
        raise ValueError(f"weather vector must have length {WEATHER_CATEGORIES}")
    _check_one_hot(weather, "weather")
    _check_one_hot(holiday, "holiday")
    for name, v in (("temperature", rec.temperature), ("wind", rec.wind)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} {v} outside [0, 1]")
    return np.concatenate([weather, [rec.temperature, rec.wind], holiday])


def decode_external(vec: np.ndarray, n_holiday: int) -> ExternalRecord:
    if vec.shape != (external_length(n_holiday),):
        raise ValueError(f"external vector length {vec.shape} != {external_length(n_holiday)}")
    w = WEATHER_CATEGORIES
    return ExternalRecord(vec[:w].copy(), float(vec[w]), float(vec[w + 1]), vec[w + 2:].copy())


# ---------------------------------------------------------------------------
# normalization


def normalize_flow(x, lo: float, hi: float) -> np.ndarray:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]``."""
    if not hi > lo:
        raise ValueError(f"normalization range needs max > min, got [{lo}, {hi}]")
    x = x.values if isinstance(x, FlowGrid) else x
    return 2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0


def denormalize_flow(x, lo: float, hi: float, clamp: bool = False) -> np.ndarray:
    """Inverse of :func:`normalize_flow`. ``clamp`` floors counts at zero for reporting."""
    if not hi > lo:
        raise ValueError(f"normalization range needs max > min, got [{lo}, {hi}]")
    out = (np.asarray(x, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo
    return np.maximum(out, 0.0) if clamp else out


# ---------------------------------------------------------------------------
# dataset


@dataclass
class DatasetManifest:
    h: int
    w: int
    intervals_per_day: int
    n_holiday: int
    flow_min: float
    flow_max: float
    train_end: int  # first global interval of the test split
    record_count: int
    missing: list[int] = field(default_factory=list)
    checksum: str = ""
    generator: dict = field(default_factory=dict)

    @property
    def days(self) -> int:
        return self.record_count // self.intervals_per_day

    @property
    def ext_length(self) -> int:
        return external_length(self.n_holiday)

    def validate(self) -> None:
        if min(self.h, self.w, self.intervals_per_day, self.record_count) < 1 or self.n_holiday < 1:
            raise ManifestError("manifest dimensions must be positive")
        if not self.flow_min < self.flow_max:
            raise ManifestError(f"flow_min {self.flow_min} must be below flow_max {self.flow_max}")
        if not 0 < self.train_end <= self.record_count:
            raise ManifestError(f"split boundary {self.train_end} outside (0, {self.record_count}]")


@dataclass
class Dataset:
    flows: np.ndarray  # (T, 2, h, w) raw counts
    externals: np.ndarray  # (T, L) encoded rows
    manifest: DatasetManifest

    def grid(self, t: int) -> FlowGrid:
        return FlowGrid(t, self.flows[t])

    def record(self, t: int) -> ExternalRecord:
        return decode_external(self.externals[t], self.manifest.n_holiday)

    def normalized(self, t) -> np.ndarray:
        return normalize_flow(self.flows[t], self.manifest.flow_min, self.manifest.flow_max)

    def denormalize(self, x, clamp: bool = False) -> np.ndarray:
        return denormalize_flow(x, self.manifest.flow_min, self.manifest.flow_max, clamp)


def training_range(flows: np.ndarray, train_end: int, missing: Sequence[int] = ()) -> tuple[float, float]:
    """Min/max over the training split only, skipping missing intervals."""
    keep = np.ones(train_end, dtype=bool)
    keep[[m for m in missing if m < train_end]] = False
    train = flows[:train_end][keep]
    return float(train.min()), float(train.max())


def make_dataset(
    flows: np.ndarray,
    externals: np.ndarray,
    intervals_per_day: int,
    n_holiday: int,
    test_days: int,
    missing: Sequence[int] = (),
    generator: dict | None = None,
) -> Dataset:
    flows = np.asarray(flows, dtype=np.float64)
    externals = np.asarray(externals, dtype=np.float64)
    T_, c, h, w = flows.shape
    if c != 2 or externals.shape != (T_, external_length(n_holiday)):
        raise ValueError(f"flows {flows.shape} / externals {externals.shape} inconsistent")
    if T_ % intervals_per_day:
        raise ValueError("record count must cover whole days")
    if np.any(flows < 0):
        raise ValueError("flow counts must be non-negative")
    train_end = T_ - test_days * intervals_per_day
    if not 0 < train_end <= T_:
        raise ManifestError(f"{test_days} test days leave no training intervals out of {T_}")
    lo, hi = training_range(flows, train_end, missing)
    manifest = DatasetManifest(
        h, w, intervals_per_day, n_holiday, lo, hi, train_end, T_, sorted(int(m) for m in missing), "", generator or {}
    )
    manifest.validate()
    return Dataset(flows, externals, manifest)


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class Sample:
    """Index record for one training instance.

    ``seq`` holds global indices ``t-n .. t-1``; ``per`` holds slot ``t`` of
    days ``d-m .. d-1``; both in increasing time order.
    """

    target: int
    day: int
    interval: int
    seq: tuple[int, ...]
    per: tuple[int, ...]


def build_samples(dataset: Dataset, config) -> list[Sample]:
    """One sample per target whose full sequential and periodic history exists.

    ``config`` needs ``n``, ``m`` and ``intervals_per_day``. Sequential history
    runs on the global index, so it may cross midnight. Targets lacking history,
    or touching a missing interval, are skipped and the count is logged.
    """
    ipd = config.intervals_per_day
    if ipd != dataset.manifest.intervals_per_day:
        raise ValueError(f"config has {ipd} intervals/day, dataset {dataset.manifest.intervals_per_day}")
    n, m = config.n, config.m
    missing = set(dataset.manifest.missing)
    samples, skipped = [], 0
    for t in range(dataset.manifest.record_count):
        seq = tuple(range(t - n, t))
        per = tuple(t - k * ipd for k in range(m, 0, -1))
        history = seq + per
        if (history and min(history) < 0) or t in missing or missing.intersection(history):
            skipped += 1
            continue
        samples.append(Sample(t, t // ipd, t % ipd, seq, per))
    logger.info("built %d samples, skipped %d targets without full history", len(samples), skipped)
    return samples


def split_samples(samples: Sequence[Sample], manifest: DatasetManifest, val_fraction: float = 0.1):
    """Partition into (train, validation, test) by target index.

    Validation is the last ``ceil(val_fraction * training days)`` training days.
    """
    ipd = manifest.intervals_per_day
    train_days = manifest.train_end // ipd
    val_days = math.ceil(val_fraction * train_days) if val_fraction > 0 else 0
    val_start = (train_days - val_days) * ipd
    train = [s for s in samples if s.target < val_start]
    val = [s for s in samples if val_start <= s.target < manifest.train_end]
    test = [s for s in samples if s.target >= manifest.train_end]
    return train, val, test


@dataclass
class Batch:
    """Stacked, normalized model inputs for a list of samples."""

    seq_maps: np.ndarray  # (B, n, 2, h, w)
    seq_ext: np.ndarray  # (B, n, L)
    per_maps: np.ndarray  # (B, m, 2, h, w)
    per_ext: np.ndarray  # (B, m, L)
    e_sum: np.ndarray  # (B, L)
    target: np.ndarray  # (B, 2, h, w) normalized
    target_raw: np.ndarray  # (B, 2, h, w)
    intervals: np.ndarray  # (B,) slot of day
    targets: np.ndarray  # (B,) global index

    def __len__(self) -> int:
        return len(self.targets)


def make_batch(dataset: Dataset, samples: Sequence[Sample]) -> Batch:
    if not samples:
        raise ValueError("cannot batch an empty sample list")
    seq = np.array([s.seq for s in samples], dtype=np.int64).reshape(len(samples), -1)
    per = np.array([s.per for s in samples], dtype=np.int64).reshape(len(samples), -1)
    tgt = np.array([s.target for s in samples], dtype=np.int64)
    ext = dataset.externals
    e_sum = ext[seq].sum(axis=1) + ext[per].sum(axis=1)
    return Batch(
        seq_maps=dataset.normalized(seq),
        seq_ext=ext[seq],
        per_maps=dataset.normalized(per),
        per_ext=ext[per],
        e_sum=e_sum,
        target=dataset.normalized(tgt),
        target_raw=dataset.flows[tgt],
        intervals=np.array([s.interval for s in samples], dtype=np.int64),
        targets=tgt,
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Knobs for :func:`synthesize`.

    Per cell and channel the flow follows
    ``base + amplitude*sin(2*pi*slot/ipd + phase) + rho*nbmean(prev)
    - rain_effect*[rain] + peaks + N(0, noise_sigma)`` floored at zero.
    ``peak_amplitude`` adds fixed-time rush-hour bumps on top of the sinusoid.
    """

    days: int = 20
    intervals_per_day: int = 48
    h: int = 8
    w: int = 8
    n_holiday: int = 4
    base: float = 40.0
    amplitude: float = 25.0
    rho: float = 0.5
    noise_sigma: float = 4.0
    rain_effect: float = 15.0
    rain_start: float = 0.03
    rain_stop: float = 0.15
    peak_amplitude: float = 0.0
    peak_slots: tuple[int, ...] = (16, 36)
    peak_width: float = 1.5
    holiday_prob: float = 0.1
    test_days: int = 4


def _neighborhood_mean(x: np.ndarray) -> np.ndarray:
    """3x3 mean over in-grid neighbors (cell included), per channel."""
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ones = np.pad(np.ones(x.shape[1:]), 1)
    h, w = x.shape[1:]
    total = sum(pad[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    count = sum(ones[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    return total / count


def synthesize(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic crowd-flow data with periodic, autoregressive and weather structure."""
    rng = np.random.default_rng(seed)
    ipd, K = config.intervals_per_day, config.n_holiday
    T_ = config.days * ipd
    shape = (2, config.h, config.w)

    base = config.base * rng.uniform(0.5, 1.5, size=shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    peak_scale = rng.uniform(0.5, 1.5, size=shape)
    slots = np.arange(ipd)
    daily = np.sin(2.0 * np.pi * slots[:, None, None, None] / ipd + phase)  # (ipd, 2, h, w)
    bumps = np.zeros(ipd)
    for s in config.peak_slots:
        bumps += np.exp(-0.5 * ((slots - s) / config.peak_width) ** 2)
    periodic = base + config.amplitude * daily + config.peak_amplitude * bumps[:, None, None, None] * peak_scale

    # weather as a two-state rain chain; dry intervals pick a per-day category
    dry_choice = rng.choice([SUNNY, 2, 3, 4], size=config.days)
    rain = np.zeros(T_, dtype=bool)
    for t in range(1, T_):
        p = (1.0 - config.rain_stop) if rain[t - 1] else config.rain_start
        rain[t] = rng.random() < p
    holidays = np.where(rng.random(config.days) < config.holiday_prob, rng.integers(1, max(K, 2), config.days), 0)
    holidays = np.minimum(holidays, K - 1)
    temperature = np.clip(0.5 + 0.3 * np.sin(2.0 * np.pi * (np.arange(T_) % ipd) / ipd - np.pi / 2)
                          + rng.normal(0.0, 0.05, T_), 0.0, 1.0)
    wind = rng.uniform(0.0, 1.0, T_)

    flows = np.empty((T_,) + shape)
    externals = np.empty((T_, external_length(K)))
    prev = None
    for t in range(T_):
        d, s = divmod(t, ipd)
        x = periodic[s].copy()
        if prev is not None and config.rho:
            x += config.rho * _neighborhood_mean(prev)
        if rain[t] and config.rain_effect:
            x -= config.rain_effect
        if config.noise_sigma:
            x += rng.normal(0.0, config.noise_sigma, size=shape)
        flows[t] = prev = np.maximum(x, 0.0)
        weather = RAIN if rain[t] else int(dry_choice[d])
        externals[t] = encode_external(
            ExternalRecord.from_categories(weather, float(temperature[t]), float(wind[t]), int(holidays[d]), K)
        )
    # round-trip through json so tuples come back as lists after save/load
    generator = json.loads(json.dumps({"seed": seed, **asdict(config)}))
    return make_dataset(flows, externals, ipd, K, config.test_days, generator=generator)


# ---------------------------------------------------------------------------
# persistence


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(dataset.flows, dtype="<f8").tobytes()
    (path / "flows.bin").write_bytes(raw)
    manifest = dataset.manifest
    manifest.checksum = _sha256(raw)
    (path / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    K = manifest.n_holiday
    header = (
        ["t_index"]
        + [f"weather_{i}" for i in range(WEATHER_CATEGORIES)]
        + ["temperature", "wind"]
        + [f"holiday_{i}" for i in range(K)]
    )
    with open(path / "externals.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, row in enumerate(dataset.externals):
            writer.writerow([t] + [repr(float(v)) for v in row])
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "manifest.json").read_text())
        manifest = DatasetManifest(**meta)
    except FileNotFoundError as exc:
        raise ManifestError(f"no manifest in {path}") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise ManifestError(f"malformed manifest in {path}: {exc}") from exc
    manifest.validate()

    raw = (path / "flows.bin").read_bytes()
    expected = manifest.record_count * 2 * manifest.h * manifest.w
    if len(raw) % 8 or len(raw) // 8 != expected:
        raise LengthMismatchError(
            f"flows.bin holds {len(raw) / 8:g} float64 values, manifest implies {expected} "
            f"({manifest.record_count} x 2 x {manifest.h} x {manifest.w})"
        )
    if manifest.checksum and _sha256(raw) != manifest.checksum:
        raise ChecksumError(f"flows.bin checksum mismatch in {path}")
    flows = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(manifest.record_count, 2, manifest.h, manifest.w)

    with open(path / "externals.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    L = manifest.ext_length
    if not rows or len(rows[0]) != L + 1:
        raise ManifestError(f"externals.csv header must have {L + 1} columns")
    body = rows[1:]
    if len(body) != manifest.record_count:
        raise LengthMismatchError(f"externals.csv has {len(body)} rows, manifest says {manifest.record_count}")
    try:
        externals = np.array([[float(v) for v in row[1:]] for row in body])
    except ValueError as exc:
        raise ManifestError(f"bad value in externals.csv: {exc}") from exc
    if externals.shape != (manifest.record_count, L):
        raise LengthMismatchError("externals.csv rows have inconsistent widths")
    return Dataset(flows, externals, manifest)
