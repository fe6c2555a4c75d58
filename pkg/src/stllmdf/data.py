"""Series ingestion, sliding windows, chronological splits, scaling, corruption, caching."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import stdf
from .embedding import MINUTES_PER_DAY, slots_per_day
from .errors import ConfigurationError, InsufficientDataError, IntegrityError

log = logging.getLogger(__name__)

DEFAULT_START = datetime(2024, 1, 1)
MISSING_GRID = (0.0, 0.001, 0.002, 0.003, 0.004, 0.005)


@dataclass
class SeriesSource:
    values: np.ndarray                      # (T, N, d)
    start: datetime = DEFAULT_START
    granularity_minutes: int = 5
    mask: np.ndarray | None = None          # 1 = observed

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ConfigurationError(f"series must be (T, N, d), got {self.values.shape}")
        slots_per_day(self.granularity_minutes)
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ConfigurationError(f"mask {self.mask.shape} does not match values {self.values.shape}")

    def __len__(self):
        return len(self.values)

    @property
    def slots_per_day(self) -> int:
        return slots_per_day(self.granularity_minutes)

    def calendar(self, steps) -> tuple:
        """Day-of-week (Monday = 0) and time-of-day slot for raw step indices."""
        steps = np.asarray(steps, dtype=np.int64)
        minute0 = self.start.hour * 60 + self.start.minute
        minutes = minute0 + steps * self.granularity_minutes
        dow = (self.start.weekday() + minutes // MINUTES_PER_DAY) % 7
        tod = (minutes % MINUTES_PER_DAY) // self.granularity_minutes
        return dow, tod

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.mask).tobytes())
        h.update(f"{self.values.shape}|{self.start.isoformat()}|{self.granularity_minutes}".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class WindowSpec:
    input_len: int = 12
    output_len: int = 12
    stride: int = 1

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1 or self.stride < 1:
            raise ConfigurationError(f"window lengths and stride must be positive: {self}")

    @property
    def span(self) -> int:
        return self.input_len + self.output_len


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios must be three non-negative values summing to 1: {r}")
        object.__setattr__(self, "ratios", r)

    def bounds(self, length: int) -> list:
        """Raw-step ``(lo, hi)`` segments for a series of ``length`` steps."""
        cuts = np.round(np.cumsum((0.0,) + self.ratios) * length).astype(int)
        cuts[-1] = length
        return [(int(cuts[i]), int(cuts[i + 1])) for i in range(3)]


@dataclass(frozen=True)
class CorruptionSpec:
    missing_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.missing_ratio <= 1.0:
            raise ConfigurationError(f"missing ratio must lie in [0, 1], got {self.missing_ratio}")


@dataclass
class WindowedDataset:
    inputs: np.ndarray          # (S, m, N, d)
    targets: np.ndarray         # (S, z, N, d)
    day_of_week: np.ndarray     # (S, m)
    time_of_day: np.ndarray     # (S, m)
    mask: np.ndarray            # (S, m, N, d), 1 = observed
    offsets: np.ndarray         # (S,) raw index of each window's first input step
    spec: WindowSpec = field(default_factory=WindowSpec)
    segment: tuple = (0, 0)
    source: SeriesSource | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.offsets)

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx],
                       day_of_week=self.day_of_week[idx], time_of_day=self.time_of_day[idx],
                       mask=self.mask[idx], offsets=self.offsets[idx])

    def arrays(self) -> dict:
        return {"inputs": self.inputs, "targets": self.targets, "day_of_week": self.day_of_week,
                "time_of_day": self.time_of_day, "mask": self.mask.astype(np.int64),
                "offsets": self.offsets}

    def used_steps(self) -> np.ndarray:
        """Raw step indices touched by any window (inputs and targets)."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        span = np.arange(self.spec.span)
        return np.unique(self.offsets[:, None] + span)


def _windows(src: SeriesSource, spec: WindowSpec, lo: int, hi: int) -> WindowedDataset:
    m, z = spec.input_len, spec.output_len
    offsets = np.arange(lo, hi - spec.span + 1, spec.stride, dtype=np.int64)
    n, d = src.values.shape[1:]
    if len(offsets) == 0:
        empty = np.zeros((0, m, n, d), dtype=src.values.dtype)
        return WindowedDataset(empty, np.zeros((0, z, n, d), dtype=src.values.dtype),
                               np.zeros((0, m), np.int64), np.zeros((0, m), np.int64),
                               np.zeros((0, m, n, d), bool), offsets, spec, (lo, hi), src)
    seg_vals = np.where(src.mask[lo:hi], src.values[lo:hi], 0)
    view = sliding_window_view(seg_vals, spec.span, axis=0)       # (W, N, d, span)
    view = np.moveaxis(view, -1, 1)[offsets - lo]                 # (S, span, N, d)
    mview = np.moveaxis(sliding_window_view(src.mask[lo:hi], spec.span, axis=0), -1, 1)[offsets - lo]
    steps = offsets[:, None] + np.arange(m)
    dow, tod = src.calendar(steps)
    return WindowedDataset(np.ascontiguousarray(view[:, :m]), np.ascontiguousarray(view[:, m:]),
                           dow, tod, np.ascontiguousarray(mview[:, :m]), offsets, spec, (lo, hi), src)


def build_windows(src: SeriesSource, spec: WindowSpec = WindowSpec()) -> WindowedDataset:
    """All windows at offsets ``0, stride, ...`` up to ``T - m - z``."""
    if len(src) < spec.span:
        raise InsufficientDataError(
            f"series has {len(src)} steps; {spec.input_len}-in/{spec.output_len}-out windows need {spec.span}")
    return _windows(src, spec, 0, len(src))


def split_chronological(ds: WindowedDataset, spec: SplitSpec = SplitSpec()) -> tuple:
    """Train/validation/test datasets over contiguous raw-step segments.

    Windows are rebuilt inside each segment, so none straddles a boundary.
    """
    if ds.source is None:
        raise ConfigurationError("dataset carries no source series to split")
    lo, hi = ds.segment
    out = []
    for name, (a, b) in zip(("train", "val", "test"), spec.bounds(hi - lo)):
        part = _windows(ds.source, ds.spec, lo + a, lo + b)
        if len(part) == 0:
            raise ConfigurationError(f"{name} split of {b - a} steps holds no "
                                     f"{ds.spec.input_len}+{ds.spec.output_len} window")
        out.append(part)
    return tuple(out)


@dataclass
class Normalizer:
    mean: np.ndarray    # (d,)
    std: np.ndarray     # (d,)

    @classmethod
    def fit(cls, values, mask=None) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        d = values.shape[-1]
        flat = values.reshape(-1, d)
        obs = np.ones(flat.shape, bool) if mask is None else np.asarray(mask, bool).reshape(-1, d)
        mean, std = np.zeros(d), np.ones(d)
        for j in range(d):
            col = flat[obs[:, j], j]
            if col.size == 0:
                log.warning("feature %d has no observed training values; using mean 0, std 1", j)
                continue
            mean[j] = col.mean()
            s = col.std()
            if s > 0:
                std[j] = s
            else:
                log.warning("feature %d has zero variance in the training split; using std 1", j)
        return cls(mean, std)

    def transform(self, x):
        x = np.asarray(x)
        return ((x - self.mean) / self.std).astype(x.dtype, copy=False)

    def inverse(self, x):
        x = np.asarray(x)
        return (x * self.std + self.mean).astype(x.dtype, copy=False)

    def apply(self, ds: WindowedDataset, dtype=None) -> WindowedDataset:
        dtype = dtype or ds.inputs.dtype
        inputs = np.where(ds.mask, self.transform(ds.inputs.astype(np.float64)), 0.0).astype(dtype)
        targets = self.transform(ds.targets.astype(np.float64)).astype(dtype)
        return replace(ds, inputs=inputs, targets=targets)


def fit_apply_normalizer(train: WindowedDataset, *others: WindowedDataset, dtype=None) -> tuple:
    """z-score every dataset with statistics of the training segment only.

    Returns ``([train, *others] normalized, normalizer)``.
    """
    if len(train) == 0:
        raise ConfigurationError("training split is empty")
    if train.source is not None:
        lo, hi = train.segment
        norm = Normalizer.fit(train.source.values[lo:hi], train.source.mask[lo:hi])
    else:
        norm = Normalizer.fit(train.inputs, train.mask)
    return [norm.apply(ds, dtype) for ds in (train,) + others], norm


def inject_missing(ds: WindowedDataset, spec: CorruptionSpec) -> tuple:
    """Drop each input entry independently with probability ``missing_ratio``.

    Dropped entries are zeroed and their mask cleared; targets are untouched.
    Each window draws from its own stream keyed by ``(seed, offset)``.
    """
    if not 0.0 <= spec.missing_ratio <= 1.0:
        raise ConfigurationError(f"missing ratio must lie in [0, 1], got {spec.missing_ratio}")
    if spec.missing_ratio == 0.0:
        return replace(ds, mask=ds.mask.copy()), ds.mask.copy()
    shape = ds.inputs.shape[1:]
    drop = np.stack([np.random.default_rng([spec.seed, int(o)]).random(shape) < spec.missing_ratio
                     for o in ds.offsets]) if len(ds) else np.zeros(ds.inputs.shape, bool)
    mask = ds.mask & ~drop
    inputs = np.where(mask, ds.inputs, 0).astype(ds.inputs.dtype)
    return replace(ds, inputs=inputs, mask=mask), mask


# ------------------------------------------------------------------ ingestion

def synthetic_series(steps: int = 2000, nodes: int = 4, features: int = 1, granularity_minutes: int = 5,
                     noise: float = 0.5, seed: int = 0, start: datetime = DEFAULT_START,
                     missing_ratio: float = 0.0) -> SeriesSource:
    """Daily and weekly sinusoids per node with node-specific phases and Gaussian noise."""
    rng = np.random.default_rng(seed)
    src = SeriesSource(np.zeros((steps, nodes, features)), start, granularity_minutes)
    minutes = np.arange(steps) * granularity_minutes + start.hour * 60 + start.minute
    day = 2 * np.pi * minutes / MINUTES_PER_DAY
    week = day / 7 + 2 * np.pi * start.weekday() / 7
    shape = (nodes, features)
    base = rng.uniform(80, 120, shape)
    a1, a2, a3 = rng.uniform(25, 40, shape), rng.uniform(8, 15, shape), rng.uniform(5, 10, shape)
    p1, p2, p3 = (rng.uniform(0, 2 * np.pi, shape) for _ in range(3))
    t = (slice(None), None, None)
    values = (base + a1 * np.sin(day[t] + p1) + a2 * np.sin(2 * day[t] + p2)
              + a3 * np.sin(week[t] + p3) + noise * rng.standard_normal((steps,) + shape))
    mask = rng.random(values.shape) >= missing_ratio if missing_ratio > 0 else None
    return SeriesSource(values, start, granularity_minutes, mask)


def read_csv(path, num_features: int = 1) -> SeriesSource:
    """Load ``timestamp, v_1, ..., v_{N*d}``; blank cells are missing.

    Columns are node-major: node 0 features 0..d-1, then node 1, and so on.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigurationError(f"{path}: empty file, header row required")
    header = rows[0]
    ncols = len(header) - 1
    if ncols < 1 or ncols % num_features:
        raise ConfigurationError(f"{path}: header has {ncols} value columns, "
                                 f"not a multiple of {num_features} features")
    stamps, values, mask = [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != ncols + 1:
            raise ConfigurationError(f"{path}:{r}: expected {ncols + 1} columns, found {len(row)}")
        try:
            stamps.append(datetime.fromisoformat(row[0].strip()))
        except ValueError:
            raise ConfigurationError(f"{path}:{r}, column 1 ({header[0]}): bad timestamp {row[0]!r}") from None
        vals, obs = [], []
        for c, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell == "" or cell.lower() == "nan":
                vals.append(0.0)
                obs.append(False)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise ConfigurationError(f"{path}:{r}, column {c} ({header[c - 1]}): "
                                         f"not a number: {cell!r}") from None
            obs.append(True)
        values.append(vals)
        mask.append(obs)
    if len(stamps) < 2:
        raise InsufficientDataError(f"{path}: need at least two rows to infer granularity")
    gaps = {int((b - a) / timedelta(minutes=1)) for a, b in zip(stamps, stamps[1:])}
    if len(gaps) != 1 or min(gaps) <= 0:
        raise ConfigurationError(f"{path}: timestamps are not evenly spaced (gaps {sorted(gaps)} min)")
    n = ncols // num_features
    arr = np.asarray(values).reshape(len(values), n, num_features)
    return SeriesSource(arr, stamps[0], gaps.pop(), np.asarray(mask).reshape(arr.shape))


def write_csv(src: SeriesSource, path) -> None:
    t, n, d = src.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"n{i}_f{j}" for i in range(n) for j in range(d)])
        for k in range(t):
            stamp = src.start + timedelta(minutes=k * src.granularity_minutes)
            cells = [repr(float(v)) if o else "" for v, o in
                     zip(src.values[k].reshape(-1), src.mask[k].reshape(-1))]
            w.writerow([stamp.isoformat()] + cells)


def load_source(path, num_features: int = 1, granularity_minutes: int = 5,
                start: datetime = DEFAULT_START) -> SeriesSource:
    """CSV (self-describing) or STDF (values array; calendar from the arguments)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path, num_features)
    if path.suffix.lower() == ".stdf":
        values = stdf.load(path)
        if values.ndim != 3:
            raise ConfigurationError(f"{path}: expected a (T, N, d) array, got {values.shape}")
        return SeriesSource(values, start, granularity_minutes)
    raise ConfigurationError(f"{path}: unsupported series format {path.suffix!r}")


# -------------------------------------------------------------------- caching

CACHE_VERSION = 1
SPLITS = ("train", "val", "test")


def save_cache(directory, splits: dict, normalizer: Normalizer | None, spec_hash: str,
               source_hash: str = "") -> None:
    arrays = {}
    meta = {"spec_hash": spec_hash, "source_hash": source_hash, "cache_version": CACHE_VERSION,
            "splits": ",".join(splits)}
    for name, ds in splits.items():
        for key, arr in ds.arrays().items():
            arrays[f"{name}.{key}"] = arr
        meta[f"{name}.segment"] = f"{ds.segment[0]},{ds.segment[1]}"
        meta[f"{name}.window"] = f"{ds.spec.input_len},{ds.spec.output_len},{ds.spec.stride}"
    if normalizer is not None:
        arrays["normalizer.mean"] = normalizer.mean
        arrays["normalizer.std"] = normalizer.std
    stdf.save_bundle(directory, arrays, meta)


def load_cache(directory, spec_hash: str | None = None):
    """Return ``(splits, normalizer)``, or ``None`` when absent or stale."""
    directory = Path(directory)
    if not (directory / "manifest.txt").exists():
        return None
    manifest = stdf.read_manifest(directory / "manifest.txt")
    if spec_hash is not None and manifest.get("spec_hash") != spec_hash:
        log.info("cache in %s is stale (spec hash changed); rebuilding", directory)
        return None
    arrays, manifest = stdf.load_bundle(directory)
    splits = {}
    for name in [s for s in manifest.get("splits", "").split(",") if s]:
        try:
            m, z, stride = (int(v) for v in manifest[f"{name}.window"].split(","))
            seg = tuple(int(v) for v in manifest[f"{name}.segment"].split(","))
            splits[name] = WindowedDataset(
                arrays[f"{name}.inputs"], arrays[f"{name}.targets"], arrays[f"{name}.day_of_week"],
                arrays[f"{name}.time_of_day"], arrays[f"{name}.mask"].astype(bool),
                arrays[f"{name}.offsets"], WindowSpec(m, z, stride), seg)
        except KeyError as exc:
            raise IntegrityError(str(exc.args[0]), "missing from cache") from None
    norm = None
    if "normalizer.mean" in arrays:
        norm = Normalizer(arrays["normalizer.mean"], arrays["normalizer.std"])
    return splits, norm


def cache_roundtrip(ds: WindowedDataset, path, spec_hash: str = "") -> WindowedDataset:
    """Save one dataset and load it back."""
    save_cache(path, {"data": ds}, None, spec_hash)
    return load_cache(path, spec_hash)[0]["data"]
