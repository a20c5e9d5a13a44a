"""Data pipelines: synthetic branching-trajectory generator and the
glucose-trace ingestion/segmentation/windowing path.

Synthetic series share one smooth Gaussian-process regime before time zero
and split into an increasing or decreasing ramp (plus an independent GP
residual) afterwards, so the per-time marginal is unimodal before the branch
point and bimodal after it.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .model import WindowSample

NOMINAL_STEP_SECONDS = 300
MAX_JUMP_MGDL = 40.0
TIME_FEATURE_COUNT = 5


class DataError(ValueError):
    """Malformed input data; messages carry line numbers where available."""


@dataclass
class RawSeries:
    subject_id: str
    timestamps: np.ndarray  # seconds since epoch, strictly increasing
    glucose: np.ndarray     # mg/dL, positive

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.glucose = np.asarray(self.glucose, dtype=np.float64)
        if self.timestamps.shape != self.glucose.shape:
            raise DataError("timestamps and glucose lengths differ")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"timestamps not strictly increasing for {self.subject_id}")


@dataclass
class Segment:
    """Contiguous run: uniform spacing and no jump larger than the cutoff."""

    subject_id: str
    start_ts: int
    values: np.ndarray
    step_seconds: int = NOMINAL_STEP_SECONDS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def segment_id(self) -> str:
        return f"{self.subject_id}:{self.start_ts}"

    def __len__(self):
        return len(self.values)

    def timestamps(self) -> np.ndarray:
        return self.start_ts + self.step_seconds * np.arange(len(self.values), dtype=np.int64)


@dataclass
class SyntheticSeries:
    series_id: str
    times: np.ndarray
    values: np.ndarray
    branch: int  # +1 increase, -1 decrease


@dataclass
class SyntheticConfig:
    n_train: int = 2000
    n_val: int = 100
    n_test: int = 100
    grid_start: float = -4.0
    grid_stop: float = 3.0
    grid_step: float = 0.5
    branch_prob: float = 0.5
    gp_length_scale: float = 1.0
    gp_amplitude: float = 0.15
    obs_noise: float = 0.02
    branch_slope: float = 1.5

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("set sizes must be positive")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ValueError("branch_prob must be in [0, 1]")
        if min(self.gp_length_scale, self.gp_amplitude, self.obs_noise) <= 0.0:
            raise ValueError("kernel and noise parameters must be positive")

    def grid(self) -> np.ndarray:
        n = int(round((self.grid_stop - self.grid_start) / self.grid_step)) + 1
        return self.grid_start + self.grid_step * np.arange(n)


def _se_cholesky(times: np.ndarray, length_scale: float, amplitude: float) -> np.ndarray:
    """Cholesky factor of the squared-exponential kernel with small jitter."""
    diff = times[:, None] - times[None, :]
    k = amplitude ** 2 * np.exp(-0.5 * (diff / length_scale) ** 2)
    k[np.diag_indices_from(k)] += 1e-10
    return np.linalg.cholesky(k)


def generate_synthetic(cfg: SyntheticConfig, seed: int):
    """Generate (train, val, test) lists of SyntheticSeries, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E1]))
    grid = cfg.grid()
    branch_mask = grid >= 0.0
    chol_main = _se_cholesky(grid, cfg.gp_length_scale, cfg.gp_amplitude)
    chol_branch = _se_cholesky(grid[branch_mask], cfg.gp_length_scale, cfg.gp_amplitude)

    def make(split: str, count: int):
        out = []
        for i in range(count):
            path = chol_main @ rng.standard_normal(len(grid))
            resid = chol_branch @ rng.standard_normal(int(branch_mask.sum()))
            branch = 1 if rng.random() < cfg.branch_prob else -1
            values = path + rng.normal(0.0, cfg.obs_noise, size=len(grid))
            values[branch_mask] += resid + branch * cfg.branch_slope * grid[branch_mask]
            out.append(SyntheticSeries(f"{split}{i:04d}", grid.copy(), values, branch))
        return out

    return make("train", cfg.n_train), make("val", cfg.n_val), make("test", cfg.n_test)


# ---------------------------------------------------------------------------
# glucose trace ingestion

CSV_HEADER = ["subject_id", "timestamp", "glucose_mgdl"]


def ingest_csv(path) -> list:
    """Read `subject_id,timestamp,glucose_mgdl` rows into per-subject series.

    Rows are grouped by subject and sorted by timestamp; any malformed row
    fails the ingest with its line number.
    """
    by_subject: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}")
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            subject, ts_text, glu_text = (c.strip() for c in row)
            try:
                ts = int(ts_text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer timestamp {ts_text!r}") from None
            try:
                glucose = float(glu_text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric glucose {glu_text!r}") from None
            if not math.isfinite(glucose) or glucose <= 0.0:
                raise DataError(f"{path}:{lineno}: glucose must be positive, got {glu_text}")
            by_subject.setdefault(subject, []).append((ts, glucose, lineno))
    series = []
    for subject in sorted(by_subject):
        rows = sorted(by_subject[subject])
        for (ts_a, _, line_a), (ts_b, _, line_b) in zip(rows, rows[1:]):
            if ts_a == ts_b:
                raise DataError(f"{path}:{line_b}: duplicate timestamp {ts_b} for "
                                f"subject {subject} (first at line {line_a})")
        series.append(RawSeries(subject,
                                np.array([r[0] for r in rows], dtype=np.int64),
                                np.array([r[1] for r in rows], dtype=np.float64)))
    return series


def segment(series: RawSeries, min_len: int, max_jump: float = MAX_JUMP_MGDL,
            step_seconds: int = NOMINAL_STEP_SECONDS) -> list:
    """Cut at every non-nominal timestamp gap and every jump strictly larger
    than ``max_jump``; gaps are never interpolated.  Pieces shorter than
    ``min_len`` are dropped."""
    ts = series.timestamps
    values = series.glucose
    cuts = [0]
    for i in range(1, len(values)):
        if ts[i] - ts[i - 1] != step_seconds or abs(values[i] - values[i - 1]) > max_jump:
            cuts.append(i)
    cuts.append(len(values))
    out = []
    for a, b in zip(cuts, cuts[1:]):
        if b - a >= min_len:
            out.append(Segment(series.subject_id, int(ts[a]), values[a:b].copy(),
                               step_seconds=step_seconds))
    return out


def partition(items, seed: int, ratio=(20, 1, 1)):
    """Seeded whole-item split in ``ratio`` proportion (floor for the two
    small parts, remainder to the first)."""
    items = list(items)
    total = sum(ratio)
    if len(items) < total:
        warnings.warn(f"only {len(items)} items for a {ratio[0]}:{ratio[1]}:{ratio[2]} "
                      "split; assigning everything to train")
        return items, [], []
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5917])).permutation(len(items))
    n_val = len(items) * ratio[1] // total
    n_test = len(items) * ratio[2] // total
    val = [items[i] for i in order[:n_val]]
    test = [items[i] for i in order[n_val:n_val + n_test]]
    train = [items[i] for i in order[n_val + n_test:]]
    return train, val, test


def time_features(timestamps: np.ndarray) -> np.ndarray:
    """Calendar features per timestamp, each affinely scaled to [-0.5, 0.5]:
    day-of-year, day-of-month, day-of-week, hour, minute."""
    out = np.empty((len(timestamps), TIME_FEATURE_COUNT))
    for i, ts in enumerate(timestamps):
        dt = datetime.fromtimestamp(int(ts), tz=timezone.utc)
        out[i, 0] = (dt.timetuple().tm_yday - 1) / 365.0 - 0.5
        out[i, 1] = (dt.day - 1) / 30.0 - 0.5
        out[i, 2] = dt.weekday() / 6.0 - 0.5
        out[i, 3] = dt.hour / 23.0 - 0.5
        out[i, 4] = dt.minute / 59.0 - 0.5
    return out


def windowize(seg: Segment, t_enc: int, t_pred: int, stride: int = 1,
              subject_index: int = 0, with_time_features: bool = True) -> list:
    """Sliding windows over one segment; windows never cross segment bounds."""
    total = t_enc + t_pred
    out = []
    if len(seg) < total:
        return out
    ts = seg.timestamps()
    feats = time_features(ts) if with_time_features else np.zeros((len(seg), 0))
    for start in range(0, len(seg) - total + 1, stride):
        mid = start + t_enc
        end = mid + t_pred
        out.append(WindowSample(
            window_id=f"{seg.segment_id}:{start}",
            x=seg.values[start:mid].copy(),
            timefeat=feats[start:mid].copy(),
            timefeat_future=feats[mid:end].copy(),
            subject=subject_index,
            y=seg.values[mid:end].copy(),
            y_raw=seg.values[mid:end].copy(),
        ))
    return out


@dataclass
class Affine:
    """Invertible normalization y -> (y - mean) / std."""

    mean: float
    std: float

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def normalize(train_values) -> Affine:
    """Z-score transform fit on training values only."""
    values = np.asarray(train_values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot fit normalization on an empty training set")
    mean = float(np.mean(values))
    std = float(np.std(values))
    if std == 0.0:
        warnings.warn("training values have zero variance; using identity scale")
        std = 1.0
    return Affine(mean=mean, std=std)


def apply_normalization(windows, affine: Affine):
    """Normalize window inputs/targets in place, keeping raw targets."""
    for w in windows:
        w.x = affine.apply(w.x)
        w.y = affine.apply(w.y_raw)
    return windows


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    affine: Affine
    kind: str
    subject_index: dict = field(default_factory=dict)
    split_assignment: dict = field(default_factory=dict)
    step_seconds: int = NOMINAL_STEP_SECONDS


def branch_point_index(times: np.ndarray) -> int:
    """Index of the last grid point at or before time zero."""
    nonpos = np.nonzero(times <= 0.0)[0]
    if len(nonpos) == 0:
        raise DataError("synthetic series has no points at or before time zero")
    return int(nonpos[-1])


def synthetic_window(series: SyntheticSeries, t_enc: int, t_pred: int) -> WindowSample:
    """The branch-aligned window: encoder ends at the branch point, targets
    cover the first t_pred points after it."""
    pivot = branch_point_index(series.times)
    start = pivot - t_enc + 1
    end = pivot + 1 + t_pred
    if start < 0 or end > len(series.values):
        raise DataError(f"series {series.series_id} too short for encoder {t_enc} "
                        f"+ prediction {t_pred} around the branch point")
    return WindowSample(
        window_id=series.series_id,
        x=series.values[start:pivot + 1].copy(),
        timefeat=np.zeros((t_enc, 0)),
        timefeat_future=np.zeros((t_pred, 0)),
        subject=0,
        y=series.values[pivot + 1:end].copy(),
        y_raw=series.values[pivot + 1:end].copy(),
    )


def build_synthetic_dataset(train_series, val_series, test_series,
                            t_enc: int, t_pred: int) -> Dataset:
    affine = normalize(np.concatenate([s.values for s in train_series]))
    splits = []
    assignment = {}
    for name, series_list in (("train", train_series), ("val", val_series), ("test", test_series)):
        windows = [synthetic_window(s, t_enc, t_pred) for s in series_list]
        apply_normalization(windows, affine)
        splits.append(windows)
        for s in series_list:
            assignment[s.series_id] = name
    return Dataset(train=splits[0], val=splits[1], test=splits[2], affine=affine,
                   kind="synthetic", split_assignment=assignment, step_seconds=0)


def build_cgm_dataset(series_list, t_enc: int, t_pred: int, seed: int,
                      stride: int = 1, max_jump: float = MAX_JUMP_MGDL,
                      step_seconds: int = NOMINAL_STEP_SECONDS) -> Dataset:
    """Segment, split by whole segments, window, and normalize glucose traces.

    Subject index 0 is reserved for subjects unseen at training time.
    """
    min_len = t_enc + t_pred
    segments = []
    for series in series_list:
        segments.extend(segment(series, min_len, max_jump, step_seconds))
    if not segments:
        raise DataError("no usable segments after cleaning")
    train_segs, val_segs, test_segs = partition(segments, seed)
    subject_index = {sid: i + 1 for i, sid in
                     enumerate(sorted({s.subject_id for s in segments}))}
    affine = normalize(np.concatenate([s.values for s in train_segs]) if train_segs
                       else np.concatenate([s.values for s in segments]))
    splits = []
    assignment = {}
    for name, segs in (("train", train_segs), ("val", val_segs), ("test", test_segs)):
        windows = []
        for seg_item in segs:
            assignment[seg_item.segment_id] = name
            windows.extend(windowize(seg_item, t_enc, t_pred, stride=stride,
                                     subject_index=subject_index[seg_item.subject_id]))
        apply_normalization(windows, affine)
        splits.append(windows)
    return Dataset(train=splits[0], val=splits[1], test=splits[2], affine=affine,
                   kind="cgm", subject_index=subject_index,
                   split_assignment=assignment, step_seconds=step_seconds)


# ---------------------------------------------------------------------------
# synthetic csv io


def write_synthetic_csv(series_list, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", "time", "value"])
        for s in series_list:
            for t, v in zip(s.times, s.values):
                writer.writerow([s.series_id, repr(float(t)), repr(float(v))])


def read_synthetic_csv(path) -> list:
    order = []
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["series_id", "time", "value"]:
            raise DataError(f"{path}: expected header series_id,time,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            sid = row[0]
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            try:
                rows[sid].append((float(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric entry") from None
    out = []
    for sid in order:
        pts = rows[sid]
        times = np.array([p[0] for p in pts])
        values = np.array([p[1] for p in pts])
        branch = 1 if values[-1] >= values[np.argmin(np.abs(times))] else -1
        out.append(SyntheticSeries(sid, times, values, branch))
    return out
