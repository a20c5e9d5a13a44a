"""Accuracy metrics, test likelihoods, calibration, sharpness, and report files.

Point errors (APE/RMSE) are computed on the raw scale and aggregated by
median; likelihoods, calibration, and sharpness are computed on the
normalized scale shared by every model under comparison.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dist import (
    BaseKind, MixtureSample, gaussian_avg_loglik, gaussian_mle_variance,
    mixture_cdf, mixture_log_pdf, mixture_variance,
)

HYPO_MGDL = 70.0
HYPER_MGDL = 180.0
ZERO_TARGET_EPS = 1e-6
WINDOW_MINUTES = (15, 30, 45, 60)
DEFAULT_MESH_SIZE = 12
SIGMA2_FLOOR = 1e-12


class ZeroTargetError(ValueError):
    """A target too close to zero makes the percentage error undefined."""


class EventClass(Enum):
    FULL = "full"
    HYPO = "hypo"
    HYPER = "hyper"
    EVENT = "event"


def point_forecast(sample: MixtureSample) -> np.ndarray:
    """Mixture mean per horizon: the arithmetic mean of the draw means."""
    return sample.means().mean(axis=0)


def ape(y_raw, yhat_raw) -> float:
    """Average percentage error over the window, in percent."""
    y = np.asarray(y_raw, dtype=np.float64)
    yhat = np.asarray(yhat_raw, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    if np.any(np.abs(y) < ZERO_TARGET_EPS):
        raise ZeroTargetError("target within 1e-6 of zero")
    return float(100.0 * np.mean(np.abs((y - yhat) / y)))


def rmse(y_raw, yhat_raw) -> float:
    y = np.asarray(y_raw, dtype=np.float64)
    yhat = np.asarray(yhat_raw, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def classify_event(y_raw) -> set:
    """Event classes of a forecast window on the raw mg/dL scale."""
    y = np.asarray(y_raw, dtype=np.float64)
    classes = {EventClass.FULL}
    if np.min(y) < HYPO_MGDL:
        classes.add(EventClass.HYPO)
    if np.max(y) > HYPER_MGDL:
        classes.add(EventClass.HYPER)
    if classes - {EventClass.FULL}:
        classes.add(EventClass.EVENT)
    return classes


@dataclass
class MetricsRow:
    window: str
    event_class: str
    ape: float
    rmse: float
    n: int


@dataclass
class MetricsReport:
    rows: list
    excluded_zero_targets: int = 0


def window_lengths(t_pred: int, step_seconds: int) -> list:
    """Report windows: the standard minute marks that fit, plus the full
    horizon when it is not already one of them."""
    out = []
    if step_seconds > 0:
        for minutes in WINDOW_MINUTES:
            span = minutes * 60
            if span % step_seconds == 0 and span // step_seconds <= t_pred:
                out.append((f"{minutes}min", span // step_seconds))
    if not any(h == t_pred for _, h in out):
        out.append(("full", t_pred))
    return out


def aggregate_metrics(pairs, t_pred: int, step_seconds: int) -> MetricsReport:
    """Median APE/RMSE per (window, event class) over (y_raw, yhat_raw) pairs.

    Event classes are recomputed per window length from the truncated raw
    targets; zero-target samples are excluded from APE with a count.
    """
    rows = []
    excluded = 0
    for window_name, horizon in window_lengths(t_pred, step_seconds):
        per_class: dict[EventClass, list] = {c: [] for c in EventClass}
        for y_raw, yhat_raw in pairs:
            y_w = np.asarray(y_raw)[:horizon]
            yhat_w = np.asarray(yhat_raw)[:horizon]
            r = rmse(y_w, yhat_w)
            try:
                a = ape(y_w, yhat_w)
            except ZeroTargetError:
                excluded += 1
                continue
            for cls in classify_event(y_w):
                per_class[cls].append((a, r))
        for cls in EventClass:
            entries = per_class[cls]
            if not entries:
                continue  # absent classes are omitted, not zeroed
            apes = np.array([e[0] for e in entries])
            rmses = np.array([e[1] for e in entries])
            rows.append(MetricsRow(window_name, cls.value,
                                   float(np.median(apes)), float(np.median(rmses)),
                                   len(entries)))
    return MetricsReport(rows=rows, excluded_zero_targets=excluded)


def test_loglik_imm(samples_and_targets, kind: BaseKind = BaseKind.GAUSSIAN) -> float:
    """Average mixture log-likelihood over (MixtureSample, normalized target) pairs."""
    pairs = list(samples_and_targets)
    if not pairs:
        raise ValueError("no test samples")
    return float(np.mean([mixture_log_pdf(s, y, kind) for s, y in pairs]))


def test_loglik_gaussian_baseline(predictions, targets) -> tuple:
    """Likelihood of a constant-variance Gaussian around point predictions.

    Returns (average log-likelihood, MLE variance); the variance is floored
    at 1e-12 for degenerate zero-residual inputs.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    ys = np.asarray(targets, dtype=np.float64)
    if preds.shape != ys.shape or preds.ndim != 2:
        raise ValueError("predictions and targets must be matching (n, T) arrays")
    sigma2 = gaussian_mle_variance(ys - preds)
    if sigma2 < SIGMA2_FLOOR:
        warnings.warn("zero residual variance; flooring at 1e-12")
        sigma2 = SIGMA2_FLOOR
    return gaussian_avg_loglik(sigma2, ys.shape[1]), sigma2


@dataclass
class CalibrationReport:
    """Nominal levels and per-horizon empirical frequencies."""

    etas: np.ndarray          # (L,)
    eta_hat: np.ndarray       # (T, L)

    @property
    def horizons(self) -> int:
        return self.eta_hat.shape[0]


def calibration_mesh(mesh_size: int = DEFAULT_MESH_SIZE) -> np.ndarray:
    return np.arange(1, mesh_size + 1) / (mesh_size + 1.0)


def calibration(cdf_values, mesh_size: int = DEFAULT_MESH_SIZE) -> CalibrationReport:
    """Empirical frequency of {F_hat(y) < eta} per horizon and mesh level.

    ``cdf_values`` is (n, T): the predictive CDF evaluated at each realized
    target.  The indicator is strict.
    """
    f = np.asarray(cdf_values, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError("cdf_values must be a nonempty (n, T) array")
    etas = calibration_mesh(mesh_size)
    eta_hat = np.stack([(f[:, j][:, None] < etas[None, :]).mean(axis=0)
                        for j in range(f.shape[1])])
    return CalibrationReport(etas=etas, eta_hat=eta_hat)


def mixture_cdf_matrix(samples_and_targets, kind: BaseKind = BaseKind.GAUSSIAN) -> np.ndarray:
    """(n, T) matrix of the mixture CDF evaluated at normalized targets."""
    rows = []
    for sample, y in samples_and_targets:
        rows.append([mixture_cdf(sample, h, y[h - 1], kind)
                     for h in range(1, sample.horizons + 1)])
    return np.asarray(rows, dtype=np.float64)


@dataclass
class SharpnessReport:
    variances: np.ndarray  # (T,) mean predictive variance per horizon


def sharpness_report(samples, kind: BaseKind = BaseKind.GAUSSIAN) -> SharpnessReport:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    horizons = samples[0].horizons
    var = np.array([
        np.mean([mixture_variance(s, h, kind) for s in samples])
        for h in range(1, horizons + 1)
    ])
    return SharpnessReport(variances=var)


# ---------------------------------------------------------------------------
# report files


def _fmt(value) -> str:
    return repr(float(value))


def emit_reports(out_dir, metrics: MetricsReport = None,
                 calibration_report: CalibrationReport = None,
                 sharpness: SharpnessReport = None,
                 logliks: dict = None, svg: bool = True):
    """Write metrics/calibration/sharpness/loglik CSVs (headers even when
    empty) and optionally a self-contained calibration SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "class", "ape", "rmse", "n"])
        if metrics is not None:
            for row in metrics.rows:
                w.writerow([row.window, row.event_class, _fmt(row.ape),
                            _fmt(row.rmse), row.n])

    with open(out / "calibration.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "eta", "eta_hat"])
        if calibration_report is not None:
            for j in range(calibration_report.horizons):
                for eta, eta_hat in zip(calibration_report.etas,
                                        calibration_report.eta_hat[j]):
                    w.writerow([j + 1, _fmt(eta), _fmt(eta_hat)])

    with open(out / "sharpness.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "variance"])
        if sharpness is not None:
            for j, var in enumerate(sharpness.variances, start=1):
                w.writerow([j, _fmt(var)])

    with open(out / "loglik.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "avg_ll"])
        if logliks:
            for model, value in logliks.items():
                w.writerow([model, _fmt(value)])

    if svg and calibration_report is not None:
        (out / "calibration.svg").write_text(calibration_svg(calibration_report))


def read_metrics_csv(path) -> MetricsReport:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(MetricsRow(row["window"], row["class"], float(row["ape"]),
                                   float(row["rmse"]), int(row["n"])))
    return MetricsReport(rows=rows)


def read_calibration_csv(path) -> CalibrationReport:
    per_horizon: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_horizon.setdefault(int(row["horizon"]), []).append(
                (float(row["eta"]), float(row["eta_hat"])))
    if not per_horizon:
        return CalibrationReport(etas=np.zeros(0), eta_hat=np.zeros((0, 0)))
    horizons = sorted(per_horizon)
    etas = np.array([e for e, _ in per_horizon[horizons[0]]])
    eta_hat = np.stack([np.array([h for _, h in per_horizon[j]]) for j in horizons])
    return CalibrationReport(etas=etas, eta_hat=eta_hat)


def read_sharpness_csv(path) -> SharpnessReport:
    values = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            values.append((int(row["horizon"]), float(row["variance"])))
    values.sort()
    return SharpnessReport(variances=np.array([v for _, v in values]))


def read_loglik_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["model"]] = float(row["avg_ll"])
    return out


def calibration_svg(report: CalibrationReport, size: int = 420, margin: int = 40) -> str:
    """Reliability diagram: one polyline per horizon plus the 45-degree
    reference line; no external assets."""
    span = size - 2 * margin

    def sx(v):
        return margin + v * span

    def sy(v):
        return size - margin - v * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line class="axis" x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(0)}" '
        'stroke="black"/>',
        f'<line class="axis" x1="{sx(0)}" y1="{sy(0)}" x2="{sx(0)}" y2="{sy(1)}" '
        'stroke="black"/>',
        f'<line class="reference" x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" '
        'stroke="gray" stroke-dasharray="6,4"/>',
    ]
    horizons = report.horizons
    for j in range(horizons):
        hue = int(360 * j / max(1, horizons))
        pts = " ".join(f"{sx(e):.2f},{sy(h):.2f}"
                       for e, h in zip(report.etas, report.eta_hat[j]))
        parts.append(f'<polyline class="horizon" fill="none" '
                     f'stroke="hsl({hue},70%,45%)" points="{pts}"/>')
    parts.append(f'<text x="{size // 2}" y="{size - 8}" font-size="12" '
                 'text-anchor="middle">nominal level</text>')
    parts.append(f'<text x="12" y="{size // 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 12 {size // 2})">empirical frequency</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
