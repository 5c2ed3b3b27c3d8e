"""Prediction sets, error tables, agreement statistics and uncertainty summaries.

All reductions iterate keys in sorted (subject, month) order so reports are
bit-identical for identical inputs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import DIAGNOSES, N_ROI, ROI_COLUMNS, Cohort

GROUPS = ("All",) + DIAGNOSES
PRED_HEADER = ("subject_id", "target_month", "realization") + ROI_COLUMNS
POINT_ESTIMATES = ("mean", "median")


class EvaluationError(ValueError):
    pass


Key = tuple[str, int]


class PredictionSet:
    """Map (subject_id, month) -> (K, 68) predictions in mm, K uniform."""

    def __init__(self, preds: Mapping[Key, np.ndarray]):
        if not preds:
            raise EvaluationError("prediction set is empty")
        self.preds: dict[Key, np.ndarray] = {}
        ks = set()
        for (sid, month), arr in preds.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[None]
            if arr.ndim != 2 or arr.shape[1] != N_ROI:
                raise EvaluationError(f"prediction for {(sid, month)} has shape {arr.shape}, expected (K, {N_ROI})")
            ks.add(arr.shape[0])
            self.preds[(str(sid), int(month))] = arr
        if len(ks) != 1:
            raise EvaluationError(f"realization count differs across keys: {sorted(ks)}")
        self.k = ks.pop()

    def keys(self) -> list[Key]:
        return sorted(self.preds)

    def __len__(self) -> int:
        return len(self.preds)

    def __getitem__(self, key: Key) -> np.ndarray:
        return self.preds[key]

    def months(self) -> list[int]:
        return sorted({m for _, m in self.preds})

    def point(self, key: Key, estimate: str = "mean") -> np.ndarray:
        arr = self.preds[key]
        if estimate == "mean":
            return arr.mean(axis=0)
        if estimate == "median":
            return np.median(arr, axis=0)
        raise EvaluationError(f"unknown point estimate {estimate!r}; expected one of {POINT_ESTIMATES}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PRED_HEADER)
            for sid, month in self.keys():
                for r, row in enumerate(self.preds[(sid, month)]):
                    w.writerow([sid, month, r] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "PredictionSet":
        rows: dict[Key, dict[int, np.ndarray]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise EvaluationError(f"{path}: empty prediction file")
            missing = [c for c in PRED_HEADER if c not in header]
            if missing:
                raise EvaluationError(f"{path}: missing column {missing[0]!r}")
            col = {c: header.index(c) for c in PRED_HEADER}
            roi_idx = [col[c] for c in ROI_COLUMNS]
            for line, rec in enumerate(reader, start=2):
                try:
                    key = (rec[col["subject_id"]], int(rec[col["target_month"]]))
                    r = int(rec[col["realization"]])
                    vals = np.array([float(rec[i]) for i in roi_idx])
                except (ValueError, IndexError) as exc:
                    raise EvaluationError(f"{path}:{line}: malformed row ({exc})") from None
                slot = rows.setdefault(key, {})
                if r in slot:
                    raise EvaluationError(f"{path}:{line}: duplicate realization {r} for {key}")
                slot[r] = vals
        preds = {}
        for key, slot in rows.items():
            if sorted(slot) != list(range(len(slot))):
                raise EvaluationError(f"realizations for {key} are not numbered 0..K-1")
            preds[key] = np.stack([slot[r] for r in range(len(slot))])
        return cls(preds)


def _truth_table(truth: Cohort) -> dict[Key, tuple[np.ndarray, str]]:
    return {(s.id, m): (s.visits[m], s.dx_by_visit[m]) for s in truth for m in s.visits}


def carry_forward(truth: Cohort, keys: Iterable[Key]) -> PredictionSet:
    """Zero-change predictor: every target equals the subject's baseline."""
    subjects = truth.by_id()
    out = {}
    for sid, m in keys:
        if sid not in subjects:
            raise EvaluationError(f"subject {sid!r} not in the truth cohort")
        out[(sid, m)] = subjects[sid].baseline[None]
    return PredictionSet(out)


def _paired(pred: PredictionSet, truth: Cohort, months: Sequence[int] | None, estimate: str):
    """Sorted list of (key, point prediction, truth row, visit diagnosis)."""
    table = _truth_table(truth)
    out = []
    for key in pred.keys():
        if months is not None and key[1] not in months:
            continue
        if key not in table:
            raise EvaluationError(f"prediction key {key} has no ground truth")
        cth, dx = table[key]
        out.append((key, pred.point(key, estimate), cth, dx))
    return out


def _mean_sd(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "sd": sd, "n": int(v.size)}


def mae_by_group(pred: PredictionSet, truth: Cohort, months: Sequence[int] | None = None,
                 estimate: str = "mean") -> dict[str, dict]:
    """Per-subject MAE (over ROIs and visits), then mean and SD over subjects per group.

    A subject's group is its diagnosis at the latest evaluated visit. Groups
    without subjects are absent from the result.
    """
    per_subject: dict[str, list[float]] = {}
    dx_of: dict[str, tuple[int, str]] = {}
    for (sid, m), p, t, dx in _paired(pred, truth, months, estimate):
        per_subject.setdefault(sid, []).append(float(np.mean(np.abs(p - t))))
        if sid not in dx_of or m > dx_of[sid][0]:
            dx_of[sid] = (m, dx)
    if not per_subject:
        raise EvaluationError("no prediction matches the requested months")
    mae = {sid: float(np.mean(v)) for sid, v in sorted(per_subject.items())}
    table = {"All": _mean_sd(list(mae.values()))}
    for g in DIAGNOSES:
        vals = [v for sid, v in mae.items() if dx_of[sid][1] == g]
        if vals:
            table[g] = _mean_sd(vals)
    return table


@dataclass(frozen=True)
class AgreementReport:
    md: float
    sd: float
    lower: float
    upper: float
    n: int


def bland_altman(pred, truth) -> AgreementReport:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise EvaluationError(f"shape mismatch: {p.shape} predictions vs {t.shape} truths")
    if p.size < 2:
        raise EvaluationError("Bland-Altman analysis needs at least 2 paired points")
    d = p - t
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    return AgreementReport(md, sd, md - 1.96 * sd, md + 1.96 * sd, int(d.size))


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    n: int


def linear_fit(pred, truth) -> LinearFit:
    """Ordinary least squares of pred on truth; R^2 is the squared Pearson r."""
    y = np.asarray(pred, dtype=np.float64).ravel()
    x = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise EvaluationError(f"shape mismatch: {y.shape} predictions vs {x.shape} truths")
    if x.size < 3:
        raise EvaluationError("linear fit needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise EvaluationError("truth has zero variance; slope undefined")
    syy = float(dy @ dy)
    sxy = float(dx @ dy)
    slope = sxy / sxx
    r2 = 1.0 if syy == 0.0 and slope == 0.0 else sxy * sxy / (sxx * syy) if syy > 0 else 0.0
    return LinearFit(slope, float(y.mean() - slope * x.mean()), r2, int(x.size))


@dataclass
class UncertaintyStats:
    mean: np.ndarray
    std: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray


def interval(samples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Central 95% interval: empirical percentiles for K >= 40, Gaussian otherwise."""
    samples = np.asarray(samples, dtype=np.float64)
    k = samples.shape[axis]
    if k < 2:
        raise EvaluationError("an interval needs K >= 2 realizations; use deterministic evaluation for K = 1")
    if k >= 40:
        lo, hi = np.percentile(samples, [2.5, 97.5], axis=axis)
        return lo, hi
    mean, std = _mean_std(samples, axis)
    return mean - 1.96 * std, mean + 1.96 * std


def _mean_std(samples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    # shifting by the first realization keeps identical draws at exactly zero spread
    ref = np.take(samples, [0], axis=axis)
    dev = samples - ref
    return np.squeeze(ref, axis) + dev.mean(axis=axis), dev.std(axis=axis, ddof=1)


def uncertainty_summary(pred: PredictionSet) -> dict[Key, UncertaintyStats]:
    if pred.k < 2:
        raise EvaluationError("uncertainty needs K >= 2 realizations; use deterministic evaluation for K = 1")
    out = {}
    for key in pred.keys():
        arr = pred[key]
        lo, hi = interval(arr)
        mean, std = _mean_std(arr)
        out[key] = UncertaintyStats(mean, std, lo, hi)
    return out


# ---------------------------------------------------------------- reports

def _group_points(pairs, group: str):
    sel = [(p, t) for _, p, t, dx in pairs if group == "All" or dx == group]
    if not sel:
        return None, None
    return np.concatenate([p for p, _ in sel]), np.concatenate([t for _, t in sel])


def _per_group(pairs, fn) -> dict:
    out = {}
    for g in GROUPS:
        p, t = _group_points(pairs, g)
        if p is None:
            continue
        try:
            out[g] = asdict(fn(p, t))
        except EvaluationError as exc:
            out[g] = {"error": str(exc)}
    return out


def _scopes(pred: PredictionSet) -> list[tuple[str, list[int] | None]]:
    return [("all_months", None)] + [(f"m{m}", [m]) for m in pred.months()]


def metrics_report(pred: PredictionSet, truth: Cohort, estimate: str = "mean") -> dict:
    """JSON-ready report with sections mae_table, bland_altman, linear_fit, uncertainty.

    Each of the first three is keyed by scope (``all_months`` then ``m<month>``)
    and group. ``carry_forward_mae`` gives the zero-change reference on the
    same keys.
    """
    cf = carry_forward(truth, pred.keys())
    report = {"model": {"realizations": pred.k, "point_estimate": estimate, "n_predictions": len(pred)},
              "mae_table": {}, "carry_forward_mae": {}, "bland_altman": {}, "linear_fit": {}}
    for name, months in _scopes(pred):
        pairs = _paired(pred, truth, months, estimate)
        report["mae_table"][name] = mae_by_group(pred, truth, months, estimate)
        report["carry_forward_mae"][name] = mae_by_group(cf, truth, months)
        report["bland_altman"][name] = _per_group(pairs, bland_altman)
        report["linear_fit"][name] = _per_group(pairs, linear_fit)
    if pred.k >= 2:
        summ = uncertainty_summary(pred)
        widths = np.concatenate([s.hi95 - s.lo95 for s in summ.values()])
        stds = np.concatenate([s.std for s in summ.values()])
        report["uncertainty"] = {"available": True, "realizations": pred.k,
                                 "interval": "percentile" if pred.k >= 40 else "gaussian",
                                 "mean_std": float(stds.mean()), "mean_interval_width": float(widths.mean())}
    else:
        report["uncertainty"] = {"available": False, "realizations": pred.k, "interval": None,
                                 "mean_std": None, "mean_interval_width": None}
    return report


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_report(pred: PredictionSet, truth: Cohort, out_json, estimate: str = "mean",
                 trajectory_subjects: Sequence[str] | None = None) -> dict:
    """Write the JSON report plus plot-ready CSVs beside it; returns the report."""
    out_json = Path(out_json)
    out_dir = out_json.parent
    report = metrics_report(pred, truth, estimate)
    out_json.write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")

    pairs = _paired(pred, truth, None, estimate)
    ba_rows, fit_rows = [], []
    for (sid, m), p, t, dx in pairs:
        for r in range(N_ROI):
            a, b = float(p[r]), float(t[r])
            ba_rows.append([sid, m, dx, ROI_COLUMNS[r], repr((a + b) / 2), repr(a - b)])
            fit_rows.append([sid, m, dx, ROI_COLUMNS[r], repr(b), repr(a)])
    _write_rows(out_dir / "ba_points.csv", ("subject_id", "month", "dx", "roi", "mean", "difference"), ba_rows)
    _write_rows(out_dir / "fit_points.csv", ("subject_id", "month", "dx", "roi", "truth", "pred"), fit_rows)

    summ = uncertainty_summary(pred) if pred.k >= 2 else None
    wanted = set(trajectory_subjects) if trajectory_subjects is not None else None
    by_subject: dict[str, list[int]] = {}
    for sid, m in pred.keys():
        if wanted is None or sid in wanted:
            by_subject.setdefault(sid, []).append(m)
    for sid, months in by_subject.items():
        rows = []
        for m in months:
            if summ is not None:
                s = summ[(sid, m)]
                mean, lo, hi = s.mean, s.lo95, s.hi95
            else:
                mean = lo = hi = pred.point((sid, m), estimate)
            rows.extend([m, ROI_COLUMNS[r], repr(float(mean[r])), repr(float(lo[r])), repr(float(hi[r]))]
                        for r in range(N_ROI))
        _write_rows(out_dir / f"trajectory_{sid}.csv", ("month", "roi", "mean", "lo95", "hi95"), rows)
    return report
