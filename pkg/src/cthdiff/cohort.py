"""Synthetic longitudinal cortical-thickness cohorts.

The generator mirrors the structure of a TADPOLE-style study: 68
Desikan-Killiany regions, visits at months 0/6/12/24/36, complete baselines,
a complete-data test split and visit-level missingness in training. The
biology (atrophy rates, vulnerability, noise) is a plausible toy model with
every knob exposed on :class:`CohortSpec`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .rng import substream

N_ROI = 68
VISIT_MONTHS = (0, 6, 12, 24, 36)
DIAGNOSES = ("CN", "MCI", "AD")

_DK_REGIONS = (
    "bankssts", "caudalanteriorcingulate", "caudalmiddlefrontal", "cuneus", "entorhinal",
    "fusiform", "inferiorparietal", "inferiortemporal", "isthmuscingulate", "lateraloccipital",
    "lateralorbitofrontal", "lingual", "medialorbitofrontal", "middletemporal", "parahippocampal",
    "paracentral", "parsopercularis", "parsorbitalis", "parstriangularis", "pericalcarine",
    "postcentral", "posteriorcingulate", "precentral", "precuneus", "rostralanteriorcingulate",
    "rostralmiddlefrontal", "superiorfrontal", "superiorparietal", "superiortemporal",
    "supramarginal", "frontalpole", "temporalpole", "transversetemporal", "insula",
)
ROI_NAMES = tuple(f"{h}_{r}" for h in ("lh", "rh") for r in _DK_REGIONS)
ROI_COLUMNS = tuple(f"roi_{i:03d}" for i in range(1, N_ROI + 1))
CSV_HEADER = ("subject_id", "visit_month", "sex", "age_bl", "dx") + ROI_COLUMNS

_TEMPORAL = {"entorhinal", "parahippocampal", "fusiform", "inferiortemporal", "middletemporal",
             "superiortemporal", "temporalpole", "bankssts", "transversetemporal"}
TEMPORAL_MASK = np.array([name.split("_", 1)[1] in _TEMPORAL for name in ROI_NAMES])
PARAHIPPOCAMPAL = (ROI_NAMES.index("lh_parahippocampal"), ROI_NAMES.index("rh_parahippocampal"))


class CohortError(ValueError):
    """Invalid cohort data or an infeasible cohort specification."""


@dataclass
class Subject:
    id: str
    sex: int
    age_bl: float
    dx_by_visit: dict[int, str]
    visits: dict[int, np.ndarray]

    @property
    def months(self) -> list[int]:
        return sorted(self.visits)

    @property
    def baseline(self) -> np.ndarray:
        return self.visits[0]

    def is_complete(self, months: Iterable[int] = VISIT_MONTHS) -> bool:
        return all(m in self.visits for m in months)


@dataclass
class Cohort:
    subjects: list[Subject]

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[Subject]:
        return iter(self.subjects)

    def by_id(self) -> dict[str, Subject]:
        return {s.id: s for s in self.subjects}


@dataclass
class CohortSpec:
    n_subjects: int = 898
    n_train: int = 720
    n_test: int = 178
    train_counts: dict[str, int] = field(default_factory=lambda: {"AD": 187, "MCI": 324, "CN": 209})
    test_counts: dict[str, int] = field(default_factory=lambda: {"AD": 0, "MCI": 100, "CN": 78})
    test_m36_counts: dict[str, int] = field(default_factory=lambda: {"AD": 40, "MCI": 68, "CN": 70})
    # annual fractional thinning at vulnerability 1
    atrophy_rates: dict[str, float] = field(default_factory=lambda: {"CN": 0.005, "MCI": 0.015, "AD": 0.030})
    vulnerability_range: tuple[float, float] = (0.5, 2.0)
    template_range: tuple[float, float] = (2.0, 3.5)
    template_seed: int = 0
    noise_std: float = 0.05
    missingness: dict[int, float] = field(default_factory=lambda: {6: 0.10, 12: 0.15, 24: 0.25, 36: 0.35})
    # subject-level severity: scales the atrophy rate and thins vulnerable regions at baseline
    severity_rate_gain: float = 0.3
    severity_baseline_deficit: float = 0.03
    group_baseline_deficit: dict[str, float] = field(default_factory=lambda: {"CN": 0.0, "MCI": 0.02, "AD": 0.05})
    subject_offset_std: float = 0.04
    roi_variation_std: float = 0.05
    age_mean: dict[str, float] = field(default_factory=lambda: {"CN": 74.0, "MCI": 73.0, "AD": 75.0})
    age_std: float = 7.0
    seed: int = 0

    def __post_init__(self):
        # JSON round-trips turn int keys into strings
        self.missingness = {int(k): float(v) for k, v in self.missingness.items()}
        self.vulnerability_range = tuple(self.vulnerability_range)
        self.template_range = tuple(self.template_range)

    def transitions(self) -> dict[str, int]:
        """Number of test subjects making each diagnosis transition by m36."""
        bl, m36 = self.test_counts, self.test_m36_counts
        mci_to_ad = m36.get("AD", 0) - bl.get("AD", 0)
        cn_to_mci = bl.get("CN", 0) - m36.get("CN", 0)
        if mci_to_ad < 0 or cn_to_mci < 0 or mci_to_ad > bl.get("MCI", 0) or cn_to_mci > bl.get("CN", 0):
            raise CohortError(f"m36 composition {m36} is unreachable from baseline {bl} "
                              "with MCI->AD and CN->MCI transitions only")
        if bl.get("MCI", 0) - mci_to_ad + cn_to_mci != m36.get("MCI", 0):
            raise CohortError(f"m36 MCI count {m36.get('MCI', 0)} inconsistent with transitions")
        return {"MCI->AD": mci_to_ad, "CN->MCI": cn_to_mci}

    def validate(self) -> None:
        if self.n_train + self.n_test != self.n_subjects:
            raise CohortError(f"n_train + n_test = {self.n_train + self.n_test} != n_subjects = {self.n_subjects}")
        for name, counts, total in (("train_counts", self.train_counts, self.n_train),
                                    ("test_counts", self.test_counts, self.n_test),
                                    ("test_m36_counts", self.test_m36_counts, self.n_test)):
            if set(counts) - set(DIAGNOSES):
                raise CohortError(f"{name} has unknown diagnoses {sorted(set(counts) - set(DIAGNOSES))}")
            if any(v < 0 for v in counts.values()) or sum(counts.values()) != total:
                raise CohortError(f"{name} {counts} must be non-negative and sum to {total}")
        if set(self.missingness) - set(VISIT_MONTHS[1:]):
            raise CohortError(f"missingness months must be follow-up visits {VISIT_MONTHS[1:]}")
        if any(not 0.0 <= p < 1.0 for p in self.missingness.values()):
            raise CohortError("missingness rates must lie in [0, 1)")
        if self.noise_std < 0 or any(r < 0 for r in self.atrophy_rates.values()):
            raise CohortError("noise_std and atrophy rates must be non-negative")
        self.transitions()


def roi_template(spec: CohortSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-ROI template thickness (mm) and vulnerability multipliers."""
    rng = substream(spec.template_seed, "roi-template")
    template = rng.uniform(*spec.template_range, size=N_ROI)
    lo, hi = spec.vulnerability_range
    mid = lo + 2.0 * (hi - lo) / 3.0
    vuln = np.where(TEMPORAL_MASK, rng.uniform(mid, hi, size=N_ROI), rng.uniform(lo, mid, size=N_ROI))
    return template, vuln


def _log_decay(rate: float, vuln: np.ndarray) -> np.ndarray:
    return np.log1p(-np.minimum(rate * vuln, 0.5))


def generate_cohort(spec: CohortSpec | None = None) -> Cohort:
    """Draw a synthetic cohort; training subjects come first, then the test subjects.

    Test subjects have all five visits. Among test MCI subjects the most
    severe (by a noisy severity score) convert to AD, and among CN the most
    severe convert to MCI, in the numbers needed to reach ``test_m36_counts``.
    """
    spec = spec or CohortSpec()
    spec.validate()
    template, vuln = roi_template(spec)
    rng = substream(spec.seed, "cohort")
    trans = spec.transitions()

    def group_list(counts):
        groups = [g for g in DIAGNOSES for _ in range(counts.get(g, 0))]
        rng.shuffle(groups)
        return groups

    train_groups = group_list(spec.train_counts)
    test_groups = group_list(spec.test_counts)

    draws = []
    for g in train_groups + test_groups:
        draws.append({
            "group": g,
            "sex": int(rng.integers(0, 2)),
            "age": float(np.clip(rng.normal(spec.age_mean[g], spec.age_std), 55.0, 90.0)),
            "severity": float(rng.normal()),
            "offset": float(rng.normal(0.0, spec.subject_offset_std)),
            "roi_var": rng.normal(0.0, spec.roi_variation_std, size=N_ROI),
            "conv_score": float(rng.normal(0.0, 0.5)),
            "conv_month": int(rng.choice(VISIT_MONTHS[1:])),
            "noise": rng.standard_normal((len(VISIT_MONTHS), N_ROI)),
            "keep": rng.random(len(VISIT_MONTHS)),
        })

    n_train = len(train_groups)
    converts: dict[int, str] = {}
    test_idx = range(n_train, len(draws))
    for src, dst, n in (("MCI", "AD", trans["MCI->AD"]), ("CN", "MCI", trans["CN->MCI"])):
        pool = [i for i in test_idx if draws[i]["group"] == src]
        pool.sort(key=lambda i: -(draws[i]["severity"] + draws[i]["conv_score"]))
        for i in pool[:n]:
            converts[i] = dst

    subjects = []
    width = len(str(len(draws)))
    for i, d in enumerate(draws):
        g = d["group"]
        z = d["severity"]
        rel = (1.0 + d["offset"] + d["roi_var"]
               - spec.group_baseline_deficit.get(g, 0.0) * vuln
               - spec.severity_baseline_deficit * z * vuln)
        base_true = np.clip(template * rel, 1.0, 5.0)
        gain = max(0.0, 1.0 + spec.severity_rate_gain * z)
        new_g = converts.get(i)
        cm = d["conv_month"] if new_g else math.inf
        log_r1 = _log_decay(spec.atrophy_rates[g] * gain, vuln)
        log_r2 = _log_decay(spec.atrophy_rates[new_g] * gain, vuln) if new_g else log_r1
        visits, dx = {}, {}
        for j, month in enumerate(VISIT_MONTHS):
            if i < n_train and month in spec.missingness and d["keep"][j] < spec.missingness[month]:
                continue
            t1 = min(month, cm) / 12.0
            t2 = max(month - cm, 0.0) / 12.0
            val = base_true * np.exp(t1 * log_r1 + t2 * log_r2)
            if spec.noise_std > 0:
                val = val + spec.noise_std * d["noise"][j]
            visits[month] = np.clip(val, 0.05, 5.95)
            dx[month] = new_g if new_g and month >= cm else g
        subjects.append(Subject(f"S{i + 1:0{width}d}", d["sex"], d["age"], dx, visits))
    return Cohort(subjects)


def split_cohort(cohort: Cohort, spec: CohortSpec | None = None) -> tuple[Cohort, Cohort]:
    """Allocate complete-data subjects to the test split, the rest to training.

    Test subjects are taken from the end of the subject list, matching the
    baseline composition in ``spec.test_counts``; for a generated cohort this
    recovers exactly the generator's test subjects.
    """
    spec = spec or CohortSpec()
    need = {g: spec.test_counts.get(g, 0) for g in DIAGNOSES}
    chosen = set()
    for idx in range(len(cohort.subjects) - 1, -1, -1):
        s = cohort.subjects[idx]
        g = s.dx_by_visit[0]
        if need.get(g, 0) > 0 and s.is_complete():
            chosen.add(idx)
            need[g] -= 1
    if any(v > 0 for v in need.values()):
        raise CohortError(f"not enough complete subjects for the test split; still missing {need}")
    train = [s for i, s in enumerate(cohort.subjects) if i not in chosen]
    test = [s for i, s in enumerate(cohort.subjects) if i in chosen]
    return Cohort(train), Cohort(test)


# ---------------------------------------------------------------- pairs and stats

PAIR_POLICIES = ("all_pairs", "consecutive", "baseline")


def visit_pairs(subject: Subject, policy: str = "all_pairs") -> list[tuple[int, int]]:
    """Ordered (source, target) month pairs for one subject."""
    months = subject.months
    if policy == "all_pairs":
        return [(a, b) for i, a in enumerate(months) for b in months[i + 1:]]
    if policy == "consecutive":
        return list(zip(months[:-1], months[1:]))
    if policy == "baseline":
        return [(months[0], b) for b in months[1:]]
    raise ValueError(f"unknown pairing policy {policy!r}; expected one of {PAIR_POLICIES}")


@dataclass
class NormalizationStats:
    level_mean: np.ndarray
    level_std: np.ndarray
    resid_mean: np.ndarray
    resid_std: np.ndarray
    age_mean: float
    age_std: float
    delta_scale: float = 36.0

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else float(v))
                      for k, v in d.items()})


def compute_normalization(train: Cohort, policy: str = "all_pairs") -> NormalizationStats:
    """Per-ROI level and residual statistics from the training split only."""
    if not len(train):
        raise CohortError("cannot compute normalization on an empty training split")
    levels = np.array([v for s in train for v in (s.visits[m] for m in s.months)])
    resid = np.array([s.visits[b] - s.visits[a] for s in train for a, b in visit_pairs(s, policy)])
    ages = np.array([s.age_bl for s in train])
    if len(resid) < 2:
        raise CohortError("training split yields fewer than two visit pairs")
    level_std, resid_std = levels.std(axis=0), resid.std(axis=0)
    for name, sd in (("level", level_std), ("residual", resid_std)):
        bad = np.flatnonzero(sd <= 0)
        if bad.size:
            raise CohortError(f"zero {name} variance in {ROI_COLUMNS[bad[0]]} (degenerate cohort)")
    age_std = float(ages.std()) if len(ages) > 1 and ages.std() > 0 else 1.0
    return NormalizationStats(levels.mean(axis=0), level_std, resid.mean(axis=0), resid_std,
                              float(ages.mean()), age_std)


# ---------------------------------------------------------------- CSV I/O

def write_cohort_csv(cohort: Cohort, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in cohort:
            for m in s.months:
                w.writerow([s.id, m, s.sex, repr(float(s.age_bl)), s.dx_by_visit[m]]
                           + [repr(float(v)) for v in s.visits[m]])


def load_cohort_csv(path) -> Cohort:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortError(f"{path}: empty file") from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise CohortError(f"{path}: missing column {missing[0]!r}")
        col = {c: header.index(c) for c in CSV_HEADER}
        roi_idx = [col[c] for c in ROI_COLUMNS]
        order: list[str] = []
        rows: dict[str, dict] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid = row[col["subject_id"]]
                month = int(row[col["visit_month"]])
                sex = int(row[col["sex"]])
                age = float(row[col["age_bl"]])
                dx = row[col["dx"]]
                vals = np.array([float(row[i]) for i in roi_idx])
            except (ValueError, IndexError) as exc:
                raise CohortError(f"{path}:{lineno}: malformed row ({exc})") from None
            if dx not in DIAGNOSES:
                raise CohortError(f"{path}:{lineno}: dx {dx!r} not in {DIAGNOSES}")
            if sex not in (0, 1):
                raise CohortError(f"{path}:{lineno}: sex must be 0 or 1")
            if not np.all((vals > 0) & (vals < 6)):
                raise CohortError(f"{path}:{lineno}: thickness values must lie in (0, 6) mm")
            rec = rows.get(sid)
            if rec is None:
                rec = rows[sid] = {"sex": sex, "age": age, "visits": {}, "dx": {}, "line": lineno}
                order.append(sid)
            if month in rec["visits"]:
                raise CohortError(f"{path}:{lineno}: duplicate row for subject {sid!r} month {month}")
            rec["visits"][month] = vals
            rec["dx"][month] = dx
    subjects = []
    for sid in order:
        rec = rows[sid]
        if 0 not in rec["visits"]:
            raise CohortError(f"{path}:{rec['line']}: subject {sid!r} has no month-0 row; "
                              "every participant needs complete baseline data")
        months = sorted(rec["visits"])
        subjects.append(Subject(sid, rec["sex"], rec["age"], {m: rec["dx"][m] for m in months},
                                {m: rec["visits"][m] for m in months}))
    return Cohort(subjects)


def write_roi_names(path) -> None:
    Path(path).write_text(json.dumps(list(ROI_NAMES), indent=1) + "\n", encoding="utf-8")
