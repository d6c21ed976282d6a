"""Detection metrics: EER, DET curves, false-acceptance breakdowns, fusion.

Conventions, fixed once and used everywhere: a trial is accepted when its
score is greater than or equal to the threshold; the equal error rate is
found by linear interpolation between the two adjacent DET points where
FA minus MISS changes sign.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Gender, Manifest
from .errors import DataError
from .trials import NONTARGET, TARGET

GRADE_ATTRIBUTE = "grade"
L1_ATTRIBUTE = "l1"


def _speaker_attribute(speaker, attribute):
    if attribute == GRADE_ATTRIBUTE:
        return speaker.grade.merged.token
    if attribute == L1_ATTRIBUTE:
        return speaker.l1
    raise DataError(f"unknown speaker attribute {attribute!r}")


def _attribute_values(manifest, attribute):
    values = {_speaker_attribute(spk, attribute) for spk in manifest.speakers}
    if attribute == GRADE_ATTRIBUTE:
        order = ["A1", "A2", "B1", "B2", "C"]
        return [v for v in order if v in values]
    return sorted(values)


@dataclass(frozen=True)
class ScoreSet:
    """Parallel trial and score arrays, one score per trial."""

    trials: tuple
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != len(self.trials):
            raise DataError(
                f"{len(self.trials)} trials with score array of shape {arr.shape}"
            )
        if arr.size and not np.isfinite(arr).all():
            raise DataError("scores must be finite")
        object.__setattr__(self, "scores", arr)

    def __len__(self):
        return len(self.trials)

    def target_scores(self):
        mask = np.array([t.label == TARGET for t in self.trials], dtype=bool)
        return self.scores[mask]

    def nontarget_scores(self):
        mask = np.array([t.label == NONTARGET for t in self.trials], dtype=bool)
        return self.scores[mask]


@dataclass(frozen=True)
class DetCurve:
    """(threshold, fa_rate, miss_rate) triples, thresholds ascending."""

    thresholds: np.ndarray
    fa: np.ndarray
    miss: np.ndarray

    def __post_init__(self):
        thr = np.asarray(self.thresholds, dtype=np.float64)
        fa = np.asarray(self.fa, dtype=np.float64)
        miss = np.asarray(self.miss, dtype=np.float64)
        if not (thr.shape == fa.shape == miss.shape) or thr.ndim != 1 or thr.size < 2:
            raise DataError("curve needs matching 1-D arrays with at least 2 points")
        if np.any(np.diff(thr) <= 0):
            raise DataError("thresholds must be strictly increasing")
        for name, rates in (("fa", fa), ("miss", miss)):
            if np.any(rates < 0.0) or np.any(rates > 1.0):
                raise DataError(f"{name} rates must lie in [0, 1]")
        if np.any(np.diff(fa) > 0):
            raise DataError("fa must be non-increasing in the threshold")
        if np.any(np.diff(miss) < 0):
            raise DataError("miss must be non-decreasing in the threshold")
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "fa", fa)
        object.__setattr__(self, "miss", miss)

    def __len__(self):
        return len(self.thresholds)

    def points(self):
        return list(zip(self.thresholds, self.fa, self.miss))


def compute_det(scores):
    """DET curve with one threshold per distinct score plus a sentinel
    above the maximum, so the endpoints (fa, miss) = (1, 0) and (0, 1)
    are always present. Acceptance is score >= threshold.
    """
    target = np.sort(scores.target_scores())
    nontarget = np.sort(scores.nontarget_scores())
    if target.size == 0 or nontarget.size == 0:
        raise DataError("need at least one target and one nontarget score")
    distinct = np.unique(scores.scores)
    thresholds = np.append(distinct, distinct[-1] + 1.0)
    fa = (nontarget.size - np.searchsorted(nontarget, thresholds, side="left"))
    miss = np.searchsorted(target, thresholds, side="left")
    return DetCurve(
        thresholds=thresholds,
        fa=fa / nontarget.size,
        miss=miss / target.size,
    )


def compute_eer(scores):
    """(eer, threshold) by linear interpolation where FA - MISS crosses zero."""
    curve = compute_det(scores)
    diff = curve.fa - curve.miss
    above = np.flatnonzero(diff >= 0.0)
    i = above[-1]
    if diff[i] == 0.0:
        return float(curve.fa[i]), float(curve.thresholds[i])
    t = diff[i] / (diff[i] - diff[i + 1])
    eer = curve.fa[i] + t * (curve.fa[i + 1] - curve.fa[i])
    threshold = curve.thresholds[i] + t * (curve.thresholds[i + 1] - curve.thresholds[i])
    return float(eer), float(threshold)


@dataclass(frozen=True)
class BreakdownTable:
    """Rows: reference-speaker attribute value. Columns: impostor value.

    percentages[i, j] is the share of row i's false acceptances whose
    impostor carries column value j; rows with no false acceptances hold
    zeros and appear in empty_rows.
    """

    attribute: str
    row_values: tuple
    col_values: tuple
    percentages: np.ndarray
    row_fa_counts: tuple
    empty_rows: tuple = field(init=False)

    def __post_init__(self):
        pct = np.asarray(self.percentages, dtype=np.float64)
        if pct.shape != (len(self.row_values), len(self.col_values)):
            raise DataError("percentage matrix shape does not match labels")
        object.__setattr__(self, "percentages", pct)
        object.__setattr__(
            self,
            "empty_rows",
            tuple(v for v, n in zip(self.row_values, self.row_fa_counts) if n == 0),
        )

    @property
    def total_fa(self):
        return sum(self.row_fa_counts)


def fa_breakdown(scores, manifest, attribute, threshold):
    """Cross-tabulate false acceptances at a threshold by speaker attribute."""
    if not np.isfinite(threshold):
        raise DataError("threshold must be finite")
    values = _attribute_values(manifest, attribute)
    index = {v: i for i, v in enumerate(values)}
    speakers = manifest.speakers_by_id
    recordings = manifest.recordings_by_id
    counts = np.zeros((len(values), len(values)), dtype=np.int64)
    for trial, score in zip(scores.trials, scores.scores):
        if trial.label != NONTARGET or score < threshold:
            continue
        if trial.enrol_speaker_id not in speakers:
            raise DataError(f"speaker {trial.enrol_speaker_id!r} not in manifest")
        if trial.verify_recording_id not in recordings:
            raise DataError(f"recording {trial.verify_recording_id!r} not in manifest")
        ref = speakers[trial.enrol_speaker_id]
        imp = speakers[recordings[trial.verify_recording_id].speaker_id]
        counts[index[_speaker_attribute(ref, attribute)],
               index[_speaker_attribute(imp, attribute)]] += 1
    row_totals = counts.sum(axis=1)
    with np.errstate(invalid="ignore"):
        pct = np.where(
            row_totals[:, None] > 0, 100.0 * counts / row_totals[:, None], 0.0
        )
    return BreakdownTable(
        attribute=attribute,
        row_values=tuple(values),
        col_values=tuple(values),
        percentages=pct,
        row_fa_counts=tuple(int(n) for n in row_totals),
    )


def fuse(scores_a, scores_b, weight_a=0.7, weight_b=0.3):
    """Per-trial linear combination of two systems over one trial list."""
    if not (np.isfinite(weight_a) and np.isfinite(weight_b)):
        raise DataError("fusion weights must be finite")
    if len(scores_a) != len(scores_b):
        raise DataError(
            f"trial lists differ in length: {len(scores_a)} vs {len(scores_b)}"
        )
    for i, (ta, tb) in enumerate(zip(scores_a.trials, scores_b.trials)):
        if ta != tb:
            raise DataError(f"trial lists differ at line {i + 1}: {ta} vs {tb}")
    return ScoreSet(
        trials=scores_a.trials,
        scores=weight_a * scores_a.scores + weight_b * scores_b.scores,
    )


def stratified_sample(manifest, group_attribute, n_per_group=200, seed=0):
    """Seeded per-group speaker sample, as gender-balanced as the group allows.

    Each group contributes n_per_group speakers, half per gender; when one
    gender runs short the other covers the difference, and a group smaller
    than n_per_group is taken whole with a warning.
    """
    values = _attribute_values(manifest, group_attribute)
    rng = np.random.default_rng(seed)
    chosen = []
    for value in values:
        members = sorted(
            (s for s in manifest.speakers if _speaker_attribute(s, group_attribute) == value),
            key=lambda s: s.speaker_id,
        )
        if len(members) <= n_per_group:
            if len(members) < n_per_group:
                warnings.warn(
                    f"group {value!r} has {len(members)} speakers, "
                    f"fewer than the requested {n_per_group}; taking all",
                    stacklevel=2,
                )
            chosen.extend(s.speaker_id for s in members)
            continue
        pools = {
            g: [s.speaker_id for s in members if s.gender is g]
            for g in (Gender.FEMALE, Gender.MALE)
        }
        for pool in pools.values():
            order = rng.permutation(len(pool))
            pool[:] = [pool[i] for i in order]
        half = n_per_group // 2
        want = {Gender.FEMALE: half, Gender.MALE: n_per_group - half}
        take = {g: min(want[g], len(pools[g])) for g in want}
        shortfall = n_per_group - sum(take.values())
        for g in want:
            extra = min(shortfall, len(pools[g]) - take[g])
            take[g] += extra
            shortfall -= extra
        for g in want:
            chosen.extend(pools[g][: take[g]])
    return manifest.subset(chosen)


def write_det(path, curve):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for threshold, fa, miss in curve.points():
            fh.write(f"{float(threshold)!r}\t{float(fa)!r}\t{float(miss)!r}\n")


def read_det(path):
    rows = np.loadtxt(path, delimiter="\t", dtype=np.float64, ndmin=2)
    return DetCurve(thresholds=rows[:, 0], fa=rows[:, 1], miss=rows[:, 2])


def format_breakdown(table):
    """Tab-separated matrix, header row and column of attribute values.

    Cells are row percentages to two decimals; rows without any false
    acceptance show "-" so a zero total cannot read as a measurement.
    """
    lines = ["\t".join([table.attribute, *table.col_values])]
    for i, value in enumerate(table.row_values):
        if table.row_fa_counts[i] == 0:
            cells = ["-"] * len(table.col_values)
        else:
            cells = [f"{p:.2f}" for p in table.percentages[i]]
        lines.append("\t".join([value, *cells]))
    return "\n".join(lines) + "\n"


def write_breakdown(path, table):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_breakdown(table))
