"""Trial-list generation under speaker-attribute restrictions.

A trial pairs an enrolled reference speaker with a verification recording
(sections C/D/E). Targets pair a speaker with their own recordings and
are always emitted. Nontargets pair a speaker with another speaker's
recordings, filtered by the enabled restriction flags: same gender, same
first language, same merged grade, or strictly higher merged grade (from
C when the reference speaker is already C).

Generation streams in a fixed order, (enrol_speaker_id,
verify_recording_id), in memory proportional to the manifest, never to
the number of trials. Counting uses group arithmetic instead of
enumeration so hundred-million-trial configurations stay cheap.
"""

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingSet, MergedGrade
from .errors import DataError, FormatError
from .plda import length_normalize

TARGET = "target"
NONTARGET = "nontarget"

_FLAG_TOKENS = {
    "gender": "gender",
    "l1": "l1",
    "grade": "grade_equal",
    "grade-equal": "grade_equal",
    "grade-higher": "grade_higher",
    ">grade": "grade_higher",
}


@dataclass(frozen=True)
class RestrictionSet:
    gender: bool = False
    l1: bool = False
    grade_equal: bool = False
    grade_higher: bool = False

    def __post_init__(self):
        if self.grade_equal and self.grade_higher:
            raise DataError("grade_equal and grade_higher are mutually exclusive")

    @classmethod
    def parse(cls, text):
        """Parse a comma-separated flag list like "gender,l1,grade-higher"."""
        flags = {}
        for token in str(text).split(","):
            token = token.strip().lower()
            if not token:
                continue
            if token not in _FLAG_TOKENS:
                raise DataError(f"unknown restriction {token!r}")
            flags[_FLAG_TOKENS[token]] = True
        return cls(**flags)

    def tokens(self):
        out = []
        if self.gender:
            out.append("gender")
        if self.l1:
            out.append("l1")
        if self.grade_equal:
            out.append("grade")
        if self.grade_higher:
            out.append("grade-higher")
        return out


@dataclass(frozen=True)
class Trial:
    enrol_speaker_id: str
    verify_recording_id: str
    label: str

    def __post_init__(self):
        if self.label not in (TARGET, NONTARGET):
            raise DataError(f"bad trial label {self.label!r}")


def _impostor_allowed(ref, imp, restrictions):
    if restrictions.gender and imp.gender != ref.gender:
        return False
    if restrictions.l1 and imp.l1 != ref.l1:
        return False
    if restrictions.grade_equal and imp.grade.merged != ref.grade.merged:
        return False
    if restrictions.grade_higher:
        if ref.grade.merged < MergedGrade.C:
            return imp.grade.merged > ref.grade.merged
        return imp.grade.merged == MergedGrade.C
    return True


def generate_trials(manifest, restrictions=RestrictionSet()):
    """Yield trials ordered by (enrol_speaker_id, verify_recording_id)."""
    speakers = sorted(manifest.speakers, key=lambda s: s.speaker_id)
    verify = sorted(manifest.verification_recordings(), key=lambda r: r.recording_id)
    owners = {r.recording_id: r.speaker_id for r in verify}
    by_id = manifest.speakers_by_id
    for ref in speakers:
        for rec in verify:
            owner = owners[rec.recording_id]
            if owner == ref.speaker_id:
                yield Trial(ref.speaker_id, rec.recording_id, TARGET)
            elif _impostor_allowed(ref, by_id[owner], restrictions):
                yield Trial(ref.speaker_id, rec.recording_id, NONTARGET)


def count_trials(manifest, restrictions=RestrictionSet()):
    """(targets, nontargets) without enumerating; equals the stream length."""
    verify = manifest.verification_recordings()
    targets = len(verify)
    per_speaker = {}
    for rec in verify:
        per_speaker[rec.speaker_id] = per_speaker.get(rec.speaker_id, 0) + 1
    group_counts = {}
    for spk in manifest.speakers:
        key = (spk.gender, spk.l1, spk.grade.merged)
        group_counts[key] = group_counts.get(key, 0) + per_speaker.get(spk.speaker_id, 0)
    nontargets = 0
    group_reps = {}
    for spk in manifest.speakers:
        key = (spk.gender, spk.l1, spk.grade.merged)
        group_reps.setdefault(key, spk)
    for ref in manifest.speakers:
        allowed = 0
        for key, count in group_counts.items():
            if _impostor_allowed(ref, group_reps[key], restrictions):
                allowed += count
        ref_key = (ref.gender, ref.l1, ref.grade.merged)
        if _impostor_allowed(ref, group_reps[ref_key], restrictions):
            allowed -= per_speaker.get(ref.speaker_id, 0)
        nontargets += allowed
    return targets, nontargets


def build_enrolments(manifest, embeddings):
    """Per-speaker enrolment embedding: mean of section-A/B recording
    embeddings, length-normalized.

    Speakers with no embedded A/B recording are excluded; returns
    (EmbeddingSet keyed by speaker_id, excluded speaker ids).
    """
    ids = []
    vectors = []
    excluded = []
    for spk in sorted(manifest.speakers, key=lambda s: s.speaker_id):
        rows = [
            embeddings.vector(rec.recording_id)
            for rec in manifest.enrolment_recordings(spk.speaker_id)
            if rec.recording_id in embeddings.index
        ]
        if not rows:
            excluded.append(spk.speaker_id)
            continue
        ids.append(spk.speaker_id)
        vectors.append(length_normalize(np.mean(rows, axis=0)))
    if not ids:
        raise DataError("no speaker has an embedded enrolment recording")
    return EmbeddingSet(ids=tuple(ids), vectors=np.stack(vectors)), excluded


def format_trial(trial):
    return f"{trial.enrol_speaker_id}\t{trial.verify_recording_id}\t{trial.label}"


def parse_trial_line(line, lineno=None):
    fields = line.split("\t")
    if len(fields) != 3:
        raise FormatError(f"trial line {lineno}: expected 3 fields, got {len(fields)}")
    try:
        return Trial(*fields)
    except DataError as exc:
        raise FormatError(f"trial line {lineno}: {exc}") from None


def write_trials(path, trials):
    """Write a trial stream; returns the number of lines written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trial in trials:
            fh.write(format_trial(trial))
            fh.write("\n")
            n += 1
    return n


def read_trials(path):
    """Yield trials from a file, streaming."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            yield parse_trial_line(line, lineno)


def write_scores(path, trials, scores):
    """Trial lines plus a tab and the score in shortest round-trip decimal."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trial, score in zip(trials, scores):
            fh.write(format_trial(trial))
            fh.write(f"\t{float(score)!r}\n")
            n += 1
    return n


def read_scores(path):
    """Read a score file into (list of Trial, float64 score array)."""
    trials = []
    scores = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(f"score line {lineno}: expected 4 fields, got {len(fields)}")
            trials.append(parse_trial_line("\t".join(fields[:3]), lineno))
            try:
                scores.append(float(fields[3]))
            except ValueError:
                raise FormatError(f"score line {lineno}: bad score {fields[3]!r}") from None
    return trials, np.array(scores, dtype=np.float64)
