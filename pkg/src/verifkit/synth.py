"""Synthetic data with known ground truth.

Two generators: embeddings drawn from the two-covariance generative model
(speaker factor plus residual), and frame-level corpora where each speaker
is an archetype vector of configurable norm rho buried in unit Gaussian
noise. rho is therefore the between/within spread ratio; rho = 0 carries
no speaker signal at all.

All randomness comes from numpy's Generator (ziggurat Gaussians), seeded
from the config, so a dataset is a pure function of its config. Bitwise
reproducibility is per build of numpy; it is not promised across math
library versions.
"""

import os
from dataclasses import dataclass

import numpy as np

from .core import (
    Gender,
    Grade,
    Manifest,
    RecordingRecord,
    Section,
    SpeakerRecord,
    write_manifest,
    write_matrix,
)
from .errors import DataError
from .plda import _check_covariances
from .validation import check_positive

MANIFEST_NAME = "corpus.manifest"


def random_psd(dim, condition=10.0, seed=0):
    """Random symmetric PSD matrix with the given condition number: a
    random orthogonal basis with eigenvalues spaced from 1 down to
    1/condition."""
    if condition < 1.0:
        raise DataError(f"condition number must be >= 1, got {condition:g}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eigs = np.linspace(1.0, 1.0 / condition, dim)
    return (q * eigs) @ q.T


def _as_covariance(value, dim, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise DataError(f"{name} diagonal has length {arr.shape[0]}, expected {dim}")
        return np.diag(arr)
    if arr.shape != (dim, dim):
        raise DataError(f"{name} must be {dim}x{dim}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SynthPldaConfig:
    dim: int
    num_speakers: int
    embeddings_per_speaker: int
    mean: object = 0.0
    between: object = 1.0
    within: object = 1.0
    seed: int = 0

    def __post_init__(self):
        check_positive(self.dim, "dim")
        check_positive(self.num_speakers, "num_speakers")
        check_positive(self.embeddings_per_speaker, "embeddings_per_speaker")
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.ndim == 0:
            mean = np.full(self.dim, float(mean))
        if mean.shape != (self.dim,):
            raise DataError(f"mean must have dimension {self.dim}, got {mean.shape}")
        between = _as_covariance(self.between, self.dim, "between")
        within = _as_covariance(self.within, self.dim, "within")
        _check_covariances(between, within)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "between", between)
        object.__setattr__(self, "within", within)


def _psd_sqrt(cov):
    eigs, basis = np.linalg.eigh((cov + cov.T) / 2.0)
    return basis * np.sqrt(np.clip(eigs, 0.0, None))


def sample_plda(cfg):
    """Draw (embeddings, speaker labels) from the two-covariance model:
    one speaker factor from the between covariance, plus an independent
    residual from the within covariance per embedding."""
    rng = np.random.default_rng(cfg.seed)
    root_b = _psd_sqrt(cfg.between)
    root_w = _psd_sqrt(cfg.within)
    n = cfg.embeddings_per_speaker
    rows = []
    labels = []
    for s in range(cfg.num_speakers):
        speaker_id = f"spk{s:04d}"
        y = root_b @ rng.standard_normal(cfg.dim)
        z = rng.standard_normal((n, cfg.dim)) @ root_w.T
        rows.append(cfg.mean + y + z)
        labels.extend([speaker_id] * n)
    return np.concatenate(rows), labels


DEFAULT_SECTION_COUNTS = {
    Section.A: 1,
    Section.B: 1,
    Section.C: 1,
    Section.D: 1,
    Section.E: 1,
}
DEFAULT_GENDER_POOL = (Gender.FEMALE, Gender.MALE)
DEFAULT_L1_POOL = ("Thai", "Spanish", "French")
DEFAULT_GRADE_POOL = (Grade.A1, Grade.A2, Grade.B1, Grade.B2, Grade.C1, Grade.C2)


@dataclass(frozen=True)
class SynthCorpusConfig:
    num_speakers: int
    frames_per_recording: int = 50
    feature_dim: int = 10
    rho: float = 4.0
    section_counts: object = None
    domain_shift: object = None
    gender_pool: tuple = DEFAULT_GENDER_POOL
    l1_pool: tuple = DEFAULT_L1_POOL
    grade_pool: tuple = DEFAULT_GRADE_POOL
    seed: int = 0

    def __post_init__(self):
        check_positive(self.num_speakers, "num_speakers")
        check_positive(self.frames_per_recording, "frames_per_recording")
        check_positive(self.feature_dim, "feature_dim")
        if not np.isfinite(self.rho) or self.rho < 0.0:
            raise DataError(f"rho must be finite and >= 0, got {self.rho!r}")
        counts = dict(DEFAULT_SECTION_COUNTS if self.section_counts is None else self.section_counts)
        for section in Section:
            count = counts.get(section, 0)
            if not isinstance(count, int) or count < 1:
                raise DataError(f"section {section.value} needs a positive count")
            counts[section] = count
        object.__setattr__(self, "section_counts", counts)
        if self.domain_shift is not None:
            shift = np.asarray(self.domain_shift, dtype=np.float64)
            if shift.shape != (self.feature_dim,):
                raise DataError(
                    f"domain shift must have dimension {self.feature_dim}, got {shift.shape}"
                )
            object.__setattr__(self, "domain_shift", shift)
        for name, pool in (
            ("gender_pool", self.gender_pool),
            ("l1_pool", self.l1_pool),
            ("grade_pool", self.grade_pool),
        ):
            if len(pool) < 1:
                raise DataError(f"{name} must not be empty")
        object.__setattr__(self, "gender_pool", tuple(self.gender_pool))
        object.__setattr__(self, "l1_pool", tuple(self.l1_pool))
        object.__setattr__(self, "grade_pool", tuple(self.grade_pool))


def sample_corpus(cfg, out_dir):
    """Write one feature file per recording plus a manifest; returns the
    manifest.

    Per speaker: a random archetype scaled to norm rho, metadata assigned
    round-robin from the pools, and every frame drawn as archetype plus
    unit Gaussian noise (plus the domain shift when configured). With the
    same seed, a shifted corpus is the unshifted one moved by the shift.
    """
    rng = np.random.default_rng(cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    speakers = []
    recordings = []
    for s in range(cfg.num_speakers):
        speaker_id = f"spk{s:04d}"
        speakers.append(
            SpeakerRecord(
                speaker_id=speaker_id,
                gender=cfg.gender_pool[s % len(cfg.gender_pool)],
                l1=cfg.l1_pool[s % len(cfg.l1_pool)],
                grade=cfg.grade_pool[s % len(cfg.grade_pool)],
            )
        )
        direction = rng.standard_normal(cfg.feature_dim)
        archetype = cfg.rho * direction / np.linalg.norm(direction)
        for section in Section:
            for k in range(cfg.section_counts[section]):
                recording_id = f"{speaker_id}-{section.value.lower()}{k}"
                frames = archetype + rng.standard_normal(
                    (cfg.frames_per_recording, cfg.feature_dim)
                )
                if cfg.domain_shift is not None:
                    frames = frames + cfg.domain_shift
                write_matrix(os.path.join(out_dir, f"{recording_id}.svm"), frames)
                recordings.append(
                    RecordingRecord(
                        recording_id=recording_id,
                        speaker_id=speaker_id,
                        section=section,
                        source_path=f"{recording_id}.svm",
                    )
                )
    manifest = Manifest(speakers=tuple(speakers), recordings=tuple(recordings))
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), manifest)
    return manifest
