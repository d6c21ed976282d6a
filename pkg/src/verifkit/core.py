"""Domain types, metadata manifests, and bit-exact binary file formats.

Everything here is immutable after construction and safe to share across
threads. The on-disk formats are:

* manifest: UTF-8 tab-separated text, LF line endings, ``#`` comments;
  ``SPK`` lines carry speaker metadata, ``REC`` lines carry recordings.
* matrix file: magic ``SVM1``, little-endian uint32 rows/cols, float32
  row-major payload.
* embedding file: magic ``SVE1``, same layout, followed by a UTF-8 id
  table (uint32 length prefix per string, one per row).
"""

import enum
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import FormatError, ManifestError


class Gender(enum.Enum):
    MALE = "M"
    FEMALE = "F"

    @classmethod
    def parse(cls, token):
        t = token.strip().upper()
        if t == "M":
            return cls.MALE
        if t == "F":
            return cls.FEMALE
        raise ValueError(f"unknown gender token {token!r}")


class MergedGrade(enum.IntEnum):
    """Five-level proficiency scale with C1 and C2 merged into C.

    IntEnum values give the total order A1 < A2 < B1 < B2 < C.
    """

    A1 = 0
    A2 = 1
    B1 = 2
    B2 = 3
    C = 4

    @property
    def token(self):
        return self.name


class Grade(enum.Enum):
    """Six-level proficiency grade as stored in manifests."""

    A1 = "A1"
    A2 = "A2"
    B1 = "B1"
    B2 = "B2"
    C1 = "C1"
    C2 = "C2"

    @classmethod
    def parse(cls, token):
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown grade token {token!r}") from None

    @property
    def merged(self):
        if self in (Grade.C1, Grade.C2):
            return MergedGrade.C
        return MergedGrade[self.value]


class Section(enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"

    @classmethod
    def parse(cls, token):
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown section token {token!r}") from None


ENROLMENT_SECTIONS = frozenset({Section.A, Section.B})
VERIFICATION_SECTIONS = frozenset({Section.C, Section.D, Section.E})


def normalize_l1(value):
    """Trim whitespace from a first-language label; must stay non-empty."""
    l1 = str(value).strip()
    if not l1:
        raise ValueError("L1 label is empty")
    if "\t" in l1 or "\n" in l1:
        raise ValueError(f"L1 label contains tab/newline: {value!r}")
    return l1


def _check_id(value, what):
    ident = str(value)
    if not ident or ident != ident.strip() or "\t" in ident or "\n" in ident:
        raise ValueError(f"bad {what} id {value!r}")
    return ident


@dataclass(frozen=True)
class SpeakerRecord:
    speaker_id: str
    gender: Gender
    l1: str
    grade: Grade

    def __post_init__(self):
        _check_id(self.speaker_id, "speaker")
        object.__setattr__(self, "l1", normalize_l1(self.l1))


@dataclass(frozen=True)
class RecordingRecord:
    recording_id: str
    speaker_id: str
    section: Section
    source_path: str

    def __post_init__(self):
        _check_id(self.recording_id, "recording")
        _check_id(self.speaker_id, "speaker")
        if "\t" in self.source_path or "\n" in self.source_path:
            raise ValueError(f"bad source path {self.source_path!r}")


@dataclass(frozen=True)
class Manifest:
    """Validated collection of speakers and their recordings."""

    speakers: tuple
    recordings: tuple

    def __post_init__(self):
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "recordings", tuple(self.recordings))
        seen_spk = set()
        for spk in self.speakers:
            if spk.speaker_id in seen_spk:
                raise ManifestError(f"duplicate speaker id {spk.speaker_id!r}")
            seen_spk.add(spk.speaker_id)
        seen_rec = set()
        for rec in self.recordings:
            if rec.recording_id in seen_rec:
                raise ManifestError(f"duplicate recording id {rec.recording_id!r}")
            seen_rec.add(rec.recording_id)
            if rec.speaker_id not in seen_spk:
                raise ManifestError(
                    f"recording {rec.recording_id!r} references unknown speaker {rec.speaker_id!r}"
                )

    @cached_property
    def speakers_by_id(self):
        return {spk.speaker_id: spk for spk in self.speakers}

    @cached_property
    def recordings_by_id(self):
        return {rec.recording_id: rec for rec in self.recordings}

    @cached_property
    def recordings_by_speaker(self):
        by_spk = {spk.speaker_id: [] for spk in self.speakers}
        for rec in self.recordings:
            by_spk[rec.speaker_id].append(rec)
        return {k: tuple(v) for k, v in by_spk.items()}

    def enrolment_recordings(self, speaker_id):
        """Recordings from sections A/B, the enrolment material."""
        return tuple(
            r for r in self.recordings_by_speaker[speaker_id] if r.section in ENROLMENT_SECTIONS
        )

    def verification_recordings(self, speaker_id=None):
        """Recordings from sections C/D/E; all speakers when id is None."""
        if speaker_id is None:
            return tuple(r for r in self.recordings if r.section in VERIFICATION_SECTIONS)
        return tuple(
            r for r in self.recordings_by_speaker[speaker_id] if r.section in VERIFICATION_SECTIONS
        )

    def subset(self, speaker_ids):
        """New manifest restricted to the given speakers, order preserved."""
        keep = set(speaker_ids)
        return Manifest(
            speakers=tuple(s for s in self.speakers if s.speaker_id in keep),
            recordings=tuple(r for r in self.recordings if r.speaker_id in keep),
        )


_SPK_TAG = "SPK"
_REC_TAG = "REC"


def parse_manifest(text):
    """Parse manifest text into a validated Manifest.

    Raises ManifestError with the offending 1-based line number for
    malformed lines, duplicate ids, unknown grade/section tokens, and
    dangling speaker references.
    """
    speakers = []
    recordings = []
    speaker_ids = set()
    recording_ids = set()
    pending_recs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        tag = fields[0]
        if tag == _SPK_TAG:
            if len(fields) != 5:
                raise ManifestError(
                    f"speaker line has {len(fields)} fields, expected 5", line=lineno
                )
            _, spk_id, gender_tok, l1, grade_tok = fields
            try:
                spk = SpeakerRecord(
                    speaker_id=spk_id,
                    gender=Gender.parse(gender_tok),
                    l1=l1,
                    grade=Grade.parse(grade_tok),
                )
            except ValueError as exc:
                raise ManifestError(str(exc), line=lineno) from None
            if spk.speaker_id in speaker_ids:
                raise ManifestError(f"duplicate speaker id {spk.speaker_id!r}", line=lineno)
            speaker_ids.add(spk.speaker_id)
            speakers.append(spk)
        elif tag == _REC_TAG:
            if len(fields) != 5:
                raise ManifestError(
                    f"recording line has {len(fields)} fields, expected 5", line=lineno
                )
            _, rec_id, spk_id, section_tok, path = fields
            try:
                rec = RecordingRecord(
                    recording_id=rec_id,
                    speaker_id=spk_id,
                    section=Section.parse(section_tok),
                    source_path=path,
                )
            except ValueError as exc:
                raise ManifestError(str(exc), line=lineno) from None
            if rec.recording_id in recording_ids:
                raise ManifestError(f"duplicate recording id {rec.recording_id!r}", line=lineno)
            recording_ids.add(rec.recording_id)
            pending_recs.append((lineno, rec))
        else:
            raise ManifestError(f"unknown record tag {tag!r}", line=lineno)
    for lineno, rec in pending_recs:
        if rec.speaker_id not in speaker_ids:
            raise ManifestError(
                f"recording {rec.recording_id!r} references unknown speaker {rec.speaker_id!r}",
                line=lineno,
            )
        recordings.append(rec)
    return Manifest(speakers=tuple(speakers), recordings=tuple(recordings))


def serialize_manifest(manifest):
    """Render a manifest back to its tab-separated text form.

    Inverse of parse_manifest: parse(serialize(m)) == m.
    """
    lines = []
    for spk in manifest.speakers:
        lines.append(
            "\t".join([_SPK_TAG, spk.speaker_id, spk.gender.value, spk.l1, spk.grade.value])
        )
    for rec in manifest.recordings:
        lines.append(
            "\t".join(
                [_REC_TAG, rec.recording_id, rec.speaker_id, rec.section.value, rec.source_path]
            )
        )
    return "\n".join(lines) + "\n" if lines else ""


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_manifest(fh.read())


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_manifest(manifest))


_MATRIX_MAGIC = b"SVM1"
_EMBEDDING_MAGIC = b"SVE1"
_HEADER = struct.Struct("<II")
_U32 = struct.Struct("<I")


def _read_exact(fh, nbytes, what, path):
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"{path}: truncated {what} ({len(buf)} of {nbytes} bytes)")
    return buf


def _validate_shape(rows, cols, path):
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: empty matrix ({rows}x{cols})")


def write_matrix(path, values):
    """Write a (rows, cols) float32 matrix; bit-exact and deterministic."""
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    if arr.ndim != 2:
        raise FormatError(f"{path}: matrix must be 2-D, got shape {arr.shape}")
    _validate_shape(arr.shape[0], arr.shape[1], path)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC)
        fh.write(_HEADER.pack(arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_matrix(path):
    """Read a matrix file; inverse of write_matrix, bit-exact."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic", path)
        if magic != _MATRIX_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        rows, cols = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header", path))
        _validate_shape(rows, cols, path)
        payload = _read_exact(fh, rows * cols * 4, "payload", path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.isfinite(arr).all():
        raise FormatError(f"{path}: non-finite values in payload")
    return arr.copy()


@dataclass(frozen=True)
class EmbeddingSet:
    """Fixed-dimensional vectors keyed by recording or speaker id."""

    ids: tuple
    vectors: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        vec = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if vec.ndim != 2 or vec.shape[0] < 1 or vec.shape[1] < 1:
            raise FormatError(f"embedding set must be (n, dim), got shape {vec.shape}")
        if vec.shape[0] != len(self.ids):
            raise FormatError(f"{len(self.ids)} ids for {vec.shape[0]} vectors")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("duplicate ids in embedding set")
        if not np.isfinite(vec).all():
            raise FormatError("non-finite embedding values")
        object.__setattr__(self, "vectors", vec)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    @cached_property
    def index(self):
        return {ident: i for i, ident in enumerate(self.ids)}

    def vector(self, ident):
        return self.vectors[self.index[ident]]

    def take(self, idents):
        rows = [self.index[i] for i in idents]
        return EmbeddingSet(ids=tuple(idents), vectors=self.vectors[rows])


def write_embeddings(path, embeddings):
    """Write an EmbeddingSet: SVE1 matrix block plus trailing id table."""
    vec = embeddings.vectors
    with open(path, "wb") as fh:
        fh.write(_EMBEDDING_MAGIC)
        fh.write(_HEADER.pack(vec.shape[0], vec.shape[1]))
        fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes(order="C"))
        for ident in embeddings.ids:
            raw = ident.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)


def read_embeddings(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic", path)
        if magic != _EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        rows, cols = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header", path))
        _validate_shape(rows, cols, path)
        payload = _read_exact(fh, rows * cols * 4, "payload", path)
        ids = []
        for _ in range(rows):
            (length,) = _U32.unpack(_read_exact(fh, 4, "id length", path))
            ids.append(_read_exact(fh, length, "id", path).decode("utf-8"))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after id table")
    vec = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return EmbeddingSet(ids=tuple(ids), vectors=vec.copy())
