import numpy as np
import pytest

from verifkit.core import (
    EmbeddingSet,
    Gender,
    Grade,
    Manifest,
    MergedGrade,
    RecordingRecord,
    Section,
    SpeakerRecord,
    parse_manifest,
    read_embeddings,
    read_matrix,
    serialize_manifest,
    write_embeddings,
    write_matrix,
)
from verifkit.errors import FormatError, ManifestError

L1_POOL = ["Thai", "Spanish", "French", "Arabic", "Tamil", "Polish"]


def random_manifest(rng, n_speakers=12, max_recs=6):
    speakers = []
    recordings = []
    for i in range(n_speakers):
        spk_id = f"s{i:03d}"
        speakers.append(
            SpeakerRecord(
                speaker_id=spk_id,
                gender=rng.choice([Gender.MALE, Gender.FEMALE]),
                l1=str(rng.choice(L1_POOL)),
                grade=rng.choice(list(Grade)),
            )
        )
        for j in range(int(rng.integers(1, max_recs + 1))):
            recordings.append(
                RecordingRecord(
                    recording_id=f"{spk_id}-r{j}",
                    speaker_id=spk_id,
                    section=rng.choice(list(Section)),
                    source_path=f"audio/{spk_id}/{j}.raw@16000",
                )
            )
    return Manifest(speakers=tuple(speakers), recordings=tuple(recordings))


class TestGrades:
    def test_merged_order(self):
        assert MergedGrade.A1 < MergedGrade.A2 < MergedGrade.B1 < MergedGrade.B2 < MergedGrade.C

    def test_c1_c2_merge(self):
        assert Grade.C1.merged is MergedGrade.C
        assert Grade.C2.merged is MergedGrade.C
        for g in [Grade.A1, Grade.A2, Grade.B1, Grade.B2]:
            assert g.merged.token == g.value

    def test_unknown_grade_rejected(self):
        with pytest.raises(ValueError, match="C3"):
            Grade.parse("C3")


class TestManifestParsing:
    def test_basic_lines(self):
        text = "SPK\ts1\tF\tThai\tB1\nREC\tr1\ts1\tA\taudio/r1.raw@16000\n"
        m = parse_manifest(text)
        spk = m.speakers_by_id["s1"]
        assert spk.gender is Gender.FEMALE
        assert spk.l1 == "Thai"
        assert spk.grade is Grade.B1
        rec = m.recordings_by_id["r1"]
        assert rec.speaker_id == "s1"
        assert rec.section is Section.A
        assert rec.source_path == "audio/r1.raw@16000"

    def test_comments_and_blank_lines_skipped(self):
        text = "# corpus v1\n\nSPK\ts1\tM\tThai\tA2\n  # indented comment\nREC\tr1\ts1\tC\tp\n"
        m = parse_manifest(text)
        assert len(m.speakers) == 1 and len(m.recordings) == 1

    def test_dangling_speaker_reference(self):
        text = "SPK\ts1\tF\tThai\tB1\nREC\tr1\ts9\tA\tp\n"
        with pytest.raises(ManifestError, match="s9"):
            parse_manifest(text)

    def test_forward_reference_allowed(self):
        # recording line may precede its speaker line
        text = "REC\tr1\ts1\tA\tp\nSPK\ts1\tF\tThai\tB1\n"
        m = parse_manifest(text)
        assert m.recordings_by_id["r1"].speaker_id == "s1"

    def test_duplicate_speaker_reports_line(self):
        text = "SPK\ts1\tF\tThai\tB1\nSPK\ts1\tM\tThai\tB1\n"
        with pytest.raises(ManifestError, match="line 2"):
            parse_manifest(text)

    def test_bad_field_count(self):
        with pytest.raises(ManifestError, match="line 1"):
            parse_manifest("SPK\ts1\tF\tThai\n")

    def test_unknown_tag(self):
        with pytest.raises(ManifestError, match="XXX"):
            parse_manifest("XXX\ta\tb\tc\td\n")

    def test_unknown_section_token(self):
        text = "SPK\ts1\tF\tThai\tB1\nREC\tr1\ts1\tZ\tp\n"
        with pytest.raises(ManifestError, match="section"):
            parse_manifest(text)

    def test_roundtrip_property(self):
        rng = np.random.default_rng(20260814)
        for _ in range(20):
            m = random_manifest(rng)
            assert parse_manifest(serialize_manifest(m)) == m

    def test_section_helpers(self):
        text = (
            "SPK\ts1\tF\tThai\tB1\n"
            "REC\ta\ts1\tA\tp\nREC\tb\ts1\tB\tp\n"
            "REC\tc\ts1\tC\tp\nREC\td\ts1\tD\tp\nREC\te\ts1\tE\tp\n"
        )
        m = parse_manifest(text)
        assert [r.recording_id for r in m.enrolment_recordings("s1")] == ["a", "b"]
        assert [r.recording_id for r in m.verification_recordings("s1")] == ["c", "d", "e"]

    def test_subset(self):
        rng = np.random.default_rng(7)
        m = random_manifest(rng, n_speakers=8)
        keep = [s.speaker_id for s in m.speakers[:3]]
        sub = m.subset(keep)
        assert [s.speaker_id for s in sub.speakers] == keep
        assert all(r.speaker_id in keep for r in sub.recordings)


class TestMatrixFormat:
    def test_2x2_file_is_28_bytes(self, tmp_path):
        path = tmp_path / "m.svm"
        write_matrix(path, np.arange(4.0).reshape(2, 2))
        assert path.stat().st_size == 28

    def test_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(11)
        path = tmp_path / "m.svm"
        for _ in range(10):
            mat = rng.standard_normal((int(rng.integers(1, 30)), int(rng.integers(1, 30))))
            mat = mat.astype(np.float32)
            write_matrix(path, mat)
            got = read_matrix(path)
            assert got.dtype == np.float32
            assert np.array_equal(got, mat)

    def test_write_deterministic(self, tmp_path):
        rng = np.random.default_rng(3)
        mat = rng.standard_normal((50, 40)).astype(np.float32)
        p1, p2 = tmp_path / "a.svm", tmp_path / "b.svm"
        write_matrix(p1, mat)
        write_matrix(p2, mat)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_matrix_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="empty matrix"):
            write_matrix(tmp_path / "m.svm", np.zeros((0, 4)))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.svm"
        path.write_bytes(b"XXXX" + b"\x00" * 24)
        with pytest.raises(FormatError, match="magic"):
            read_matrix(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.svm"
        write_matrix(path, np.ones((2, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="truncated"):
            read_matrix(path)

    def test_nonfinite_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="non-finite"):
            write_matrix(tmp_path / "m.svm", np.array([[1.0, np.nan]]))


class TestEmbeddingFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        vec = rng.standard_normal((7, 12)).astype(np.float32)
        ids = tuple(f"rec-{i}" for i in range(7))
        path = tmp_path / "e.sve"
        write_embeddings(path, EmbeddingSet(ids=ids, vectors=vec))
        got = read_embeddings(path)
        assert got.ids == ids
        assert np.array_equal(got.vectors, vec)
        assert got.dim == 12

    def test_unicode_ids(self, tmp_path):
        vec = np.ones((2, 3), dtype=np.float32)
        ids = ("spk-é", "spk-中文")
        path = tmp_path / "e.sve"
        write_embeddings(path, EmbeddingSet(ids=ids, vectors=vec))
        assert read_embeddings(path).ids == ids

    def test_duplicate_ids_rejected(self):
        with pytest.raises(FormatError, match="duplicate"):
            EmbeddingSet(ids=("a", "a"), vectors=np.ones((2, 2), dtype=np.float32))

    def test_id_count_mismatch(self):
        with pytest.raises(FormatError):
            EmbeddingSet(ids=("a",), vectors=np.ones((2, 2), dtype=np.float32))

    def test_lookup_and_take(self):
        vec = np.arange(6, dtype=np.float32).reshape(3, 2)
        es = EmbeddingSet(ids=("a", "b", "c"), vectors=vec)
        assert np.array_equal(es.vector("b"), [2.0, 3.0])
        sub = es.take(["c", "a"])
        assert sub.ids == ("c", "a")
        assert np.array_equal(sub.vectors, vec[[2, 0]])

    def test_matrix_reader_rejects_embedding_file(self, tmp_path):
        path = tmp_path / "e.sve"
        write_embeddings(path, EmbeddingSet(ids=("a",), vectors=np.ones((1, 2), np.float32)))
        with pytest.raises(FormatError, match="magic"):
            read_matrix(path)
