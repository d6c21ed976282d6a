"""End-to-end orchestration: flat config files, staged execution, reports.

A run is a pure function of its resolved configuration plus the input
files, so the report records the configuration's hash and two runs with
the same seeds produce identical bytes. Execution knobs that cannot
change results (the output directory, --jobs) stay out of the config and
out of the hash.

Stages: synth (optional) -> features -> extractor -> embeddings -> plda
-> adapt (optional) -> trials/scoring/eval per restriction row -> report.
A failing stage aborts the run with its name on standard error; outputs
written so far are left in place.
"""

import hashlib
import os
import shutil
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from . import __version__
from .core import (
    EmbeddingSet,
    Manifest,
    Section,
    read_manifest,
    read_matrix,
    write_embeddings,
    write_matrix,
)
from .errors import DataError
from .evaluation import compute_det, compute_eer, fa_breakdown, fuse, ScoreSet, write_breakdown, write_det
from .extractor import (
    PRESETS,
    TrainConfig,
    build_extractor,
    extract_embeddings,
    read_extractor,
    train,
    write_extractor,
)
from .features import extract_fbank, read_audio, resolve_audio_path
from .plda import EmbeddingPreprocessor, TwoCovPlda, read_plda, read_preprocessor, write_plda, write_preprocessor
from .synth import SynthCorpusConfig, sample_corpus
from .trials import (
    RestrictionSet,
    build_enrolments,
    count_trials,
    format_trial,
    generate_trials,
    read_scores,
    write_trials,
)

DEFAULT_CONFIG = {
    "seed": "",
    "synth.enabled": "true",
    "synth.train_speakers": "24",
    "synth.eval_speakers": "16",
    "synth.adapt_speakers": "16",
    "synth.frames": "50",
    "synth.feature_dim": "10",
    "synth.rho": "3.0",
    "synth.shift": "12.0",
    "synth.sections": "1,1,2,2,2",
    "data.train_manifest": "",
    "data.train_features": "",
    "data.eval_manifest": "",
    "data.eval_features": "",
    "data.adapt_manifest": "",
    "data.adapt_features": "",
    "data.audio_root": "",
    "models.extractor": "",
    "models.plda": "",
    "models.preprocessor": "",
    "extractor.preset": "desk",
    "extractor.epochs": "5",
    "extractor.learning_rate": "0.01",
    "extractor.minibatch": "10",
    "extractor.segment_frames": "25",
    "extractor.momentum": "0.9",
    "plda.lda_dim": "0",
    "plda.length_norm": "true",
    "plda.iters": "10",
    "plda.tol": "1e-6",
    "adapt.enabled": "false",
    "adapt.alpha_between": "0.25",
    "adapt.alpha_within": "0.75",
    "trials.restrictions": "gender|gender,l1",
    "fuse.scores": "",
    "fuse.weight_a": "0.7",
    "fuse.weight_b": "0.3",
}

REPORT_NAME = "report.txt"
_SCORE_CHUNK = 4096


def log(level, stage, message):
    print(f"{level}\t{stage}\t{message}", file=sys.stderr, flush=True)


@contextmanager
def _stage(name):
    log("INFO", name, "start")
    try:
        yield
    except Exception as exc:
        log("ERROR", name, f"{type(exc).__name__}: {exc}")
        raise
    log("INFO", name, "done")


def parse_config_text(text):
    """Flat key=value lines; '#' comments and blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"config line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise DataError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve_flat_config(defaults, file_text=None, overrides=None):
    """Defaults, then config file, then overrides; an empty seed falls
    back to VERIFKIT_SEED. Unknown keys are rejected so typos cannot
    silently fall back to defaults."""
    cfg = dict(defaults)
    for source, updates in (("config file", parse_config_text(file_text or "")),
                            ("override", dict(overrides or {}))):
        for key, value in updates.items():
            if key not in defaults:
                raise DataError(f"{source}: unknown key {key!r}")
            cfg[key] = str(value).strip()
    if not cfg.get("seed", "0"):
        cfg["seed"] = os.environ.get("VERIFKIT_SEED", "0").strip() or "0"
    if "seed" in cfg:
        _get_int(cfg, "seed")
    return cfg


def resolve_config(file_text=None, overrides=None):
    return resolve_flat_config(DEFAULT_CONFIG, file_text, overrides)


def config_hash(cfg):
    canonical = "\n".join(f"{k}={v}" for k, v in sorted(cfg.items()))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _get_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise DataError(f"config {key}: {cfg[key]!r} is not an integer") from None


def _get_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise DataError(f"config {key}: {cfg[key]!r} is not a number") from None


def _get_bool(cfg, key):
    value = cfg[key].lower()
    if value in ("true", "yes", "1"):
        return True
    if value in ("false", "no", "0"):
        return False
    raise DataError(f"config {key}: {cfg[key]!r} is not a boolean")


def _get_sections(cfg, key):
    parts = cfg[key].split(",")
    if len(parts) != len(Section):
        raise DataError(f"config {key}: expected {len(Section)} counts, got {len(parts)}")
    try:
        return {s: int(p) for s, p in zip(Section, parts)}
    except ValueError:
        raise DataError(f"config {key}: {cfg[key]!r} is not a count list") from None


def parse_restriction_rows(text):
    """Pipe-separated restriction rows; 'none' is the unrestricted row."""
    rows = []
    for token in text.split("|"):
        token = token.strip()
        if not token or token.lower() == "none":
            rows.append(("none", RestrictionSet()))
        else:
            rows.append((token, RestrictionSet.parse(token)))
    if not rows:
        raise DataError("at least one restriction row is required")
    return rows


def _chunks(iterable, size):
    chunk = []
    for item in iterable:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def score_trial_stream(model, enrolments, verify, trials_iter, jobs=1,
                       chunk_size=_SCORE_CHUNK):
    """Yield (trial, score) in trial order.

    Work is split into fixed-size chunks whose boundaries do not depend
    on the worker count, and chunk results are merged in submission
    order, so any jobs value produces identical output.
    """

    def compute(chunk):
        u = np.stack([enrolments.vector(t.enrol_speaker_id) for t in chunk])
        v = np.stack([verify.vector(t.verify_recording_id) for t in chunk])
        return model.score_pairs(u.astype(np.float64), v.astype(np.float64))

    stream = _chunks(trials_iter, chunk_size)
    if jobs <= 1:
        for chunk in stream:
            yield from zip(chunk, compute(chunk))
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        pending = deque()
        for chunk in stream:
            pending.append((chunk, pool.submit(compute, chunk)))
            while len(pending) > jobs + 1:
                chunk_done, future = pending.popleft()
                yield from zip(chunk_done, future.result())
        while pending:
            chunk_done, future = pending.popleft()
            yield from zip(chunk_done, future.result())


def ensure_features(manifest, features_dir, audio_root, computed_dir):
    """Directory holding <recording_id>.svm for every recording.

    An already complete features_dir is used as is; otherwise a complete
    copy is assembled under computed_dir, computing filterbank features
    from audio for whatever is missing.
    """
    def feature_file(base, rec):
        return os.path.join(base, f"{rec.recording_id}.svm")

    if features_dir and all(
        os.path.exists(feature_file(features_dir, r)) for r in manifest.recordings
    ):
        return features_dir
    os.makedirs(computed_dir, exist_ok=True)
    computed = 0
    for rec in manifest.recordings:
        dst = feature_file(computed_dir, rec)
        if os.path.exists(dst):
            continue
        src = feature_file(features_dir, rec) if features_dir else None
        if src and os.path.exists(src):
            shutil.copyfile(src, dst)
            continue
        if not audio_root:
            raise DataError(
                f"recording {rec.recording_id!r}: no feature file and no audio root"
            )
        signal = read_audio(resolve_audio_path(audio_root, rec.source_path))
        write_matrix(dst, extract_fbank(signal))
        computed += 1
    if computed:
        log("INFO", "features", f"computed {computed} feature files")
    return computed_dir


def _preprocessed(preproc, embeddings):
    return EmbeddingSet(ids=embeddings.ids, vectors=preproc.transform(embeddings.vectors))


def _scorable_manifest(manifest, verify_embeddings, enrolled_ids):
    """Restrict to enrolled speakers and verify recordings with embeddings."""
    keep = set(enrolled_ids)
    return Manifest(
        speakers=tuple(s for s in manifest.speakers if s.speaker_id in keep),
        recordings=tuple(
            r
            for r in manifest.recordings
            if r.speaker_id in keep
            and (r.section not in (Section.C, Section.D, Section.E)
                 or r.recording_id in verify_embeddings.index)
        ),
    )


def _shift_vector(norm, dim):
    return norm * np.ones(dim) / np.sqrt(dim)


class _Runner:
    def __init__(self, cfg, out_dir, jobs):
        self.cfg = cfg
        self.out = out_dir
        self.jobs = max(1, int(jobs))
        self.seed = _get_int(cfg, "seed")
        self.artifacts = []
        self.eer_rows = []
        self._breakdown_manifest = None

    def path(self, *parts):
        full = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def record(self, *parts):
        self.artifacts.append("/".join(parts))
        return self.path(*parts)

    def run(self, adapt):
        corpora = self._data(adapt)
        features = {}
        with _stage("features"):
            for name, (manifest, feat_dir) in corpora.items():
                features[name] = ensure_features(
                    manifest, feat_dir, self.cfg["data.audio_root"],
                    self.path("features", name),
                )
        model = self._extractor(corpora["train"][0], features["train"])
        embeddings = self._embeddings(model, corpora, features)
        preproc, plda = self._plda(corpora["train"][0], embeddings["train"])
        systems = {"baseline": plda}
        if adapt:
            with _stage("adapt"):
                adapted = plda.adapt(
                    preproc.transform(embeddings["adapt"].vectors),
                    alpha_within=_get_float(self.cfg, "adapt.alpha_within"),
                    alpha_between=_get_float(self.cfg, "adapt.alpha_between"),
                )
                write_plda(self.record("models", "plda.adapted.svp"), adapted)
                systems["adapted"] = adapted
        self._evaluate(corpora["eval"][0], embeddings["eval"], preproc, systems)
        with _stage("report"):
            report = self._report()
            with open(self.path(REPORT_NAME), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(report)
        return report

    def _data(self, adapt):
        cfg = self.cfg
        corpora = {}
        if _get_bool(cfg, "synth.enabled"):
            with _stage("synth"):
                sections = _get_sections(cfg, "synth.sections")
                dim = _get_int(cfg, "synth.feature_dim")
                shift = _shift_vector(_get_float(cfg, "synth.shift"), dim) if adapt else None
                plan = [("train", "synth.train_speakers", self.seed, None),
                        ("eval", "synth.eval_speakers", self.seed + 1, shift)]
                if adapt:
                    plan.append(("adapt", "synth.adapt_speakers", self.seed + 2, shift))
                for name, key, seed, domain_shift in plan:
                    corpus_dir = self.path("corpora", name)
                    manifest = sample_corpus(
                        SynthCorpusConfig(
                            num_speakers=_get_int(cfg, key),
                            frames_per_recording=_get_int(cfg, "synth.frames"),
                            feature_dim=dim,
                            rho=_get_float(cfg, "synth.rho"),
                            section_counts=sections,
                            domain_shift=domain_shift,
                            seed=seed,
                        ),
                        corpus_dir,
                    )
                    corpora[name] = (manifest, corpus_dir)
                    log("INFO", "synth", f"{name}: {len(manifest.speakers)} speakers, "
                                         f"{len(manifest.recordings)} recordings")
            return corpora
        with _stage("data"):
            for name in ("train", "eval") + (("adapt",) if adapt else ()):
                manifest_path = cfg[f"data.{name}_manifest"]
                if not manifest_path:
                    raise DataError(f"data.{name}_manifest is required when synth is off")
                corpora[name] = (read_manifest(manifest_path), cfg[f"data.{name}_features"])
        return corpora

    def _extractor(self, manifest, features_dir):
        cfg = self.cfg
        with _stage("extractor"):
            if cfg["models.extractor"]:
                log("INFO", "extractor", f"reusing {os.path.basename(cfg['models.extractor'])}")
                return read_extractor(cfg["models.extractor"])
            preset = cfg["extractor.preset"]
            if preset not in PRESETS:
                raise DataError(f"config extractor.preset: unknown preset {preset!r}")
            if _get_bool(cfg, "synth.enabled"):
                dim = _get_int(cfg, "synth.feature_dim")
            else:
                first = manifest.recordings[0]
                dim = read_matrix(
                    os.path.join(features_dir, f"{first.recording_id}.svm")
                ).shape[1]
            model = build_extractor(
                feature_dim=dim,
                num_speakers=len(manifest.speakers),
                preset=preset,
                rng_seed=self.seed,
            )
            train_cfg = TrainConfig(
                learning_rate=_get_float(cfg, "extractor.learning_rate"),
                minibatch_size=_get_int(cfg, "extractor.minibatch"),
                segment_frames=_get_int(cfg, "extractor.segment_frames"),
                epochs=_get_int(cfg, "extractor.epochs"),
                momentum=_get_float(cfg, "extractor.momentum"),
                rng_seed=self.seed,
            )
            loss_log = train(model, manifest, features_dir, train_cfg)
            with open(self.record("models", "extractor.log"), "w", encoding="utf-8",
                      newline="\n") as fh:
                for epoch, loss, accuracy in loss_log:
                    fh.write(f"{epoch}\t{loss!r}\t{accuracy!r}\n")
            if loss_log:
                last = loss_log[-1]
                log("INFO", "extractor",
                    f"epoch {last[0]}: loss {last[1]:.4f} accuracy {last[2]:.3f}")
            write_extractor(self.record("models", "extractor.svx"), model)
            return model

    def _embeddings(self, model, corpora, features):
        out = {}
        with _stage("embeddings"):
            for name, (manifest, _) in corpora.items():
                emb, skipped = extract_embeddings(model, manifest, features[name])
                for recording_id, reason in skipped:
                    log("WARN", "embeddings", f"{name}: skipped {recording_id}: {reason}")
                write_embeddings(self.record("embeddings", f"{name}.sve"), emb)
                out[name] = emb
        return out

    def _plda(self, manifest, embeddings):
        cfg = self.cfg
        with _stage("plda"):
            if cfg["models.plda"]:
                if not cfg["models.preprocessor"]:
                    raise DataError("models.plda needs models.preprocessor")
                log("INFO", "plda", f"reusing {os.path.basename(cfg['models.plda'])}")
                return read_preprocessor(cfg["models.preprocessor"]), read_plda(cfg["models.plda"])
            labels = [
                manifest.recordings_by_id[i].speaker_id for i in embeddings.ids
            ]
            lda_dim = _get_int(cfg, "plda.lda_dim")
            preproc = EmbeddingPreprocessor(
                lda_dim=lda_dim or None,
                length_norm=_get_bool(cfg, "plda.length_norm"),
            )
            x = preproc.fit(embeddings.vectors.astype(np.float64), labels).transform(
                embeddings.vectors.astype(np.float64)
            )
            plda = TwoCovPlda(
                n_iter=_get_int(cfg, "plda.iters"), tol=_get_float(cfg, "plda.tol")
            ).fit(x, labels)
            log("INFO", "plda",
                f"{len(plda.loglik_curve_) - 1} iterations, "
                f"final loglik {plda.loglik_curve_[-1]:.3f}")
            write_preprocessor(self.record("models", "preproc.svc"), preproc)
            write_plda(self.record("models", "plda.svp"), plda)
            return preproc, plda

    def _evaluate(self, eval_manifest, eval_embeddings, preproc, systems):
        cfg = self.cfg
        rows = parse_restriction_rows(cfg["trials.restrictions"])
        with _stage("enrolments"):
            processed = _preprocessed(preproc, eval_embeddings)
            enrolments, excluded = build_enrolments(eval_manifest, processed)
            for speaker_id in excluded:
                log("WARN", "enrolments", f"no enrolment material for {speaker_id}")
            scorable = _scorable_manifest(eval_manifest, processed, enrolments.ids)
            self._breakdown_manifest = scorable
        fuse_path = cfg["fuse.scores"]
        for label, restrictions in rows:
            with _stage(f"trials[{label}]"):
                targets, nontargets = count_trials(scorable, restrictions)
                trial_path = self.record("trials", f"{label}.trials")
                write_trials(trial_path, generate_trials(scorable, restrictions))
                log("INFO", f"trials[{label}]",
                    f"{targets} targets, {nontargets} nontargets")
            first_scores = None
            for system, model in systems.items():
                with _stage(f"score[{label}/{system}]"):
                    score_set = self._score_one(
                        label, system, model, enrolments, processed, scorable,
                        restrictions, targets, nontargets,
                    )
                if first_scores is None:
                    first_scores = score_set
            if fuse_path and label == rows[0][0]:
                with _stage("fuse"):
                    ext_trials, ext_scores = read_scores(fuse_path)
                    fused = fuse(
                        first_scores,
                        ScoreSet(trials=ext_trials, scores=ext_scores),
                        weight_a=_get_float(cfg, "fuse.weight_a"),
                        weight_b=_get_float(cfg, "fuse.weight_b"),
                    )
                    self._write_scores(label, "fused", fused)
                    self._eval_scores(label, "fused", fused, targets, nontargets)

    def _score_one(self, label, system, model, enrolments, processed, scorable,
                   restrictions, targets, nontargets):
        trials = []
        scores = []
        score_path = self.record("scores", f"{label}.{system}.scores")
        with open(score_path, "w", encoding="utf-8", newline="\n") as fh:
            for trial, value in score_trial_stream(
                model, enrolments, processed,
                generate_trials(scorable, restrictions), jobs=self.jobs,
            ):
                fh.write(f"{format_trial(trial)}\t{float(value)!r}\n")
                trials.append(trial)
                scores.append(value)
        score_set = ScoreSet(trials=trials, scores=np.array(scores, dtype=np.float64))
        self._eval_scores(label, system, score_set, targets, nontargets)
        return score_set

    def _write_scores(self, label, system, score_set):
        path = self.record("scores", f"{label}.{system}.scores")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for trial, value in zip(score_set.trials, score_set.scores):
                fh.write(f"{format_trial(trial)}\t{float(value)!r}\n")

    def _eval_scores(self, label, system, score_set, targets, nontargets):
        eer, threshold = compute_eer(score_set)
        write_det(self.record("eval", f"{label}.{system}.det"), compute_det(score_set))
        for attribute in ("grade", "l1"):
            table = fa_breakdown(score_set, self._breakdown_manifest, attribute, threshold)
            write_breakdown(
                self.record("eval", f"{label}.{system}.{attribute}.tsv"), table
            )
        self.eer_rows.append((label, system, targets, nontargets, eer, threshold))
        log("INFO", f"eval[{label}/{system}]", f"eer {100 * eer:.3f}%")

    def _report(self):
        lines = [
            "verifkit report",
            f"version\t{__version__}",
            f"seed\t{self.seed}",
            f"config\t{config_hash(self.cfg)}",
            "",
            "[eer]",
            "restriction\tsystem\ttargets\tnontargets\teer%\tthreshold",
        ]
        for label, system, targets, nontargets, eer, threshold in self.eer_rows:
            lines.append(
                f"{label}\t{system}\t{targets}\t{nontargets}"
                f"\t{100 * eer:.3f}\t{float(threshold)!r}"
            )
        lines += ["", "[artifacts]"]
        lines += sorted(self.artifacts)
        return "\n".join(lines) + "\n"


def run_pipeline(cfg, out_dir, jobs=1):
    """Execute every stage under out_dir and return the report text."""
    adapt = _get_bool(cfg, "adapt.enabled")
    runner = _Runner(cfg, out_dir, jobs)
    os.makedirs(out_dir, exist_ok=True)
    report = runner.run(adapt)
    log("INFO", "pipeline", f"report written to {REPORT_NAME}")
    return report
