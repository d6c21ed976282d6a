"""Command-line front end: one subcommand per stage plus `pipeline`.

Exit codes: 0 success, 1 usage error, 2 data or file error, 3 numerical
failure. Logs go to standard error as LEVEL<TAB>stage<TAB>message; data
outputs go only to the declared files or standard output.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__
from .core import (
    EmbeddingSet,
    Section,
    read_embeddings,
    read_manifest,
    read_matrix,
    write_embeddings,
    write_manifest,
    write_matrix,
)
from .errors import DataError, NumericalError
from .evaluation import (
    ScoreSet,
    compute_det,
    compute_eer,
    fa_breakdown,
    fuse,
    write_breakdown,
    write_det,
)
from .extractor import (
    PRESETS,
    TrainConfig,
    build_extractor,
    extract_embeddings,
    fine_tune,
    read_extractor,
    train,
    write_extractor,
)
from .features import (
    FbankConfig,
    double_corpus,
    extract_fbank,
    mel_energies,
    read_audio,
    resolve_audio_path,
)
from .pipeline import (
    REPORT_NAME,
    log,
    parse_config_text,
    resolve_config,
    resolve_flat_config,
    run_pipeline,
    score_trial_stream,
)
from .plda import (
    EmbeddingPreprocessor,
    TwoCovPlda,
    read_plda,
    read_preprocessor,
    write_plda,
    write_preprocessor,
)
from .synth import SynthCorpusConfig, SynthPldaConfig, sample_corpus, sample_plda
from .trials import (
    RestrictionSet,
    build_enrolments,
    count_trials,
    format_trial,
    generate_trials,
    read_scores,
    read_trials,
    write_trials,
)

SYNTH_PLDA_DEFAULTS = {
    "dim": "10",
    "speakers": "100",
    "per_speaker": "5",
    "mean": "0.0",
    "between": "1.0",
    "within": "1.0",
    "seed": "",
}

SYNTH_CORPUS_DEFAULTS = {
    "speakers": "12",
    "frames": "50",
    "dim": "10",
    "rho": "4.0",
    "sections": "1,1,1,1,1",
    "shift": "",
    "seed": "",
}


def _seed_of(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("VERIFKIT_SEED", "0").strip() or "0")


def _overrides(args):
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise DataError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _read_config_file(path):
    if not path:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _load_sections(text):
    parts = text.split(",")
    if len(parts) != len(Section):
        raise DataError(f"sections: expected {len(Section)} counts, got {len(parts)}")
    return {s: int(p) for s, p in zip(Section, parts)}


# --- features ---------------------------------------------------------------


def cmd_features_extract(args):
    manifest = read_manifest(args.manifest)
    cfg = FbankConfig(
        num_filters=args.filters,
        frame_length_ms=args.frame_ms,
        frame_shift_ms=args.shift_ms,
        low_hz=args.low_hz,
        high_hz=args.high_hz,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    compute = mel_energies if args.no_mean_norm else extract_fbank
    for rec in manifest.recordings:
        signal = read_audio(resolve_audio_path(args.audio_root, rec.source_path))
        write_matrix(
            os.path.join(args.out_dir, f"{rec.recording_id}.svm"), compute(signal, cfg)
        )
    log("INFO", "features", f"wrote {len(manifest.recordings)} feature files")


def cmd_features_augment(args):
    manifest = read_manifest(args.manifest)
    doubled, failures = double_corpus(
        manifest, args.audio_root, args.out_dir, rng_seed=_seed_of(args)
    )
    for recording_id, reason in failures:
        log("WARN", "augment", f"{recording_id}: {reason}")
    write_manifest(args.out_manifest, doubled)
    log("INFO", "augment",
        f"{len(doubled.recordings) - len(manifest.recordings)} augmented recordings")


# --- extractor ---------------------------------------------------------------


def _train_config(args):
    return TrainConfig(
        learning_rate=args.learning_rate,
        minibatch_size=args.minibatch,
        segment_frames=args.segment_frames,
        epochs=args.epochs,
        momentum=args.momentum,
        rng_seed=_seed_of(args),
    )


def _write_loss_log(path, loss_log):
    if not path:
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for epoch, loss, accuracy in loss_log:
            fh.write(f"{epoch}\t{loss!r}\t{accuracy!r}\n")


def _log_epochs(loss_log):
    for epoch, loss, accuracy in loss_log:
        log("INFO", "extractor", f"epoch {epoch}: loss {loss:.6f} accuracy {accuracy:.4f}")


def cmd_extractor_train(args):
    manifest = read_manifest(args.manifest)
    first = manifest.recordings[0]
    feature_dim = read_matrix(
        os.path.join(args.features, f"{first.recording_id}.svm")
    ).shape[1]
    model = build_extractor(
        feature_dim=feature_dim,
        num_speakers=len(manifest.speakers),
        preset=args.preset,
        rng_seed=_seed_of(args),
    )
    loss_log = train(model, manifest, args.features, _train_config(args))
    _log_epochs(loss_log)
    _write_loss_log(args.log, loss_log)
    write_extractor(args.out, model)


def cmd_extractor_finetune(args):
    model = read_extractor(args.model)
    manifest = read_manifest(args.manifest)
    tuned, loss_log = fine_tune(
        model, manifest, args.features, _train_config(args), head_seed=args.head_seed
    )
    _log_epochs(loss_log)
    _write_loss_log(args.log, loss_log)
    write_extractor(args.out, tuned)


def cmd_extractor_extract(args):
    model = read_extractor(args.model)
    manifest = read_manifest(args.manifest)
    embeddings, skipped = extract_embeddings(model, manifest, args.features)
    for recording_id, reason in skipped:
        log("WARN", "extract", f"skipped {recording_id}: {reason}")
    write_embeddings(args.out, embeddings)
    log("INFO", "extract", f"{len(embeddings)} embeddings of dimension {embeddings.dim}")


# --- plda --------------------------------------------------------------------


def cmd_plda_fit(args):
    manifest = read_manifest(args.manifest)
    embeddings = read_embeddings(args.embeddings)
    labels = [manifest.recordings_by_id[i].speaker_id for i in embeddings.ids]
    x = embeddings.vectors.astype(np.float64)
    preproc = EmbeddingPreprocessor(
        lda_dim=args.lda_dim or None, length_norm=not args.no_length_norm
    ).fit(x, labels)
    model = TwoCovPlda(n_iter=args.iters, tol=args.tol).fit(preproc.transform(x), labels)
    log("INFO", "plda",
        f"{len(model.loglik_curve_) - 1} iterations, final loglik "
        f"{model.loglik_curve_[-1]:.3f}")
    write_preprocessor(args.out_preproc, preproc)
    write_plda(args.out_model, model)


def cmd_plda_adapt(args):
    model = read_plda(args.model)
    preproc = read_preprocessor(args.preproc)
    embeddings = read_embeddings(args.embeddings)
    adapted = model.adapt(
        preproc.transform(embeddings.vectors.astype(np.float64)),
        alpha_within=args.alpha_within,
        alpha_between=args.alpha_between,
    )
    write_plda(args.out, adapted)


def cmd_plda_score(args):
    model = read_plda(args.model)
    preproc = read_preprocessor(args.preproc)
    manifest = read_manifest(args.manifest)
    embeddings = read_embeddings(args.embeddings)
    processed = EmbeddingSet(
        ids=embeddings.ids,
        vectors=preproc.transform(embeddings.vectors.astype(np.float64)),
    )
    enrolments, excluded = build_enrolments(manifest, processed)
    for speaker_id in excluded:
        log("WARN", "score", f"no enrolment material for {speaker_id}")
    n = 0
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for trial, value in score_trial_stream(
            model, enrolments, processed, read_trials(args.trials), jobs=args.jobs
        ):
            fh.write(f"{format_trial(trial)}\t{float(value)!r}\n")
            n += 1
    log("INFO", "score", f"scored {n} trials")


# --- trials ------------------------------------------------------------------


def cmd_trials_generate(args):
    manifest = read_manifest(args.manifest)
    restrictions = RestrictionSet.parse(args.restrict)
    n = write_trials(args.out, generate_trials(manifest, restrictions))
    log("INFO", "trials", f"wrote {n} trials")


def cmd_trials_count(args):
    manifest = read_manifest(args.manifest)
    targets, nontargets = count_trials(manifest, RestrictionSet.parse(args.restrict))
    print(f"targets\t{targets}")
    print(f"nontargets\t{nontargets}")


# --- eval --------------------------------------------------------------------


def _read_score_set(path):
    trials, scores = read_scores(path)
    return ScoreSet(trials=trials, scores=scores)


def cmd_eval_eer(args):
    eer, threshold = compute_eer(_read_score_set(args.scores))
    print(f"eer\t{eer!r}")
    print(f"threshold\t{threshold!r}")


def cmd_eval_det(args):
    write_det(args.out, compute_det(_read_score_set(args.scores)))


def cmd_eval_breakdown(args):
    scores = _read_score_set(args.scores)
    manifest = read_manifest(args.manifest)
    threshold = args.threshold
    if threshold is None:
        _, threshold = compute_eer(scores)
    write_breakdown(args.out, fa_breakdown(scores, manifest, args.attribute, threshold))


def cmd_eval_fuse(args):
    fused = fuse(
        _read_score_set(args.scores_a),
        _read_score_set(args.scores_b),
        weight_a=args.weight_a,
        weight_b=args.weight_b,
    )
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for trial, value in zip(fused.trials, fused.scores):
            fh.write(f"{format_trial(trial)}\t{float(value)!r}\n")


# --- synth -------------------------------------------------------------------


def cmd_synth_plda(args):
    cfg = resolve_flat_config(
        SYNTH_PLDA_DEFAULTS, _read_config_file(args.config), _overrides(args)
    )
    spec = SynthPldaConfig(
        dim=int(cfg["dim"]),
        num_speakers=int(cfg["speakers"]),
        embeddings_per_speaker=int(cfg["per_speaker"]),
        mean=float(cfg["mean"]),
        between=float(cfg["between"]),
        within=float(cfg["within"]),
        seed=int(cfg["seed"]),
    )
    x, labels = sample_plda(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    ids = [f"{label}-e{i:05d}" for i, label in enumerate(labels)]
    write_embeddings(
        os.path.join(args.out_dir, "embeddings.sve"),
        EmbeddingSet(ids=ids, vectors=x),
    )
    with open(os.path.join(args.out_dir, "labels.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        for ident, label in zip(ids, labels):
            fh.write(f"{ident}\t{label}\n")
    log("INFO", "synth", f"{len(ids)} embeddings for {len(set(labels))} speakers")


def cmd_synth_corpus(args):
    cfg = resolve_flat_config(
        SYNTH_CORPUS_DEFAULTS, _read_config_file(args.config), _overrides(args)
    )
    dim = int(cfg["dim"])
    shift = None
    if cfg["shift"]:
        shift = float(cfg["shift"]) * np.ones(dim) / np.sqrt(dim)
    manifest = sample_corpus(
        SynthCorpusConfig(
            num_speakers=int(cfg["speakers"]),
            frames_per_recording=int(cfg["frames"]),
            feature_dim=dim,
            rho=float(cfg["rho"]),
            section_counts=_load_sections(cfg["sections"]),
            domain_shift=shift,
            seed=int(cfg["seed"]),
        ),
        args.out_dir,
    )
    log("INFO", "synth",
        f"{len(manifest.speakers)} speakers, {len(manifest.recordings)} recordings")


# --- pipeline ----------------------------------------------------------------


def cmd_pipeline(args):
    overrides = _overrides(args)
    if args.adapt:
        overrides["adapt.enabled"] = "true"
    cfg = resolve_config(_read_config_file(args.config), overrides)
    report = run_pipeline(cfg, args.out_dir, jobs=args.jobs)
    if args.print_report:
        sys.stdout.write(report)


# --- parser ------------------------------------------------------------------


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: $VERIFKIT_SEED or 0)")


def _add_train_flags(parser):
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--minibatch", type=int, default=64)
    parser.add_argument("--segment-frames", type=int, default=200)
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--log", help="write per-epoch loss/accuracy to this file")
    _add_seed(parser)


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="verifkit",
        description="Speaker-verification toolkit: features, embeddings, "
                    "PLDA scoring, trials, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"verifkit {__version__}")
    parser.set_defaults(help_parser=parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    features = sub.add_parser("features", help="filterbank features and augmentation")
    features.set_defaults(help_parser=features)
    fsub = features.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    p = fsub.add_parser("extract", help="log-mel features for every recording")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--filters", type=int, default=40)
    p.add_argument("--frame-ms", type=float, default=25.0)
    p.add_argument("--shift-ms", type=float, default=10.0)
    p.add_argument("--low-hz", type=float, default=20.0)
    p.add_argument("--high-hz", type=float, default=None)
    p.add_argument("--no-mean-norm", action="store_true",
                   help="skip per-utterance mean subtraction")
    p.set_defaults(func=cmd_features_extract)
    p = fsub.add_parser("augment", help="double a corpus with noisy/reverberant copies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-manifest", required=True)
    _add_seed(p)
    p.set_defaults(func=cmd_features_augment)

    extractor = sub.add_parser("extractor", help="TDNN embedding extractor")
    extractor.set_defaults(help_parser=extractor)
    esub = extractor.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    p = esub.add_parser("train", help="train a speaker classifier from scratch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    _add_train_flags(p)
    p.set_defaults(func=cmd_extractor_train)
    p = esub.add_parser("finetune", help="retrain with a fresh head on new speakers")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head-seed", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_extractor_finetune)
    p = esub.add_parser("extract", help="one embedding per recording")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extractor_extract)

    plda = sub.add_parser("plda", help="two-covariance PLDA back end")
    plda.set_defaults(help_parser=plda)
    psub = plda.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    p = psub.add_parser("fit", help="fit preprocessor and PLDA on labeled embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-preproc", required=True)
    p.add_argument("--lda-dim", type=int, default=0)
    p.add_argument("--no-length-norm", action="store_true")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_plda_fit)
    p = psub.add_parser("adapt", help="shift the model toward unlabeled in-domain data")
    p.add_argument("--model", required=True)
    p.add_argument("--preproc", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-between", type=float, default=0.25)
    p.add_argument("--alpha-within", type=float, default=0.75)
    p.set_defaults(func=cmd_plda_adapt)
    p = psub.add_parser("score", help="score a trial list")
    p.add_argument("--model", required=True)
    p.add_argument("--preproc", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_plda_score)

    trials = sub.add_parser("trials", help="trial lists under attribute restrictions")
    trials.set_defaults(help_parser=trials)
    tsub = trials.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    p = tsub.add_parser("generate", help="write the trial stream")
    p.add_argument("--manifest", required=True)
    p.add_argument("--restrict", default="",
                   help="comma-separated: gender,l1,grade,grade-higher")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trials_generate)
    p = tsub.add_parser("count", help="count trials without materializing")
    p.add_argument("--manifest", required=True)
    p.add_argument("--restrict", default="")
    p.set_defaults(func=cmd_trials_count)

    evaluation = sub.add_parser("eval", help="EER, DET curves, breakdowns, fusion")
    evaluation.set_defaults(help_parser=evaluation)
    vsub = evaluation.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    p = vsub.add_parser("eer", help="equal error rate of a score file")
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_eval_eer)
    p = vsub.add_parser("det", help="DET curve of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_det)
    p = vsub.add_parser("breakdown", help="false-acceptance table by attribute")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--attribute", choices=("grade", "l1"), required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="default: the EER threshold of the score file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_breakdown)
    p = vsub.add_parser("fuse", help="linear score-level fusion")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--weight-a", type=float, default=0.7)
    p.add_argument("--weight-b", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_fuse)

    synth = sub.add_parser("synth", help="synthetic data with known ground truth")
    synth.set_defaults(help_parser=synth)
    ssub = synth.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    p = ssub.add_parser("plda", help="embeddings from the two-covariance model")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth_plda)
    p = ssub.add_parser("corpus", help="frame-level corpus with manifest")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--adapt", action="store_true",
                   help="adapt the PLDA model on a shifted-domain corpus")
    p.add_argument("--print-report", action="store_true",
                   help="echo the report to standard output")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
        return 1 if code == 2 else code
    if not hasattr(args, "func"):
        args.help_parser.print_help(sys.stderr)
        return 1
    try:
        return int(args.func(args) or 0)
    except NumericalError as exc:
        log("ERROR", "cli", str(exc))
        return 3
    except (DataError, OSError) as exc:
        log("ERROR", "cli", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
