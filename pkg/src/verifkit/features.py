"""Log-mel filterbank front end and waveform-level data augmentation.

Audio lives on disk as headerless little-endian float32 mono; the sample
rate rides along in the manifest path suffix ``@<rate>``.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .core import Manifest, RecordingRecord
from .errors import DataError

ENERGY_FLOOR = 1e-10
_LOG_1000 = 6.9078  # ln(10^3): 60 dB of amplitude decay


@dataclass(frozen=True)
class AudioSignal:
    sample_rate: int
    samples: np.ndarray  # float32, values in [-1, 1]

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        x = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float32))
        if x.ndim != 1 or x.size == 0:
            raise DataError("audio must be a non-empty 1-D sample vector")
        if not np.isfinite(x).all():
            raise DataError("audio contains non-finite samples")
        if float(np.max(np.abs(x))) > 1.0:
            raise DataError("audio samples exceed [-1, 1]")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def split_audio_path(path):
    """Split a manifest audio path into (file path, rate or None)."""
    text = str(path)
    base, sep, rate = text.rpartition("@")
    if sep and rate.isdigit():
        return base, int(rate)
    return text, None


def resolve_audio_path(root, source_path):
    real, rate = split_audio_path(source_path)
    if not os.path.isabs(real):
        real = os.path.join(root, real)
    return real if rate is None else f"{real}@{rate}"


def read_audio(path, sample_rate=None):
    """Read raw float32 audio; rate comes from the @suffix unless given."""
    real, rate = split_audio_path(path)
    if sample_rate is not None:
        rate = int(sample_rate)
    if rate is None:
        raise DataError(f"{path}: sample rate unknown (expected '@<rate>' suffix)")
    with open(real, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataError(f"{real}: empty audio file")
    if len(raw) % 4:
        raise DataError(f"{real}: size {len(raw)} is not a multiple of 4 bytes")
    return AudioSignal(sample_rate=rate, samples=np.frombuffer(raw, dtype="<f4").copy())


def write_audio(path, signal):
    real, rate = split_audio_path(path)
    if rate is not None and rate != signal.sample_rate:
        raise DataError(f"{path}: suffix rate {rate} != signal rate {signal.sample_rate}")
    with open(real, "wb") as fh:
        fh.write(np.ascontiguousarray(signal.samples, dtype="<f4").tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class FbankConfig:
    """Filterbank parameters; fft_size None picks the next power of two."""

    num_filters: int = 40
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = None
    low_hz: float = 20.0
    high_hz: float = None  # None: Nyquist

    def __post_init__(self):
        if self.num_filters < 1:
            raise DataError("num_filters must be >= 1")
        if self.frame_length_ms <= 0 or self.frame_shift_ms <= 0:
            raise DataError("frame length and shift must be positive")
        if self.frame_length_ms < self.frame_shift_ms:
            raise DataError("frame length must be >= frame shift")
        if self.fft_size is not None and (
            self.fft_size < 1 or self.fft_size & (self.fft_size - 1)
        ):
            raise DataError(f"fft_size must be a power of two, got {self.fft_size}")

    def frame_samples(self, sample_rate):
        return int(round(sample_rate * self.frame_length_ms / 1000.0))

    def shift_samples(self, sample_rate):
        return int(round(sample_rate * self.frame_shift_ms / 1000.0))

    def effective_fft_size(self, sample_rate):
        frame = self.frame_samples(sample_rate)
        if self.fft_size is not None:
            if self.fft_size < frame:
                raise DataError(f"fft_size {self.fft_size} < frame of {frame} samples")
            return self.fft_size
        return 1 << (frame - 1).bit_length()


def mel_filterbank(sample_rate, fft_size, num_filters, low_hz, high_hz=None):
    """Triangular mel filters sampled at FFT bin centre frequencies.

    Returns a (num_filters, fft_size//2 + 1) weight matrix.
    """
    nyquist = sample_rate / 2.0
    high = nyquist if high_hz is None else float(high_hz)
    if not (0.0 <= low_hz < high <= nyquist):
        raise DataError(f"cutoffs ({low_hz}, {high}) outside (0, Nyquist={nyquist})")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high), num_filters + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    lo = edges_hz[:-2, None]
    ctr = edges_hz[1:-1, None]
    hi = edges_hz[2:, None]
    rising = (bin_hz - lo) / (ctr - lo)
    falling = (hi - bin_hz) / (hi - ctr)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_energies(signal, cfg=None):
    """Natural-log mel filterbank energies, floored at 1e-10, no mean norm.

    One row per frame: T = 1 + floor((len - frame) / shift).
    """
    cfg = cfg if cfg is not None else FbankConfig()
    frame = cfg.frame_samples(signal.sample_rate)
    shift = cfg.shift_samples(signal.sample_rate)
    x = signal.samples.astype(np.float64)
    if x.size < frame:
        raise DataError(f"signal of {x.size} samples shorter than one {frame}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::shift]
    windowed = frames * np.hamming(frame)
    nfft = cfg.effective_fft_size(signal.sample_rate)
    power = np.abs(np.fft.rfft(windowed, n=nfft, axis=1)) ** 2
    fbank = mel_filterbank(signal.sample_rate, nfft, cfg.num_filters, cfg.low_hz, cfg.high_hz)
    return np.log(np.maximum(power @ fbank.T, ENERGY_FLOOR))


def extract_fbank(signal, cfg=None):
    """Log-mel features with per-utterance, per-coefficient mean subtraction."""
    feats = mel_energies(signal, cfg)
    return feats - feats.mean(axis=0)


class AugmentKind:
    BABBLE = "babble"
    MUSIC = "music"
    NOISE = "noise"
    REVERB = "reverb"

    ALL = (BABBLE, MUSIC, NOISE, REVERB)
    ADDITIVE = (BABBLE, MUSIC, NOISE)


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    snr_db: float = None
    rt60: float = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in AugmentKind.ALL:
            raise DataError(f"unknown augmentation kind {self.kind!r}")
        if self.kind in AugmentKind.ADDITIVE:
            if self.snr_db is None or not math.isfinite(self.snr_db):
                raise DataError(f"{self.kind} requires a finite snr_db, got {self.snr_db}")
        else:
            if self.rt60 is None or not self.rt60 > 0:
                raise DataError(f"reverb requires rt60 > 0, got {self.rt60}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise DataError(f"bad rng_seed {self.rng_seed}")


def _fit_length(x, n):
    if x.size >= n:
        return x[:n]
    reps = -(-n // x.size)
    return np.tile(x, reps)[:n]


def _impulse_response(rt60, sample_rate, rng):
    length = max(2, int(round(rt60 * sample_rate)))
    t = np.arange(length) / sample_rate
    h = np.exp(-_LOG_1000 * t / rt60) * rng.standard_normal(length) * 0.3
    h[0] = 1.0  # direct path
    return h


def augment(signal, spec, interferers=()):
    """Corrupt a waveform per spec; deterministic given spec.rng_seed.

    Additive kinds mix interferers at the requested signal-to-interference
    ratio and preserve length; reverb convolves with a synthetic decaying
    impulse response and extends the signal by the tail. Output peak is
    renormalized to at most 1.
    """
    rng = np.random.default_rng(spec.rng_seed)
    x = signal.samples.astype(np.float64)
    if spec.kind == AugmentKind.REVERB:
        out = np.convolve(x, _impulse_response(spec.rt60, signal.sample_rate, rng))
    else:
        need = 3 if spec.kind == AugmentKind.BABBLE else 1
        if len(interferers) < need:
            raise DataError(f"{spec.kind} needs >= {need} interferers, got {len(interferers)}")
        p_sig = float(np.mean(x * x))
        if p_sig <= 0.0:
            raise DataError("zero-power input signal")
        mix = np.zeros_like(x)
        for itf in interferers:
            if itf.sample_rate != signal.sample_rate:
                raise DataError(
                    f"interferer rate {itf.sample_rate} != signal rate {signal.sample_rate}"
                )
            mix += _fit_length(itf.samples.astype(np.float64), x.size)
        p_mix = float(np.mean(mix * mix))
        if p_mix <= 0.0:
            raise DataError("zero-power interference")
        gain = math.sqrt(p_sig / (p_mix * 10.0 ** (spec.snr_db / 10.0)))
        out = x + gain * mix
    peak = float(np.max(np.abs(out)))
    if peak > 1.0:
        out = out / peak
    return AudioSignal(sample_rate=signal.sample_rate, samples=out.astype(np.float32))


@dataclass(frozen=True)
class AugmentPolicy:
    kinds: tuple = AugmentKind.ALL
    snr_range_db: tuple = (0.0, 15.0)
    rt60_range_s: tuple = (0.2, 0.6)


def draw_augment_specs(n, policy=None, rng_seed=0):
    """Draw n specs with uniformly random kind; child seeds are independent."""
    policy = policy if policy is not None else AugmentPolicy()
    rng = np.random.default_rng(rng_seed)
    specs = []
    for _ in range(n):
        kind = policy.kinds[int(rng.integers(len(policy.kinds)))]
        child_seed = int(rng.integers(2**32))
        if kind == AugmentKind.REVERB:
            specs.append(
                AugmentSpec(kind=kind, rt60=float(rng.uniform(*policy.rt60_range_s)),
                            rng_seed=child_seed)
            )
        else:
            specs.append(
                AugmentSpec(kind=kind, snr_db=float(rng.uniform(*policy.snr_range_db)),
                            rng_seed=child_seed)
            )
    return specs


def white_noise(n_samples, rng, amplitude=0.05):
    return np.clip(rng.standard_normal(n_samples) * amplitude, -1.0, 1.0).astype(np.float32)


def _hum(n_samples, sample_rate, rng):
    """Harmonic hum standing in for a music interferer."""
    t = np.arange(n_samples) / sample_rate
    f0 = rng.uniform(80.0, 400.0)
    tone = np.zeros(n_samples)
    for k, amp in enumerate([1.0, 0.5, 0.25], start=1):
        tone += amp * np.sin(2.0 * np.pi * f0 * k * t + rng.uniform(0.0, 2.0 * np.pi))
    return (0.5 * tone / np.max(np.abs(tone))).astype(np.float32)


def _make_interferers(spec, signal, recording_id, manifest, root):
    rng = np.random.default_rng(spec.rng_seed)
    n = len(signal)
    if spec.kind == AugmentKind.NOISE:
        return [AudioSignal(signal.sample_rate, white_noise(n, rng))]
    if spec.kind == AugmentKind.MUSIC:
        return [AudioSignal(signal.sample_rate, _hum(n, signal.sample_rate, rng))]
    if spec.kind == AugmentKind.BABBLE:
        pool = [r for r in manifest.recordings if r.recording_id != recording_id]
        if not pool:
            return [AudioSignal(signal.sample_rate, white_noise(n, rng)) for _ in range(3)]
        picks = rng.integers(len(pool), size=3)
        return [
            read_audio(resolve_audio_path(root, pool[int(i)].source_path)) for i in picks
        ]
    return []


def double_corpus(manifest, root, out_dir, policy=None, rng_seed=0):
    """Add one augmented copy of every recording, ids suffixed "-aug".

    Returns (new manifest, failures) where failures is a list of
    (recording_id, reason); per-recording I/O problems are collected
    rather than fatal.
    """
    os.makedirs(out_dir, exist_ok=True)
    specs = draw_augment_specs(len(manifest.recordings), policy, rng_seed)
    new_recordings = list(manifest.recordings)
    failures = []
    for rec, spec in zip(manifest.recordings, specs):
        try:
            signal = read_audio(resolve_audio_path(root, rec.source_path))
            interferers = _make_interferers(spec, signal, rec.recording_id, manifest, root)
            augmented = augment(signal, spec, interferers)
            out_path = os.path.join(out_dir, f"{rec.recording_id}-aug.raw")
            write_audio(out_path, augmented)
            try:
                stored = os.path.relpath(out_path, root)
            except ValueError:
                stored = out_path
            new_recordings.append(
                RecordingRecord(
                    recording_id=f"{rec.recording_id}-aug",
                    speaker_id=rec.speaker_id,
                    section=rec.section,
                    source_path=f"{stored}@{augmented.sample_rate}",
                )
            )
        except (OSError, DataError) as exc:
            failures.append((rec.recording_id, str(exc)))
    return Manifest(speakers=manifest.speakers, recordings=tuple(new_recordings)), failures
