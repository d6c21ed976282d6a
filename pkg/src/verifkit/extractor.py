"""TDNN speaker-embedding extractor.

Frame-level layers apply an affine map over a window of context frames
("valid" semantics: frames lacking full context are dropped). Statistics
pooling concatenates the per-dimension mean and standard deviation over
the surviving frames. Two segment-level affine+ReLU layers follow, then a
softmax speaker-classification head. The embedding is the pre-activation
affine output of one segment layer (the first, by default).

All arithmetic is 64-bit. Training is plain SGD with momentum, batched
over fixed-length crops, deterministic for a given seed.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import EmbeddingSet, read_matrix
from .errors import DataError, FormatError, NumericalError
from .validation import check_feature_matrix

VAR_FLOOR = 1e-10

RELU = "relu"
LINEAR = "none"

DESK_PRESET = "desk"
FULL_PRESET = "full"

STANDARD_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))

PRESETS = {
    DESK_PRESET: {"frame_widths": (32, 32, 32, 32, 96), "segment_widths": (24, 24)},
    FULL_PRESET: {"frame_widths": (512, 512, 512, 512, 1500), "segment_widths": (512, 512)},
}


class Layer:
    """One affine layer; frame layers carry context offsets.

    weight has shape (output_dim, len(offsets) * input_dim); the input is
    the concatenation of the context frames in offset order.
    """

    def __init__(self, weight, bias, context_offsets=None, nonlinearity=RELU):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if context_offsets is not None:
            offs = tuple(int(o) for o in context_offsets)
            if any(b <= a for a, b in zip(offs, offs[1:])):
                raise DataError(f"context offsets must be strictly increasing: {offs}")
            context_offsets = offs
        self.context_offsets = context_offsets
        if nonlinearity not in (RELU, LINEAR):
            raise DataError(f"unknown nonlinearity {nonlinearity!r}")
        self.nonlinearity = nonlinearity
        k = len(context_offsets) if context_offsets else 1
        if self.weight.ndim != 2 or self.weight.shape[1] % k:
            raise DataError(f"weight shape {self.weight.shape} incompatible with {k} offsets")
        if self.bias.shape != (self.weight.shape[0],):
            raise DataError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @property
    def output_dim(self):
        return self.weight.shape[0]

    @property
    def input_dim(self):
        k = len(self.context_offsets) if self.context_offsets else 1
        return self.weight.shape[1] // k

    @property
    def span(self):
        if not self.context_offsets:
            return 0
        return self.context_offsets[-1] - self.context_offsets[0]

    def copy(self):
        return Layer(self.weight.copy(), self.bias.copy(), self.context_offsets,
                     self.nonlinearity)


class ExtractorModel:
    def __init__(self, frame_layers, segment_layers, head, embedding_tap=0):
        self.frame_layers = list(frame_layers)
        self.segment_layers = list(segment_layers)
        self.head = head
        if not 0 <= embedding_tap < len(self.segment_layers):
            raise DataError(f"embedding_tap {embedding_tap} out of range")
        self.embedding_tap = int(embedding_tap)
        dims = [layer.input_dim for layer in self.frame_layers[1:]]
        for prev, want in zip(self.frame_layers, dims):
            if prev.output_dim != want:
                raise DataError("frame layer dimensions do not chain")
        pooled = 2 * self.frame_layers[-1].output_dim
        if self.segment_layers[0].input_dim != pooled:
            raise DataError(
                f"first segment layer expects {self.segment_layers[0].input_dim}, "
                f"pooling gives {pooled}"
            )

    @property
    def feature_dim(self):
        return self.frame_layers[0].input_dim

    @property
    def embedding_dim(self):
        return self.segment_layers[self.embedding_tap].output_dim

    @property
    def num_speakers(self):
        return self.head.output_dim

    def min_frames(self):
        """Smallest T the frame block can consume: total context span + 1."""
        return sum(layer.span for layer in self.frame_layers) + 1

    def copy(self):
        return ExtractorModel(
            [l.copy() for l in self.frame_layers],
            [l.copy() for l in self.segment_layers],
            self.head.copy(),
            self.embedding_tap,
        )

    def parameters(self):
        for layer in self.frame_layers + self.segment_layers + [self.head]:
            yield layer.weight
            yield layer.bias


def _init_weight(out_dim, in_dim, rng):
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def _fresh_head(num_speakers, in_dim, rng):
    if num_speakers < 2:
        raise DataError(f"need >= 2 speakers, got {num_speakers}")
    return Layer(_init_weight(num_speakers, in_dim, rng), np.zeros(num_speakers),
                 nonlinearity=LINEAR)


def build_extractor(feature_dim, num_speakers, preset=DESK_PRESET, contexts=STANDARD_CONTEXTS,
                    frame_widths=None, segment_widths=None, embedding_tap=0, rng_seed=0):
    """Initialize an extractor; weights uniform in ±sqrt(6/(fan_in+fan_out))."""
    if frame_widths is None or segment_widths is None:
        try:
            chosen = PRESETS[preset]
        except KeyError:
            raise DataError(f"unknown preset {preset!r}") from None
        frame_widths = frame_widths or chosen["frame_widths"]
        segment_widths = segment_widths or chosen["segment_widths"]
    if len(contexts) != len(frame_widths):
        raise DataError(f"{len(contexts)} context lists for {len(frame_widths)} frame layers")
    rng = np.random.default_rng(rng_seed)
    frame_layers = []
    in_dim = int(feature_dim)
    for offsets, width in zip(contexts, frame_widths):
        k = len(offsets)
        frame_layers.append(
            Layer(_init_weight(width, k * in_dim, rng), np.zeros(width),
                  context_offsets=offsets)
        )
        in_dim = width
    segment_layers = []
    in_dim = 2 * in_dim
    for width in segment_widths:
        segment_layers.append(Layer(_init_weight(width, in_dim, rng), np.zeros(width)))
        in_dim = width
    head = _fresh_head(num_speakers, in_dim, rng)
    return ExtractorModel(frame_layers, segment_layers, head, embedding_tap)


def _context_expand(h, offsets):
    span = offsets[-1] - offsets[0]
    t_out = h.shape[0] - span
    if t_out < 1:
        raise DataError(f"{h.shape[0]} frames, need > {span} for context {offsets}")
    base = -offsets[0]
    return np.concatenate([h[base + o : base + o + t_out] for o in offsets], axis=1)


def _pool_stats(h):
    """Mean and floored population variance per column.

    Columns are sorted before summing so the result is exactly invariant
    to frame order (summation order is fixed by value, not position).
    """
    mu = np.sort(h, axis=0).mean(axis=0)
    var_raw = np.sort(h * h, axis=0).mean(axis=0) - mu * mu
    var = np.maximum(var_raw, VAR_FLOOR)
    return mu, var_raw, np.sqrt(var)


def stats_pool(h):
    """Concatenate per-dimension mean and population std over frames."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise DataError(f"stats_pool needs (T, F) with T >= 1, got {h.shape}")
    mu, _, sig = _pool_stats(h)
    return np.concatenate([mu, sig])


def _forward_cached(model, features):
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.feature_dim:
        raise DataError(f"features shape {feats.shape}, expected (T, {model.feature_dim})")
    frame_cache = []
    h = feats
    for layer in model.frame_layers:
        x = _context_expand(h, layer.context_offsets)
        z = x @ layer.weight.T + layer.bias
        out = np.maximum(z, 0.0) if layer.nonlinearity == RELU else z
        frame_cache.append((h.shape[0], x, z))
        h = out
    t_pool = h.shape[0]
    mu, var_raw, sig = _pool_stats(h)
    pooled = np.concatenate([mu, sig])
    seg_cache = []
    v = pooled
    embedding = None
    for i, layer in enumerate(model.segment_layers):
        a = layer.weight @ v + layer.bias
        if i == model.embedding_tap:
            embedding = a
        out = np.maximum(a, 0.0) if layer.nonlinearity == RELU else a
        seg_cache.append((v, a))
        v = out
    logits = model.head.weight @ v + model.head.bias
    cache = {
        "frame": frame_cache,
        "frames_out": h,
        "t_pool": t_pool,
        "mu": mu,
        "var_raw": var_raw,
        "sig": sig,
        "segment": seg_cache,
        "head_in": v,
    }
    return logits, embedding, cache


def forward(model, features):
    """Run the net on one recording; returns (logits, embedding)."""
    logits, embedding, _ = _forward_cached(model, features)
    return logits, embedding


def embed(model, features):
    return forward(model, features)[1]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_loss(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if labels.size != logits.shape[0]:
        raise DataError(f"{labels.size} labels for {logits.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label out of range [0, {logits.shape[1]})")
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def _zero_grads(model):
    return [np.zeros_like(p) for p in model.parameters()]


def loss_and_gradients(model, features_list, labels):
    """Batch-mean cross-entropy loss, gradients, and correct-count.

    Gradients come back as a flat list matching model.parameters() order.
    """
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if len(features_list) != labels.size or not len(features_list):
        raise DataError("batch features and labels must be non-empty and parallel")
    if labels.min() < 0 or labels.max() >= model.num_speakers:
        raise DataError(f"label out of range [0, {model.num_speakers})")
    grads = _zero_grads(model)
    n_frame = len(model.frame_layers)
    n_seg = len(model.segment_layers)
    batch = len(features_list)
    total_loss = 0.0
    correct = 0
    for feats, label in zip(features_list, labels):
        logits, _, cache = _forward_cached(model, feats)
        logp = _log_softmax(logits)
        total_loss += -float(logp[label])
        if int(np.argmax(logits)) == label:
            correct += 1
        scale = 1.0 / batch
        d_logits = np.exp(logp)
        d_logits[label] -= 1.0
        d_logits *= scale
        grads[2 * (n_frame + n_seg)] += np.outer(d_logits, cache["head_in"])
        grads[2 * (n_frame + n_seg) + 1] += d_logits
        d_vec = model.head.weight.T @ d_logits
        for i in range(n_seg - 1, -1, -1):
            layer = model.segment_layers[i]
            v_in, a = cache["segment"][i]
            d_a = d_vec * (a > 0.0) if layer.nonlinearity == RELU else d_vec
            grads[2 * (n_frame + i)] += np.outer(d_a, v_in)
            grads[2 * (n_frame + i) + 1] += d_a
            d_vec = layer.weight.T @ d_a
        f_dim = model.frame_layers[-1].output_dim
        d_mu = d_vec[:f_dim]
        d_sig = d_vec[f_dim:]
        sig = cache["sig"]
        d_var = np.where(cache["var_raw"] > VAR_FLOOR, d_sig / (2.0 * sig), 0.0)
        h_out = cache["frames_out"]
        t_pool = cache["t_pool"]
        d_h = (d_mu - 2.0 * cache["mu"] * d_var) / t_pool + h_out * (2.0 * d_var / t_pool)
        for i in range(n_frame - 1, -1, -1):
            layer = model.frame_layers[i]
            t_in, x, z = cache["frame"][i]
            d_z = d_h * (z > 0.0) if layer.nonlinearity == RELU else d_h
            grads[2 * i] += d_z.T @ x
            grads[2 * i + 1] += d_z.sum(axis=0)
            d_x = d_z @ layer.weight
            in_dim = layer.input_dim
            d_prev = np.zeros((t_in, in_dim))
            base = -layer.context_offsets[0]
            t_out = d_z.shape[0]
            for j, off in enumerate(layer.context_offsets):
                d_prev[base + off : base + off + t_out] += d_x[:, j * in_dim : (j + 1) * in_dim]
            d_h = d_prev
    return total_loss / batch, grads, correct


def batch_loss(model, features_list, labels):
    logits = np.stack([_forward_cached(model, f)[0] for f in features_list])
    return ce_loss(logits, labels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    minibatch_size: int = 64
    segment_frames: int = 200
    epochs: int = 5
    rng_seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0 or self.minibatch_size < 1 or self.segment_frames < 1:
            raise DataError("learning rate, batch size and segment length must be positive")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise DataError(f"momentum must be in [0, 1), got {self.momentum}")


def _crop(feats, n_frames, rng):
    t = feats.shape[0]
    if t == n_frames:
        return feats
    if t > n_frames:
        start = int(rng.integers(t - n_frames + 1))
        return feats[start : start + n_frames]
    reps = -(-n_frames // t)
    return np.tile(feats, (reps, 1))[:n_frames]


def train_on_features(model, features_list, labels, cfg):
    """SGD-with-momentum training over fixed-length crops, in place.

    Returns the per-epoch log as a list of (epoch, mean loss, accuracy).
    """
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if len(set(labels.tolist())) < 2:
        raise DataError("training needs >= 2 distinct speakers")
    feats = [np.asarray(f, dtype=np.float64) for f in features_list]
    min_t = model.min_frames()
    for i, f in enumerate(feats):
        if f.shape[0] < min_t:
            raise DataError(f"example {i} has {f.shape[0]} frames, need >= {min_t}")
    seg_frames = max(cfg.segment_frames, min_t)
    rng = np.random.default_rng(cfg.rng_seed)
    params = list(model.parameters())
    velocity = [np.zeros_like(p) for p in params]
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(feats))
        crops = [_crop(feats[i], seg_frames, rng) for i in order]
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, len(order), cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            batch = crops[start : start + cfg.minibatch_size]
            loss, grads, correct = loss_and_gradients(model, batch, labels[idx])
            if not np.isfinite(loss):
                norms = [float(np.linalg.norm(p)) for p in params]
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.minibatch_size}; "
                    f"parameter norms {norms}"
                )
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
            epoch_loss += loss * len(batch)
            epoch_correct += correct
        log.append((epoch, epoch_loss / len(feats), epoch_correct / len(feats)))
    return log


def _load_training_set(manifest, features_dir):
    speakers = sorted({r.speaker_id for r in manifest.recordings})
    if len(speakers) < 2:
        raise DataError(f"training needs >= 2 speakers, manifest has {len(speakers)}")
    with_recs = {r.speaker_id for r in manifest.recordings}
    missing = [s.speaker_id for s in manifest.speakers if s.speaker_id not in with_recs]
    if missing:
        raise DataError(f"speakers with no recordings: {missing}")
    index = {s: i for i, s in enumerate(speakers)}
    feats = []
    labels = []
    for rec in manifest.recordings:
        feats.append(read_matrix(os.path.join(features_dir, f"{rec.recording_id}.svm")))
        labels.append(index[rec.speaker_id])
    return feats, labels, speakers


def train(model, manifest, features_dir, cfg):
    """Train in place from per-recording feature files; returns the loss log.

    Speaker label order is the sorted speaker id list; the head must have
    been built with matching size.
    """
    feats, labels, speakers = _load_training_set(manifest, features_dir)
    if model.num_speakers != len(speakers):
        raise DataError(f"head has {model.num_speakers} outputs for {len(speakers)} speakers")
    return train_on_features(model, feats, labels, cfg)


def fine_tune(model, manifest, features_dir, cfg, head_seed=None):
    """Re-initialize the classification head for the new speaker set, then
    train all layers on the new data. Returns (new model, training log);
    the source model is untouched. embedding_tap carries over.
    """
    feats, labels, speakers = _load_training_set(manifest, features_dir)
    tuned = model.copy()
    seed = cfg.rng_seed if head_seed is None else head_seed
    rng = np.random.default_rng(seed)
    tuned.head = _fresh_head(len(speakers), tuned.segment_layers[-1].output_dim, rng)
    log = train_on_features(tuned, feats, labels, cfg)
    return tuned, log


def extract_embeddings(model, manifest, features_dir):
    """One embedding per recording; ids are recording ids.

    Recordings too short for the context span are skipped; returns
    (EmbeddingSet, skipped) where skipped lists (recording_id, reason).
    """
    ids = []
    vectors = []
    skipped = []
    min_t = model.min_frames()
    for rec in manifest.recordings:
        feats = read_matrix(os.path.join(features_dir, f"{rec.recording_id}.svm"))
        if feats.shape[1] != model.feature_dim:
            raise DataError(
                f"{rec.recording_id}: feature dim {feats.shape[1]} != model {model.feature_dim}"
            )
        if feats.shape[0] < min_t:
            skipped.append((rec.recording_id, f"{feats.shape[0]} frames < {min_t}"))
            continue
        ids.append(rec.recording_id)
        vectors.append(embed(model, feats))
    if not ids:
        raise DataError("no recording long enough to embed")
    return EmbeddingSet(ids=tuple(ids), vectors=np.stack(vectors)), skipped


_X_MAGIC = b"SVX1"
_U32 = struct.Struct("<I")
_I32 = struct.Struct("<i")


def _write_array(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh, shape, path):
    count = int(np.prod(shape))
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise FormatError(f"{path}: truncated weights")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def _write_layer(fh, layer):
    offsets = layer.context_offsets or ()
    fh.write(_U32.pack(len(offsets)))
    for off in offsets:
        fh.write(_I32.pack(off))
    fh.write(_U32.pack(layer.input_dim))
    fh.write(_U32.pack(layer.output_dim))
    fh.write(_U32.pack(1 if layer.nonlinearity == RELU else 0))
    _write_array(fh, layer.weight)
    _write_array(fh, layer.bias)


def _read_u32(fh, path, signed=False):
    fmt = _I32 if signed else _U32
    raw = fh.read(fmt.size)
    if len(raw) != fmt.size:
        raise FormatError(f"{path}: truncated header field")
    return fmt.unpack(raw)[0]


def _read_layer(fh, path, frame_layer):
    k = _read_u32(fh, path)
    offsets = [_read_u32(fh, path, signed=True) for _ in range(k)]
    in_dim = _read_u32(fh, path)
    out_dim = _read_u32(fh, path)
    nonlin = _read_u32(fh, path)
    width = max(k, 1) * in_dim
    weight = _read_array(fh, (out_dim, width), path)
    bias = _read_array(fh, (out_dim,), path)
    return Layer(
        weight,
        bias,
        context_offsets=tuple(offsets) if frame_layer else None,
        nonlinearity=RELU if nonlin else LINEAR,
    )


def write_extractor(path, model):
    with open(path, "wb") as fh:
        fh.write(_X_MAGIC)
        fh.write(_U32.pack(len(model.frame_layers)))
        for layer in model.frame_layers:
            _write_layer(fh, layer)
        fh.write(_U32.pack(len(model.segment_layers)))
        for layer in model.segment_layers:
            _write_layer(fh, layer)
        _write_layer(fh, model.head)
        fh.write(_U32.pack(model.embedding_tap))


def read_extractor(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _X_MAGIC:
            raise FormatError(f"{path}: not an extractor file")
        n_frame = _read_u32(fh, path)
        frame_layers = [_read_layer(fh, path, True) for _ in range(n_frame)]
        n_seg = _read_u32(fh, path)
        segment_layers = [_read_layer(fh, path, False) for _ in range(n_seg)]
        head = _read_layer(fh, path, False)
        tap = _read_u32(fh, path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return ExtractorModel(frame_layers, segment_layers, head, tap)


class TdnnEmbedder(BaseEstimator, TransformerMixin):
    """Estimator wrapper: fit on (feature matrices, speaker labels), then
    transform feature matrices to embeddings.

    With warm_start=True a second fit continues training the existing
    network instead of re-initializing (the label set must not change).
    """

    def __init__(self, preset=DESK_PRESET, learning_rate=1e-3, minibatch_size=64,
                 segment_frames=200, epochs=5, momentum=0.9, seed=0, warm_start=False):
        self.preset = preset
        self.learning_rate = learning_rate
        self.minibatch_size = minibatch_size
        self.segment_frames = segment_frames
        self.epochs = epochs
        self.momentum = momentum
        self.seed = seed
        self.warm_start = warm_start

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            minibatch_size=self.minibatch_size,
            segment_frames=self.segment_frames,
            epochs=self.epochs,
            rng_seed=self.seed,
            momentum=self.momentum,
        )

    def fit(self, X, y):
        feats = [check_feature_matrix(x, name=f"X[{i}]") for i, x in enumerate(X)]
        if len(feats) != len(y):
            raise DataError(f"{len(feats)} feature matrices for {len(y)} labels")
        classes, labels = np.unique(np.asarray(y), return_inverse=True)
        if hasattr(self, "model_") and self.warm_start:
            if not np.array_equal(classes, self.classes_):
                raise DataError("warm_start requires an unchanged label set")
        else:
            self.classes_ = classes
            self.model_ = build_extractor(
                feature_dim=feats[0].shape[1],
                num_speakers=len(classes),
                preset=self.preset,
                rng_seed=self.seed,
            )
            self.loss_log_ = []
        self.loss_log_ = list(self.loss_log_) + train_on_features(
            self.model_, feats, labels, self._train_config()
        )
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise DataError("embedder is not fitted")
        feats = [check_feature_matrix(x, name=f"X[{i}]") for i, x in enumerate(X)]
        return np.stack([embed(self.model_, f) for f in feats])

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise DataError("embedder is not fitted")
        feats = [check_feature_matrix(x, name=f"X[{i}]") for i, x in enumerate(X)]
        picks = [int(np.argmax(forward(self.model_, f)[0])) for f in feats]
        return self.classes_[picks]
