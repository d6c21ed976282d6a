import math

import numpy as np
import pytest

from verifkit.core import parse_manifest, write_matrix
from verifkit.errors import DataError
from verifkit.extractor import (
    LINEAR,
    RELU,
    ExtractorModel,
    Layer,
    TdnnEmbedder,
    TrainConfig,
    batch_loss,
    build_extractor,
    ce_loss,
    embed,
    extract_embeddings,
    fine_tune,
    forward,
    loss_and_gradients,
    read_extractor,
    stats_pool,
    train,
    train_on_features,
    write_extractor,
)


def small_model(seed=0, feature_dim=4, num_speakers=3):
    return build_extractor(
        feature_dim=feature_dim,
        num_speakers=num_speakers,
        contexts=((-1, 0, 1), (-2, 0, 2)),
        frame_widths=(6, 5),
        segment_widths=(4, 4),
        rng_seed=seed,
    )


def naive_forward(model, feats):
    """Per-frame loop reference implementation."""
    h = np.asarray(feats, dtype=np.float64)
    for layer in model.frame_layers:
        offs = layer.context_offsets
        base = -offs[0]
        rows = []
        for t in range(h.shape[0] - (offs[-1] - offs[0])):
            ctx = np.concatenate([h[t + base + o] for o in offs])
            rows.append(layer.weight @ ctx + layer.bias)
        z = np.stack(rows)
        h = np.maximum(z, 0.0) if layer.nonlinearity == RELU else z
    mu = h.mean(axis=0)
    var = np.maximum((h * h).mean(axis=0) - mu * mu, 1e-10)
    v = np.concatenate([mu, np.sqrt(var)])
    embedding = None
    for i, layer in enumerate(model.segment_layers):
        a = layer.weight @ v + layer.bias
        if i == model.embedding_tap:
            embedding = a
        v = np.maximum(a, 0.0) if layer.nonlinearity == RELU else a
    return model.head.weight @ v + model.head.bias, embedding


def max_grad_rel_error(model, feats_list, labels, step=1e-5):
    _, grads, _ = loss_and_gradients(model, feats_list, labels)
    worst = 0.0
    for param, grad in zip(model.parameters(), grads):
        flat = param.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = batch_loss(model, feats_list, labels)
            flat[i] = orig - step
            down = batch_loss(model, feats_list, labels)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


class TestStatsPool:
    def test_two_point(self):
        out = stats_pool(np.array([[1.0, 3.0], [3.0, 5.0]]))
        np.testing.assert_allclose(out, [2.0, 4.0, 1.0, 1.0], atol=1e-15)

    def test_single_frame(self):
        out = stats_pool(np.array([[2.5, -1.0]]))
        np.testing.assert_allclose(out, [2.5, -1.0, 1e-5, 1e-5], atol=1e-18)

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal((100, 5))
        out = stats_pool(h)
        mu = np.array([np.mean(h[:, j]) for j in range(5)])
        sd = np.array([np.sqrt(np.mean((h[:, j] - mu[j]) ** 2)) for j in range(5)])
        np.testing.assert_allclose(out, np.concatenate([mu, sd]), atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((30, 4))
        a = stats_pool(h)
        b = stats_pool(h[rng.permutation(30)])
        assert np.array_equal(a, b)


class TestForward:
    def test_zero_weights_uniform_softmax(self):
        model = small_model()
        for p in model.parameters():
            p[...] = 0.0
        logits, _ = forward(model, np.random.default_rng(2).standard_normal((12, 4)))
        np.testing.assert_allclose(logits, logits[0], atol=0)

    def test_single_pointwise_layer_is_affine_of_stats(self):
        rng = np.random.default_rng(3)
        model = build_extractor(
            feature_dim=3, num_speakers=2, contexts=((0,),),
            frame_widths=(3,), segment_widths=(4,), rng_seed=4,
        )
        model.frame_layers[0].weight[...] = np.eye(3)
        model.frame_layers[0].nonlinearity = LINEAR
        feats = rng.standard_normal((10, 3)) + 5.0
        _, emb = forward(model, feats)
        seg = model.segment_layers[0]
        np.testing.assert_allclose(emb, seg.weight @ stats_pool(feats) + seg.bias, atol=1e-12)

    def test_naive_loop_oracle(self):
        rng = np.random.default_rng(5)
        model = small_model(seed=6)
        for _ in range(5):
            feats = rng.standard_normal((int(rng.integers(7, 25)), 4))
            logits, emb = forward(model, feats)
            ref_logits, ref_emb = naive_forward(model, feats)
            np.testing.assert_allclose(logits, ref_logits, atol=1e-10)
            np.testing.assert_allclose(emb, ref_emb, atol=1e-10)

    def test_too_few_frames(self):
        model = small_model()
        with pytest.raises(DataError, match="frames"):
            forward(model, np.zeros((model.min_frames() - 1, 4)))

    def test_scale_covariance_linear_config(self):
        rng = np.random.default_rng(7)
        model = build_extractor(
            feature_dim=3, num_speakers=2, contexts=((-1, 0, 1),),
            frame_widths=(4,), segment_widths=(3,), rng_seed=8,
        )
        for layer in model.frame_layers + model.segment_layers:
            layer.nonlinearity = LINEAR
            layer.bias[...] = 0.0
        feats = rng.standard_normal((15, 3))
        e1 = embed(model, feats)
        e3 = embed(model, 3.0 * feats)
        np.testing.assert_allclose(e3, 3.0 * e1, rtol=1e-10)


class TestCeLoss:
    def test_uniform(self):
        assert abs(ce_loss(np.zeros((4, 7)), [0, 3, 5, 6]) - math.log(7)) < 1e-12

    def test_saturated(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert ce_loss(logits, [0]) < 1e-20

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((8, 5)) * 3.0
        labels = rng.integers(5, size=8)
        expected = np.mean(
            [np.log(np.exp(row).sum()) - row[lab] for row, lab in zip(logits, labels)]
        )
        assert abs(ce_loss(logits, labels) - expected) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(DataError, match="range"):
            ce_loss(np.zeros((2, 3)), [0, 3])


class TestGradients:
    def test_small_model_gradient_check(self):
        rng = np.random.default_rng(10)
        model = small_model(seed=11)
        feats = [rng.standard_normal((12, 4)), rng.standard_normal((12, 4))]
        assert max_grad_rel_error(model, feats, [0, 2]) <= 1e-4

    def test_gradient_check_after_a_few_updates(self):
        # exercise the sigma branch away from initialization
        rng = np.random.default_rng(12)
        model = small_model(seed=13)
        feats = [rng.standard_normal((14, 4)) for _ in range(6)]
        labels = [0, 1, 2, 0, 1, 2]
        train_on_features(model, feats, labels,
                          TrainConfig(epochs=2, minibatch_size=3, segment_frames=12, rng_seed=1))
        assert max_grad_rel_error(model, feats[:2], labels[:2]) <= 1e-4


def separable_corpus(rng, n_speakers=6, recs_per=5, frames=30, dim=6, rho=6.0):
    feats = []
    labels = []
    for s in range(n_speakers):
        archetype = rng.standard_normal(dim)
        archetype *= rho / np.linalg.norm(archetype)
        for _ in range(recs_per):
            feats.append(archetype + rng.standard_normal((frames, dim)))
            labels.append(s)
    return feats, labels


class TestTraining:
    def cfg(self, **kw):
        base = dict(learning_rate=0.01, minibatch_size=8, segment_frames=25,
                    epochs=5, rng_seed=3)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_epochs_no_change(self):
        rng = np.random.default_rng(14)
        model = small_model(seed=15, feature_dim=6, num_speakers=6)
        before = [p.copy() for p in model.parameters()]
        feats, labels = separable_corpus(rng)
        train_on_features(model, feats, labels, self.cfg(epochs=0))
        for a, b in zip(before, model.parameters()):
            assert np.array_equal(a, b)

    def test_same_seed_bitwise_identical(self):
        rng = np.random.default_rng(16)
        feats, labels = separable_corpus(rng)
        runs = []
        for _ in range(2):
            model = small_model(seed=17, feature_dim=6, num_speakers=6)
            train_on_features(model, feats, labels, self.cfg())
            runs.append([p.copy() for p in model.parameters()])
        for a, b in zip(*runs):
            assert np.array_equal(a, b)

    def test_loss_decreases_on_separable_corpus(self):
        rng = np.random.default_rng(18)
        feats, labels = separable_corpus(rng)
        model = small_model(seed=19, feature_dim=6, num_speakers=6)
        log = train_on_features(model, feats, labels, self.cfg(epochs=6))
        losses = [row[1] for row in log]
        violations = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
        assert violations <= 1
        assert losses[-1] < losses[0]

    def test_single_speaker_rejected(self):
        rng = np.random.default_rng(20)
        feats = [rng.standard_normal((20, 4)) for _ in range(3)]
        with pytest.raises(DataError, match="2 distinct speakers"):
            train_on_features(small_model(), feats, [0, 0, 0], self.cfg())


class TestFineTune:
    def write_corpus(self, tmp_path, rng, n_speakers=4, recs_per=3, dim=6):
        lines = []
        feats, labels = separable_corpus(rng, n_speakers, recs_per, dim=dim)
        idx = 0
        for s in range(n_speakers):
            lines.append(f"SPK\tspk{s}\tF\tThai\tB1")
            for r in range(recs_per):
                rec_id = f"spk{s}-r{r}"
                lines.append(f"REC\t{rec_id}\tspk{s}\tA\t{rec_id}.raw@16000")
                write_matrix(tmp_path / f"{rec_id}.svm", feats[idx])
                idx += 1
        return parse_manifest("\n".join(lines) + "\n")

    def test_zero_epoch_surgery_only_changes_head(self, tmp_path):
        rng = np.random.default_rng(21)
        manifest = self.write_corpus(tmp_path, rng)
        model = small_model(seed=22, feature_dim=6, num_speakers=4)
        cfg = TrainConfig(epochs=0, rng_seed=5)
        tuned, _ = fine_tune(model, manifest, str(tmp_path), cfg)
        for a, b in zip(model.frame_layers + model.segment_layers,
                        tuned.frame_layers + tuned.segment_layers):
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)
        assert not np.array_equal(model.head.weight, tuned.head.weight)
        assert tuned.embedding_tap == model.embedding_tap

    def test_head_shape_follows_new_speaker_count(self, tmp_path):
        rng = np.random.default_rng(23)
        manifest = self.write_corpus(tmp_path, rng, n_speakers=7)
        model = small_model(seed=24, feature_dim=6, num_speakers=3)
        tuned, _ = fine_tune(model, manifest, str(tmp_path), TrainConfig(epochs=0, rng_seed=1))
        assert tuned.head.weight.shape == (7, model.segment_layers[-1].output_dim)

    def test_train_from_files_matches_in_memory(self, tmp_path):
        rng = np.random.default_rng(25)
        manifest = self.write_corpus(tmp_path, rng)
        cfg = TrainConfig(epochs=2, minibatch_size=4, segment_frames=20, rng_seed=7)
        m1 = small_model(seed=26, feature_dim=6, num_speakers=4)
        log = train(m1, manifest, str(tmp_path), cfg)
        assert len(log) == 2
        assert all(np.isfinite(row[1]) for row in log)


class TestExtractEmbeddings:
    def test_cardinality_and_determinism(self, tmp_path):
        rng = np.random.default_rng(27)
        lines = ["SPK\ts1\tF\tThai\tB1"]
        feats = rng.standard_normal((20, 4))
        for i in range(3):
            lines.append(f"REC\tr{i}\ts1\tC\tp@16000")
            write_matrix(tmp_path / f"r{i}.svm", feats)
        manifest = parse_manifest("\n".join(lines) + "\n")
        model = small_model(seed=28)
        got, skipped = extract_embeddings(model, manifest, str(tmp_path))
        assert got.ids == ("r0", "r1", "r2")
        assert skipped == []
        assert np.array_equal(got.vectors[0], got.vectors[1])
        assert got.dim == model.embedding_dim

    def test_short_recording_skipped(self, tmp_path):
        rng = np.random.default_rng(29)
        lines = ["SPK\ts1\tF\tThai\tB1", "REC\tok\ts1\tC\tp", "REC\tshort\ts1\tC\tp"]
        model = small_model(seed=30)
        write_matrix(tmp_path / "ok.svm", rng.standard_normal((20, 4)))
        write_matrix(tmp_path / "short.svm", rng.standard_normal((model.min_frames() - 1, 4)))
        manifest = parse_manifest("\n".join(lines) + "\n")
        got, skipped = extract_embeddings(model, manifest, str(tmp_path))
        assert got.ids == ("ok",)
        assert len(skipped) == 1 and skipped[0][0] == "short"

    def test_duplicated_frames_keep_pooled_mean(self):
        rng = np.random.default_rng(31)
        model = small_model(seed=32)
        feats = rng.standard_normal((25, 4))
        e1 = embed(model, feats)
        e2 = embed(model, np.vstack([feats, feats]))
        # doubling the frame sequence changes edge effects only
        assert np.linalg.norm(e2 - e1) / np.linalg.norm(e1) < 0.2

    def test_pooled_stats_on_duplicated_activations(self):
        rng = np.random.default_rng(33)
        h = rng.standard_normal((40, 6))
        a = stats_pool(h)
        b = stats_pool(np.vstack([h, h]))
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestSerialization:
    def test_roundtrip_bitwise(self, tmp_path):
        model = build_extractor(feature_dim=5, num_speakers=4, rng_seed=34)
        path = tmp_path / "model.svx"
        write_extractor(path, model)
        back = read_extractor(path)
        for a, b in zip(model.parameters(), back.parameters()):
            assert np.array_equal(a, b)
        assert [l.context_offsets for l in back.frame_layers] == [
            l.context_offsets for l in model.frame_layers
        ]
        assert back.embedding_tap == model.embedding_tap
        write_extractor(tmp_path / "again.svx", back)
        assert (tmp_path / "model.svx").read_bytes() == (tmp_path / "again.svx").read_bytes()


class TestEstimator:
    def test_fit_transform_predict(self):
        rng = np.random.default_rng(35)
        feats, labels = separable_corpus(rng, n_speakers=4, recs_per=6, dim=5, rho=8.0)
        names = [f"spk{i}" for i in labels]
        emb = TdnnEmbedder(preset="desk", learning_rate=0.02, minibatch_size=8,
                           segment_frames=25, epochs=12, seed=0)
        emb.fit(feats, names)
        X = emb.transform(feats[:3])
        assert X.shape == (3, emb.model_.embedding_dim)
        acc = np.mean(emb.predict(feats) == np.array(names))
        assert acc > 0.8

    def test_warm_start_continues(self):
        rng = np.random.default_rng(36)
        feats, labels = separable_corpus(rng, n_speakers=3, recs_per=4, dim=5)
        cold = TdnnEmbedder(epochs=2, seed=1, learning_rate=0.01, minibatch_size=6,
                            segment_frames=25)
        cold.fit(feats, labels)
        warm = TdnnEmbedder(epochs=1, seed=1, learning_rate=0.01, minibatch_size=6,
                            segment_frames=25, warm_start=True)
        warm.fit(feats, labels)
        first = [p.copy() for p in warm.model_.parameters()]
        warm.fit(feats, labels)
        assert len(warm.loss_log_) == 2
        changed = any(
            not np.array_equal(a, b) for a, b in zip(first, warm.model_.parameters())
        )
        assert changed

    def test_get_params_roundtrip(self):
        emb = TdnnEmbedder(epochs=7, seed=9)
        params = emb.get_params()
        assert params["epochs"] == 7
        clone = TdnnEmbedder(**params)
        assert clone.get_params() == params
