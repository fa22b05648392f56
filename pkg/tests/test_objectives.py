import math

import numpy as np
import pytest

from ssgrounding.encoders import OutOfVocabularyError
from ssgrounding.numerics import check_gradient, stable_softmax
from ssgrounding.objectives import (
    CaptionContext,
    ContextSource,
    DecoderParams,
    EmbeddingBatch,
    LossBundle,
    LossWeights,
    caption_context_backward,
    caption_loss,
    gt_clip_contrastive_loss,
    gt_supervision_suite,
    make_caption_context,
    pool_batch,
    support_contrastive_loss,
    total_loss,
)
from ssgrounding.supportset import GroundTruthInterval, PooledEmbedding, PoolingMethod, PoolingParams

GT = GroundTruthInterval


def random_batch(rng, B=3, D=4, lengths=(4, 6, 3)):
    X = [rng.normal(size=(T, D)) for T in lengths[:B]]
    gts = [GT(1, 2), GT(0, 3), GT(2, 2)][:B]
    return EmbeddingBatch(X, rng.normal(size=(B, D)), gts)


def brute_mil_nce(batch, tau):
    total = 0.0
    for i in range(batch.size):
        y = batch.Y[i]
        pos = [math.exp(x @ y / tau) for x in batch.X[i][batch.gts[i].indices()]]
        neg = [math.exp(batch.X[i][t] @ y / tau) for t in range(batch.X[i].shape[0])
               if t not in batch.gts[i].indices()]
        for j in range(batch.size):
            if j != i:
                neg += [math.exp(x @ y / tau) for x in batch.X[j]]
        total -= math.log(sum(pos) / (sum(pos) + sum(neg)))
    return total


class TestGTClipContrastive:
    def test_full_gt_single_video(self):
        b = EmbeddingBatch([np.ones((3, 2))], [[1.0, 2.0]], [GT(0, 2)])
        out = gt_clip_contrastive_loss(b, LossWeights(tau=1.0))
        assert out.value == 0.0
        assert all(not np.any(g) for g in out.grads["X"]) and not np.any(out.grads["Y"])

    def test_symmetric_pair(self):
        b = EmbeddingBatch([[[1.0, 0.0], [1.0, 0.0]]], [[1.0, 0.0]], [GT(0, 0)])
        assert gt_clip_contrastive_loss(b, LossWeights(tau=1.0)).value == pytest.approx(math.log(2), abs=1e-12)

    def test_two_positives(self):
        b = EmbeddingBatch([np.ones((3, 2))], [[1.0, 0.0]], [GT(0, 1)])
        assert gt_clip_contrastive_loss(b, LossWeights(tau=1.0)).value == pytest.approx(-math.log(2 / 3), abs=1e-12)

    def test_matches_brute_force(self, rng):
        b = random_batch(rng)
        assert gt_clip_contrastive_loss(b, LossWeights(tau=0.7)).value == pytest.approx(
            brute_mil_nce(b, 0.7), rel=1e-12)

    def test_gradients(self, rng):
        b = random_batch(rng)
        w = LossWeights(tau=0.5)
        out = gt_clip_contrastive_loss(b, w)
        rep = check_gradient(lambda Y: gt_clip_contrastive_loss(EmbeddingBatch(b.X, Y, b.gts), w).value,
                             b.Y, out.grads["Y"])
        assert rep.max_rel_error < 1e-6
        for i in range(b.size):
            def f(x, i=i):
                X = list(b.X)
                X[i] = x
                return gt_clip_contrastive_loss(EmbeddingBatch(X, b.Y, b.gts), w).value
            assert check_gradient(f, b.X[i], out.grads["X"][i]).max_rel_error < 1e-6

    def test_monotone_in_logits(self, rng):
        X = rng.normal(size=(4, 3))
        y = rng.normal(size=3)
        w = LossWeights(tau=1.0)
        loss = lambda X: gt_clip_contrastive_loss(EmbeddingBatch([X], [y], [GT(1, 2)]), w).value
        base = loss(X)
        step = 0.1 * y / np.linalg.norm(y)
        up_pos, up_neg = X.copy(), X.copy()
        up_pos[1] += step  # clip 1 is a positive
        up_neg[3] += step  # clip 3 is a negative
        assert loss(up_pos) < base < loss(up_neg)
        assert base > 0

    def test_permutation_invariance(self, rng):
        b = random_batch(rng)
        w = LossWeights(tau=0.3)
        order = [2, 0, 1]
        perm = EmbeddingBatch([b.X[i] for i in order], b.Y[order], [b.gts[i] for i in order])
        assert gt_clip_contrastive_loss(perm, w).value == pytest.approx(gt_clip_contrastive_loss(b, w).value, rel=1e-12)


class TestSupportContrastive:
    def test_single_item(self):
        b = EmbeddingBatch([np.ones((2, 2))], [[0.3, 0.4]], [GT(0, 0)])
        out = support_contrastive_loss([PooledEmbedding(np.array([1.0, 2.0]))], b, LossWeights(tau=1.0),
                                       chain=False)
        assert out.value == 0.0

    def test_equal_logits(self):
        b = EmbeddingBatch([np.ones((2, 2))] * 2, [[1.0, 0.0], [1.0, 0.0]], [GT(0, 0)] * 2)
        pooled = [PooledEmbedding(np.array([0.6, 0.8]))] * 2
        out = support_contrastive_loss(pooled, b, LossWeights(tau=1.0), chain=False)
        assert out.value == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_info_nce_by_hand(self, rng):
        W, Y = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        b = EmbeddingBatch([np.ones((2, 8))] * 4, Y, [GT(0, 0)] * 4)
        out = support_contrastive_loss([PooledEmbedding(w) for w in W], b, LossWeights(tau=0.1),
                                       normalize=False, chain=False)
        S = W @ Y.T / 0.1
        expected = -sum(math.log(math.exp(S[i, i]) / sum(math.exp(v) for v in S[i])) for i in range(4))
        assert out.value == pytest.approx(expected, rel=1e-12)

    def test_chain_through_cross_attention(self, rng):
        b = random_batch(rng, B=3, D=4)
        w = LossWeights(tau=0.2)

        def value(X, Y):
            batch = EmbeddingBatch(X, Y, b.gts)
            pooled = pool_batch(batch, "GT-SS", PoolingParams(PoolingMethod.CA, tau=w.tau))
            return support_contrastive_loss(pooled, batch, w)

        out = value(b.X, b.Y)
        assert check_gradient(lambda Y: value(b.X, Y).value, b.Y, out.grads["Y"]).max_rel_error < 1e-6
        X0 = lambda x: value([x] + b.X[1:], b.Y).value
        assert check_gradient(X0, b.X[0], out.grads["X"][0]).max_rel_error < 1e-6

    def test_normalized_scale_invariance(self, rng):
        b = random_batch(rng)
        pooled = [PooledEmbedding(v) for v in rng.normal(size=(3, 4))]
        scaled = [PooledEmbedding(3.5 * p.w_bar) for p in pooled]
        w = LossWeights()
        assert support_contrastive_loss(scaled, b, w, chain=False).value == pytest.approx(
            support_contrastive_loss(pooled, b, w, chain=False).value, abs=1e-9)

    def test_misaligned(self, rng):
        with pytest.raises(ValueError):
            support_contrastive_loss([PooledEmbedding(np.ones(4))], random_batch(rng), LossWeights())


class TestCaption:
    def test_uniform_decoder(self):
        V = 10
        dec = DecoderParams(np.zeros((3, V)), np.zeros(V))
        ctx = [CaptionContext(np.array([0.5, -1.0, 2.0]), ContextSource.SUPPORT_POOLED)]
        assert caption_loss(ctx, [[4, 4, 9]], dec).value == pytest.approx(math.log(V), abs=1e-12)

    def test_confident_decoder(self):
        V = 4
        dec = DecoderParams(np.zeros((1, V)), np.array([60.0, 0.0, 0.0, 0.0]))
        ctx = [np.ones(1)]
        assert caption_loss(ctx, [[0, 0]], dec).value < 1e-20

    def test_loop_oracle(self, rng):
        D, V = 3, 7
        dec = DecoderParams(rng.normal(size=(D, V)), rng.normal(size=V))
        contexts = [rng.normal(size=D) for _ in range(2)]
        sentences = [[1, 5, 5], [0, 6, 2, 3, 1]]
        expected = 0.0
        for w, sent in zip(contexts, sentences):
            p = stable_softmax(w @ dec.weight + dec.bias)
            expected += -sum(math.log(p[t]) for t in sent) / len(sent)
        assert caption_loss(contexts, sentences, dec).value == pytest.approx(expected / 2, abs=1e-12)

    def test_out_of_vocabulary(self):
        dec = DecoderParams(np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(OutOfVocabularyError):
            caption_loss([np.ones(2)], [[0, 3]], dec)

    def test_gt_context_gradient(self, rng):
        X = rng.normal(size=(5, 3))
        cap_w, cap_b = rng.normal(size=(3, 3)), rng.normal(size=3)
        dw = rng.normal(size=3)
        ctx = make_caption_context(X, GT(1, 3), "gt_concat", cap_w=cap_w, cap_b=cap_b)
        np.testing.assert_allclose(ctx.w, X[1:4].mean(axis=0) @ cap_w + cap_b, atol=1e-12)
        g = caption_context_backward(ctx, dw, 5)
        f = lambda x: float(make_caption_context(x, GT(1, 3), "gt_concat", cap_w=cap_w, cap_b=cap_b).w @ dw)
        assert check_gradient(f, X, g["X"]).max_rel_error < 1e-6

    def test_pooled_context_requires_pooled(self):
        with pytest.raises(ValueError):
            make_caption_context(np.ones((2, 2)), None, "support_pooled")


class TestTotal:
    def test_weighted_sum(self):
        parts = [LossBundle(1.0), LossBundle(2.0), LossBundle(3.0)]
        assert total_loss(*parts, LossWeights(0.1, 0.1)).value == pytest.approx(1.5, abs=1e-15)
        assert total_loss(*parts, LossWeights(0.001, 0.001)).value == pytest.approx(1.005, abs=1e-15)
        assert total_loss(*parts, LossWeights(0.0, 0.0)).value == 1.0

    def test_gradients_combine_linearly(self):
        a = LossBundle(1.0, {"Y": np.ones(2)})
        b = LossBundle(1.0, {"Y": np.full(2, 2.0), "dec_w": np.ones(1)})
        out = total_loss(a, b, None, LossWeights(0.5, 0.1))
        np.testing.assert_allclose(out.grads["Y"], [2.0, 2.0])
        np.testing.assert_allclose(out.grads["dec_w"], [0.5])

    def test_suite_recomposes(self, rng):
        b = random_batch(rng)
        V = 6
        dec = DecoderParams(rng.normal(size=(4, V)), rng.normal(size=V))
        sentences = [[0, 1], [2], [5, 4, 3]]
        w = LossWeights(tau=0.4)
        suite = gt_supervision_suite(b, w, dec, sentences)
        con = gt_clip_contrastive_loss(b, w).value
        ctx = [make_caption_context(x, g, "gt_concat") for x, g in zip(b.X, b.gts)]
        cap = caption_loss(ctx, sentences, dec).value
        assert suite.value == pytest.approx(con + cap, abs=1e-12)

    def test_suite_full_gt_uniform_decoder(self):
        V = 5
        b = EmbeddingBatch([np.ones((3, 2))], [[1.0, 0.0]], [GT(0, 2)])
        suite = gt_supervision_suite(b, LossWeights(), DecoderParams(np.zeros((2, V)), np.zeros(V)), [[1, 2]])
        assert suite.value == pytest.approx(math.log(V), abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)


def test_batch_validation():
    with pytest.raises(ValueError):
        EmbeddingBatch([np.ones((3, 2))], [[1.0, 0.0, 0.0]], [GT(0, 0)])
    with pytest.raises(ValueError):
        EmbeddingBatch([np.ones((3, 2))], [[1.0, 0.0]], [GT(0, 3)])
