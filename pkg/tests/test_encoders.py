import numpy as np
import pytest

from ssgrounding.encoders import (
    OutOfVocabularyError,
    check_tokens,
    decode_token_logits,
    init_encoder_params,
    project_backward,
    project_text,
    project_video,
    toy_text_encode,
    toy_text_encode_backward,
    uniform_init,
)
from ssgrounding.numerics import DegenerateInputError, check_gradient, stable_softmax


class TestProjection:
    def test_identity_without_normalization(self, rng):
        F = rng.normal(size=(5, 3))
        X, _ = project_video(F, np.eye(3), np.zeros(3), normalize=False)
        np.testing.assert_array_equal(X, F)

    def test_zero_input(self):
        X, _ = project_video(np.zeros((2, 3)), np.ones((3, 4)), np.zeros(4), normalize=False)
        np.testing.assert_array_equal(X, 0.0)
        with pytest.raises(DegenerateInputError):
            project_video(np.zeros((2, 3)), np.ones((3, 4)), np.zeros(4))

    def test_row_loop_oracle(self, rng):
        F, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
        X, _ = project_video(F, W, b)
        for t in range(4):
            h = np.array([sum(F[t, i] * W[i, k] for i in range(3)) + b[k] for k in range(5)])
            np.testing.assert_allclose(X[t], h / np.linalg.norm(h), atol=1e-12)

    def test_text_is_single_row(self, rng):
        G, W, b = rng.normal(size=3), rng.normal(size=(3, 5)), rng.normal(size=5)
        y, _ = project_text(G, W, b)
        np.testing.assert_allclose(y, project_video(G[None], W, b)[0][0], atol=0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            project_video(rng.normal(size=(4, 3)), rng.normal(size=(2, 5)), np.zeros(5))

    def test_cosine_invariant_to_positive_feature_scaling(self, rng):
        # only without bias is the projected direction scale-free
        F, W = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        X1, _ = project_video(F, W, np.zeros(5))
        X2, _ = project_video(F * rng.uniform(0.5, 3, size=(4, 1)), W, np.zeros(5))
        np.testing.assert_allclose(X1, X2, atol=1e-12)

    @pytest.mark.parametrize("normalize", [True, False])
    def test_backward(self, rng, normalize):
        F, W, b, g = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=(4, 5))
        _, cache = project_video(F, W, b, normalize)
        dF, dW, db = project_backward(g, cache)
        f = lambda **kw: float(np.sum(project_video(kw.get("F", F), kw.get("W", W), kw.get("b", b), normalize)[0] * g))
        assert check_gradient(lambda v: f(F=v), F, dF).max_rel_error < 1e-6
        assert check_gradient(lambda v: f(W=v), W, dW).max_rel_error < 1e-6
        assert check_gradient(lambda v: f(b=v), b, db).max_rel_error < 1e-6


class TestTextEncoder:
    def test_single_token(self, rng):
        table = rng.normal(size=(6, 3))
        np.testing.assert_array_equal(toy_text_encode([4], table), table[4])

    def test_two_tokens(self):
        table = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(toy_text_encode([0, 1], table), [0.5, 0.5])

    def test_permutation_invariance(self, rng):
        table = rng.normal(size=(9, 4))
        np.testing.assert_allclose(toy_text_encode([1, 7, 3, 3], table),
                                   toy_text_encode([3, 1, 3, 7], table), atol=1e-15)

    def test_backward(self, rng):
        table, g = rng.normal(size=(6, 3)), rng.normal(size=3)
        toks = np.array([2, 5, 2])
        d = toy_text_encode_backward(g, toks, table.shape)
        assert check_gradient(lambda t: float(toy_text_encode(toks, t) @ g), table, d).max_rel_error < 1e-6

    @pytest.mark.parametrize("tokens", [[0, 6], [-1], [1.5]])
    def test_out_of_vocabulary(self, tokens):
        with pytest.raises(OutOfVocabularyError):
            check_tokens(tokens, 6)

    def test_empty_sentence(self):
        with pytest.raises(ValueError):
            check_tokens([], 6)


class TestDecoder:
    def test_zero_weights_uniform(self, rng):
        logits = decode_token_logits(rng.normal(size=4), np.zeros((4, 7)), np.zeros(7))
        np.testing.assert_allclose(stable_softmax(logits), np.full(7, 1 / 7), atol=1e-15)

    def test_large_gain_selects_token(self):
        W = np.zeros((2, 3))
        W[0, 0] = 1000.0
        p = stable_softmax(decode_token_logits(np.array([1.0, 0.0]), W, np.zeros(3)))
        assert p[0] == pytest.approx(1.0, abs=1e-12)


def test_init_bounds_and_determinism():
    a = init_encoder_params(6, 4, 8, 10, np.random.default_rng(0))
    b = init_encoder_params(6, 4, 8, 10, np.random.default_rng(0))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.abs(a["psi_w"]).max() <= 1 / np.sqrt(6)
    assert np.abs(a["dec_w"]).max() <= 1 / np.sqrt(8)
    assert uniform_init(np.random.default_rng(1), (3, 3), 100).max() <= 0.1
