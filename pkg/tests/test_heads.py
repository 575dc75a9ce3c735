import math

import numpy as np
import pytest

from ncelm import heads, tensor
from ncelm.corpus import UnigramNoise
from ncelm.heads import NceConfig

from conftest import numeric_grad


def make_noise(p):
    return UnigramNoise(np.asarray(p, dtype=np.float64))


def random_setup(rng, b, h, v, dtype=np.float64, distinct_targets=True):
    l = rng.normal(scale=0.8, size=(b, h)).astype(dtype)
    w = rng.normal(scale=0.5, size=(h, v)).astype(dtype)
    c = rng.normal(scale=0.3, size=(1, v)).astype(dtype)
    if distinct_targets:
        targets = rng.choice(v, size=b, replace=False)
    else:
        targets = rng.integers(0, v, size=b)
    raw = rng.random(v) + 0.05
    noise = make_noise(raw / raw.sum())
    return l, w, c, targets.astype(np.int64), noise


class TestSoftmaxHead:
    def test_uniform_scores(self):
        l = np.zeros((3, 2))
        w = np.zeros((2, 4))
        c = np.zeros((1, 4))
        loss, _ = heads.softmax_forward_loss(l, w, c, [0, 1, 3])
        assert abs(loss - math.log(4)) < 1e-12

    def test_single_class(self):
        loss, _ = heads.softmax_forward_loss(np.ones((2, 3)), np.ones((3, 1)),
                                             np.ones((1, 1)), [0, 0])
        assert abs(loss) < 1e-12

    def test_matches_bruteforce(self, rng):
        l = rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 5))
        c = rng.normal(size=(1, 5))
        targets = np.array([4, 1])
        loss, _ = heads.softmax_forward_loss(l, w, c, targets)
        scores = l @ w + c
        probs = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        expect = -np.log(probs[[0, 1], targets]).mean()
        assert abs(loss - expect) < 1e-12

    def test_confident_prediction_zero_gradient(self):
        # one column dominates and is the target everywhere
        w = np.zeros((1, 3))
        w[0, 1] = 500.0
        _, cache = heads.softmax_forward_loss(np.ones((2, 1)), w, np.zeros((1, 3)), [1, 1])
        g = heads.softmax_backward(cache)
        assert np.abs(g.delta_w).max() < 1e-12
        assert np.abs(g.delta_c).max() < 1e-12
        assert np.abs(g.error_hidden).max() < 1e-12

    def test_uniform_two_way_gradient(self):
        # V=2, uniform prediction: per-row logit gradient is +-0.5 / B
        b = 4
        _, cache = heads.softmax_forward_loss(np.zeros((b, 2)), np.zeros((2, 2)),
                                              np.zeros((1, 2)), [0] * b)
        g = heads.softmax_backward(cache)
        np.testing.assert_allclose(g.delta_c, [[-0.5 * b / b, 0.5 * b / b]], atol=1e-12)

    def test_gradients_vs_finite_differences(self, rng):
        l = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 6))
        c = rng.normal(size=(1, 6))
        targets = np.array([2, 0, 5])

        def loss_of(w_, c_, l_):
            return heads.softmax_forward_loss(l_, w_, c_, targets)[0]

        _, cache = heads.softmax_forward_loss(l, w, c, targets)
        g = heads.softmax_backward(cache)
        np.testing.assert_allclose(
            g.delta_w, numeric_grad(lambda x: loss_of(x, c, l), w.copy()), rtol=1e-6, atol=1e-9
        )
        np.testing.assert_allclose(
            g.delta_c, numeric_grad(lambda x: loss_of(w, x, l), c.copy()), rtol=1e-6, atol=1e-9
        )
        np.testing.assert_allclose(
            g.error_hidden, numeric_grad(lambda x: loss_of(w, c, x), l.copy()),
            rtol=1e-6, atol=1e-9,
        )


class TestBnceForward:
    def test_exp_of_zero_is_one(self):
        noise = make_noise([0.25, 0.25, 0.25, 0.25])
        cfg = NceConfig(z_constant=1.0, noise=noise)
        o, _ = heads.bnce_forward(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((1, 4)),
                                  [0, 2], cfg)
        np.testing.assert_allclose(o, 1.0, atol=1e-15)

    def test_hand_exponentiation(self):
        # scores [[0, ln2], [ln3, 0]] with Z=1
        l = np.array([[1.0, 0.0], [0.0, 1.0]])
        w = np.array([[0.0, math.log(2.0)], [math.log(3.0), 0.0]])
        c = np.zeros((1, 2))
        cfg = NceConfig(z_constant=1.0, noise=make_noise([0.5, 0.5]))
        o, _ = heads.bnce_forward(l, w, c, [0, 1], cfg)
        np.testing.assert_allclose(o, [[1.0, 2.0], [3.0, 1.0]], rtol=1e-14)

    def test_z_divides_everything(self, rng):
        l = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 6))
        c = rng.normal(size=(1, 6))
        noise = make_noise(np.full(6, 1 / 6))
        targets = [1, 3, 5]
        o1, _ = heads.bnce_forward(l, w, c, targets, NceConfig(1.0, noise))
        oz, _ = heads.bnce_forward(l, w, c, targets, NceConfig(math.exp(9.0), noise))
        np.testing.assert_allclose(oz, o1 / math.exp(9.0), rtol=1e-12)

    def test_shared_k_rejected(self):
        cfg = NceConfig(1.0, make_noise([0.5, 0.5]), shared_k=3)
        with pytest.raises(ValueError):
            heads.bnce_forward(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((1, 2)), [0, 1], cfg)


class TestBnceNormalizer:
    def test_hand_case(self):
        o = np.array([[1.0, 2.0], [3.0, 4.0]])
        n = np.array([[0.5, 0.5]])
        y = heads.bnce_normalizer(o, n, k_total=1)
        np.testing.assert_allclose(y, [[1.5, 2.5], [3.5, 4.5]], rtol=1e-15)

    def test_zero_noise_degenerates(self):
        o = np.array([[1.0, 2.0], [3.0, 4.0]])
        y = heads.bnce_normalizer(o, np.zeros((1, 2)), k_total=1)
        np.testing.assert_array_equal(y, o)

    def test_adaptive_k_total(self):
        # B=2 with one extra shared sample: k_total = B + K - 1 = 2
        o = np.ones((2, 3))
        n = np.array([[0.1, 0.2, 0.3]])
        y = heads.bnce_normalizer(o, n, k_total=2)
        np.testing.assert_allclose(y, np.broadcast_to(1.0 + 2 * n, (2, 3)), rtol=1e-15)


class TestBnceGradientMatrix:
    def test_hand_case(self):
        o = np.array([[1.0, 2.0], [3.0, 4.0]])
        n = np.array([[0.5, 0.5]])
        y = heads.bnce_normalizer(o, n, 1)
        g = heads.bnce_gradient_matrix(o, y, n, 1)
        assert abs(g[0, 1] - 0.8) < 1e-12  # 2 / 2.5
        assert abs(g[0, 0] - (-(1 * 0.5) / 1.5)) < 1e-12  # -1/3
        assert abs(g[1, 0] - 3.0 / 3.5) < 1e-12
        assert abs(g[1, 1] - (-0.5 / 4.5)) < 1e-12

    def test_saturated_posterior_diagonal_vanishes(self):
        o = np.array([[1e12, 1.0], [1.0, 1e12]])
        n = np.array([[0.5, 0.5]])
        y = heads.bnce_normalizer(o, n, 1)
        g = heads.bnce_gradient_matrix(o, y, n, 1)
        assert abs(g[0, 0]) < 1e-12
        assert abs(g[1, 1]) < 1e-12

    def test_zero_normalizer_rejected(self):
        o = np.array([[0.0, 0.0], [0.0, 0.0]])
        with pytest.raises(FloatingPointError):
            heads.bnce_gradient_matrix(o, o, np.zeros((1, 2)), 1)

    def test_matches_finite_difference_of_loss(self, rng):
        # G must be the exact gradient of the objective w.r.t. pre-exp scores
        b, k_extra = 4, 2
        n_row = rng.random(b + k_extra) + 0.1
        n_row /= n_row.sum()
        n = n_row.reshape(1, -1)
        k_total = b + k_extra - 1
        z = math.exp(2.0)
        scores = rng.normal(size=(b, b + k_extra))

        def loss_from_scores(s):
            o = np.exp(s - math.log(z))
            y = heads.bnce_normalizer(o, n, k_total)
            return heads.bnce_loss(o, y, n)

        o = np.exp(scores - math.log(z))
        y = heads.bnce_normalizer(o, n, k_total)
        g = heads.bnce_gradient_matrix(o, y, n, k_total)
        np.testing.assert_allclose(
            g, numeric_grad(loss_from_scores, scores.copy()), rtol=1e-6, atol=1e-10
        )


class TestBnceLoss:
    def test_perfect_discrimination_limit(self):
        o = np.array([[2.0, 0.0], [0.0, 3.0]])
        y = o.copy()  # zero noise mass off-diagonal, o/y = 1 on the diagonal
        assert heads.bnce_loss(o, y, np.zeros((1, 2))) == 0.0

    def test_hand_value(self):
        o = np.array([[1.0, 2.0], [3.0, 4.0]])
        n = np.array([[0.5, 0.5]])
        y = heads.bnce_normalizer(o, n, 1)
        expect = -(math.log(1 / 1.5) + math.log(1 - 0.8)) - (
            math.log(1 - 3 / 3.5) + math.log(4 / 4.5)
        )
        assert abs(heads.bnce_loss(o, y, n) - expect) < 1e-12

    def test_zero_target_output_rejected(self):
        o = np.array([[0.0, 1.0], [1.0, 1.0]])
        n = np.array([[0.5, 0.5]])
        y = heads.bnce_normalizer(o, n, 1)
        with pytest.raises(FloatingPointError):
            heads.bnce_loss(o, y, n)

    def test_gradient_of_loss_reproduces_g(self, rng):
        b = 3
        n_row = rng.random(b) + 0.2
        n_row /= n_row.sum()
        n = n_row.reshape(1, -1)
        scores = rng.normal(size=(b, b))

        def loss_from_scores(s):
            o = np.exp(s)
            y = heads.bnce_normalizer(o, n, b - 1)
            return heads.bnce_loss(o, y, n)

        o = np.exp(scores)
        y = heads.bnce_normalizer(o, n, b - 1)
        g = heads.bnce_gradient_matrix(o, y, n, b - 1)
        np.testing.assert_allclose(
            g, numeric_grad(loss_from_scores, scores.copy()), rtol=1e-6, atol=1e-10
        )


class TestBnceBackward:
    def test_zero_gradient_matrix(self, rng):
        l = rng.normal(size=(3, 4))
        wg = rng.normal(size=(4, 3))
        g = heads.bnce_backward(np.zeros((3, 3)), l, wg)
        assert np.all(g.delta_w == 0) and np.all(g.delta_c == 0) and np.all(g.error_hidden == 0)

    def test_single_example_without_noise_rejected(self):
        noise = make_noise([0.5, 0.5])
        cfg = NceConfig(1.0, noise)
        with pytest.raises(ValueError):
            heads.bnce_head(np.ones((1, 2)), np.ones((2, 2)), np.zeros((1, 2)), [0], cfg)

    def test_shapes(self, rng):
        l, w, c, targets, noise = random_setup(rng, 5, 7, 20)
        cfg = NceConfig(math.exp(2.0), noise)
        loss, grads, cache = heads.bnce_head(l, w, c, targets, cfg)
        assert grads.delta_w.shape == (7, 5)
        assert grads.delta_c.shape == (1, 5)
        assert grads.error_hidden.shape == (5, 7)


def scatter_to_full(grads, cols, h, v):
    dw = np.zeros((h, v))
    dc = np.zeros((1, v))
    tensor.scatter_add_columns(dw, dc, cols, grads.delta_w, grads.delta_c)
    return dw, dc


class TestOracleEquivalence:
    def test_bnce_matches_reference(self, rng):
        b, h, v = 8, 16, 50
        l, w, c, targets, noise = random_setup(rng, b, h, v)
        z = math.exp(9.0)
        cfg = NceConfig(z, noise)
        loss, grads, cache = heads.bnce_head(l, w, c, targets, cfg)
        noise_lists = [[targets[j] for j in range(b) if j != i] for i in range(b)]
        ref_loss, ref_dw, ref_dc, ref_dl = heads.reference_nce(
            l, w, c, targets, noise_lists, z, noise.p
        )
        dw, dc = scatter_to_full(grads, cache["cols"], h, v)
        assert abs(loss - ref_loss) < 1e-10
        assert np.abs(dw - ref_dw).max() < 1e-10
        assert np.abs(dc - ref_dc).max() < 1e-10
        assert np.abs(grads.error_hidden - ref_dl).max() < 1e-10

    def test_bnce_with_duplicate_targets_matches_reference(self, rng):
        # a repeated word serves as its own noise at the other batch position
        b, h, v = 6, 5, 12
        l, w, c, _, noise = random_setup(rng, b, h, v)
        targets = np.array([3, 7, 3, 1, 7, 3])
        cfg = NceConfig(math.exp(1.0), noise)
        loss, grads, cache = heads.bnce_head(l, w, c, targets, cfg)
        noise_lists = [[targets[j] for j in range(b) if j != i] for i in range(b)]
        ref_loss, ref_dw, ref_dc, ref_dl = heads.reference_nce(
            l, w, c, targets, noise_lists, math.exp(1.0), noise.p
        )
        dw, dc = scatter_to_full(grads, cache["cols"], h, v)
        assert abs(loss - ref_loss) < 1e-10
        assert np.abs(dw - ref_dw).max() < 1e-10
        assert np.abs(dc - ref_dc).max() < 1e-10
        assert np.abs(grads.error_hidden - ref_dl).max() < 1e-10

    def test_adaptive_matches_reference(self, rng):
        b, h, v, k = 4, 6, 30, 5
        l, w, c, targets, noise = random_setup(rng, b, h, v)
        cfg = NceConfig(math.exp(9.0), noise, shared_k=k)
        loss, grads, cache = heads.adaptive_bnce(l, w, c, targets, cfg, rng)
        extra = cache["cols"][b:]
        assert extra.size == k
        noise_lists = [
            [targets[j] for j in range(b) if j != i] + list(extra) for i in range(b)
        ]
        ref_loss, ref_dw, ref_dc, ref_dl = heads.reference_nce(
            l, w, c, targets, noise_lists, math.exp(9.0), noise.p
        )
        dw, dc = scatter_to_full(grads, cache["cols"], h, v)
        assert abs(loss - ref_loss) < 1e-10
        assert np.abs(dw - ref_dw).max() < 1e-10
        assert np.abs(dc - ref_dc).max() < 1e-10
        assert np.abs(grads.error_hidden - ref_dl).max() < 1e-10

    def test_snce_matches_reference(self, rng):
        b, h, v, k = 5, 4, 25, 10
        l, w, c, targets, noise = random_setup(rng, b, h, v)
        cfg = NceConfig(math.exp(9.0), noise, shared_k=k)
        loss, grads, cache = heads.snce_head(l, w, c, targets, cfg, rng)
        shared = list(cache["cols"][b:])
        noise_lists = [shared for _ in range(b)]
        ref_loss, ref_dw, ref_dc, ref_dl = heads.reference_nce(
            l, w, c, targets, noise_lists, math.exp(9.0), noise.p
        )
        dw, dc = scatter_to_full(grads, cache["cols"], h, v)
        assert abs(loss - ref_loss) < 1e-10
        assert np.abs(dw - ref_dw).max() < 1e-10
        assert np.abs(dc - ref_dc).max() < 1e-10
        assert np.abs(grads.error_hidden - ref_dl).max() < 1e-10


class TestAdaptiveReduction:
    def test_k_zero_is_bit_identical_to_plain(self, rng):
        l, w, c, targets, noise = random_setup(rng, 6, 8, 40)
        cfg = NceConfig(math.exp(9.0), noise, shared_k=0)
        loss_a, grads_a, _ = heads.adaptive_bnce(l, w, c, targets, cfg, rng)
        loss_p, grads_p, _ = heads.bnce_head(l, w, c, targets, cfg)
        assert loss_a == loss_p
        np.testing.assert_array_equal(grads_a.delta_w, grads_p.delta_w)
        np.testing.assert_array_equal(grads_a.delta_c, grads_p.delta_c)
        np.testing.assert_array_equal(grads_a.error_hidden, grads_p.error_hidden)

    def test_sampled_duplicate_of_target_allowed(self, rng):
        # extra sample colliding with target 0: duplicate column, scatter accumulates
        l = rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 4))
        c = rng.normal(size=(1, 4))
        noise = make_noise([0.7, 0.1, 0.1, 0.1])
        cfg = NceConfig(1.0, noise, shared_k=1)
        loss, grads, cache = heads._bnce_pipeline(l, w, c, np.array([0, 2]), cfg,
                                                  extra_ids=np.array([0]))
        np.testing.assert_array_equal(cache["cols"], [0, 2, 0])
        assert np.isfinite(loss)
        # scattered update accumulates both column-0 contributions
        dw, _ = scatter_to_full(grads, cache["cols"], 3, 4)
        np.testing.assert_allclose(
            dw[:, 0], grads.delta_w[:, 0] + grads.delta_w[:, 2], rtol=1e-12
        )


class TestSnceScalarCase:
    def test_two_term_formula(self, rng):
        # B=1, K=1: one target, one shared noise sample
        l = np.array([[0.7, -0.4]])
        w = np.array([[0.5, -0.3, 0.2], [0.1, 0.8, -0.6]])
        c = np.array([[0.05, -0.1, 0.0]])
        p = np.array([0.2, 0.3, 0.5])
        noise = make_noise(p)
        z = math.exp(1.5)
        cfg = NceConfig(z, noise, shared_k=1)
        loss, grads, cache = heads.snce_head(l, w, c, np.array([1]), cfg, rng)
        m = int(cache["cols"][1])
        score = lambda j: float(l[0] @ w[:, j]) + c[0, j]
        p_t = math.exp(score(1)) / z
        p_m = math.exp(score(m)) / z
        expect = -(
            math.log(p_t / (p_t + 1 * p[1]))
            + math.log((1 * p[m]) / (p_m + 1 * p[m]))
        )
        assert abs(loss - expect) < 1e-12

    def test_k_must_be_positive(self, rng):
        cfg = NceConfig(1.0, make_noise([0.5, 0.5]), shared_k=0)
        with pytest.raises(ValueError):
            heads.snce_head(np.ones((2, 2)), np.ones((2, 2)), np.zeros((1, 2)),
                            [0, 1], cfg, rng)


class TestReferenceNce:
    def test_empty_noise_contributes_nothing(self):
        l = np.ones((1, 2))
        w = np.ones((2, 3))
        c = np.zeros((1, 3))
        loss, dw, dc, dl = heads.reference_nce(l, w, c, [1], [[]], 1.0, [1 / 3] * 3)
        assert loss == 0.0
        assert np.all(dw == 0) and np.all(dc == 0) and np.all(dl == 0)


class TestNoVocabularyWidthActivations:
    def test_bnce_path_is_batch_sized(self, rng):
        b, h, v = 8, 16, 500
        l, w, c, targets, noise = random_setup(rng, b, h, v)
        cfg = NceConfig(math.exp(9.0), noise, shared_k=4)
        with tensor.shape_audit() as shapes:
            heads.adaptive_bnce(l, w, c, targets, cfg, rng)
        assert shapes, "audit saw no allocations"
        assert max(max(s) for s in shapes) <= max(b + 4, h)

    def test_snce_path_is_batch_sized(self, rng):
        b, h, v = 8, 16, 500
        l, w, c, targets, noise = random_setup(rng, b, h, v)
        cfg = NceConfig(math.exp(9.0), noise, shared_k=8)
        with tensor.shape_audit() as shapes:
            heads.snce_head(l, w, c, targets, cfg, rng)
        assert max(max(s) for s in shapes) <= max(b + 8, h)

    def test_softmax_path_trips_the_audit(self, rng):
        # negative control: the full softmax must allocate a V-wide activation
        b, h, v = 8, 16, 500
        l, w, c, targets, _ = random_setup(rng, b, h, v)
        with tensor.shape_audit() as shapes:
            loss, cache = heads.softmax_forward_loss(l, w, c, targets)
            heads.softmax_backward(cache)
        assert any(v in s for s in shapes)


class TestFloat32Guards:
    def test_score_clamp_counts_saturation(self):
        l = np.full((2, 1), 100.0, dtype=np.float32)
        w = np.ones((1, 3), dtype=np.float32)
        c = np.zeros((1, 3), dtype=np.float32)
        noise = make_noise([1 / 3] * 3)
        cfg = NceConfig(1.0, noise)
        o, cache = heads.bnce_forward(l, w, c, [0, 1], cfg)
        assert cache["saturated"] == 4  # every score hit the clamp
        assert np.isfinite(o).all()

    def test_float64_never_clamps(self):
        l = np.full((2, 1), 100.0)
        w = np.ones((1, 3))
        c = np.zeros((1, 3))
        noise = make_noise([1 / 3] * 3)
        o, cache = heads.bnce_forward(l, w, c, [0, 1], NceConfig(1.0, noise))
        assert cache["saturated"] == 0
        assert o.max() > 1e40
