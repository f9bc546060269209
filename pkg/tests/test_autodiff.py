"""Gradient checks and oracle comparisons for the autodiff engine."""

import numpy as np
import pytest

import mirrorcfe.autodiff as ad


def _leaf(shape, rng, scale=1.0):
    return ad.Tensor(rng.normal(0.0, scale, shape), trainable=True)


def _check(loss_fn, leaf, rng, tol=1e-6):
    err = ad.gradient_check(loss_fn, leaf, rng=rng)
    assert err < tol, f"gradient error {err:.3e} >= {tol:.1e}"


class TestPrimitiveGradients:
    def test_add_mul_scale(self):
        rng = np.random.default_rng(0)
        a = _leaf((4, 5), rng)
        b = ad.constant(rng.normal(size=(4, 5)))
        _check(lambda: ad.mean(ad.scale(ad.mul(ad.add(a, b), b), 1.7)), a, rng)

    def test_sub(self):
        rng = np.random.default_rng(1)
        a = _leaf((3, 3), rng)
        b = ad.constant(rng.normal(size=(3, 3)))
        _check(lambda: ad.sum_all(ad.mul(ad.sub(a, b), ad.sub(a, b))), a, rng)

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(2)
        # keep every pre-activation well away from 0 so central differences are clean
        data = rng.normal(size=(4, 4))
        data[np.abs(data) < 0.1] = 0.5
        a = ad.Tensor(data, trainable=True)
        _check(lambda: ad.mean(ad.relu(a)), a, rng)

    def test_sigmoid(self):
        rng = np.random.default_rng(3)
        a = _leaf((6,), rng)
        _check(lambda: ad.mean(ad.sigmoid(a)), a, rng)

    def test_log(self):
        rng = np.random.default_rng(4)
        a = ad.Tensor(rng.uniform(0.5, 2.0, (5,)), trainable=True)
        _check(lambda: ad.mean(ad.log(a)), a, rng)

    def test_matmul(self):
        rng = np.random.default_rng(5)
        a = _leaf((3, 4), rng)
        b = ad.constant(rng.normal(size=(4, 2)))
        _check(lambda: ad.sum_all(ad.matmul(a, b)), a, rng)

    def test_linear_weight_and_input(self):
        rng = np.random.default_rng(6)
        x = _leaf((2, 5), rng)
        w = _leaf((5, 3), rng)
        b = ad.constant(rng.normal(size=(3,)))
        _check(lambda: ad.mean(ad.linear(x, w, b)), x, rng)
        _check(lambda: ad.mean(ad.linear(x, w, b)), w, rng)

    def test_conv2d(self):
        rng = np.random.default_rng(7)
        x = _leaf((2, 3, 5, 5), rng)
        w = _leaf((4, 3, 3, 3), rng)
        b = _leaf((4,), rng)
        _check(lambda: ad.mean(ad.conv2d(x, w, b)), x, rng)
        _check(lambda: ad.mean(ad.conv2d(x, w, b)), w, rng)
        _check(lambda: ad.mean(ad.conv2d(x, w, b)), b, rng)

    def test_avgpool_upsample_gap(self):
        rng = np.random.default_rng(8)
        x = _leaf((2, 3, 4, 4), rng)
        _check(lambda: ad.mean(ad.avgpool2(x)), x, rng)
        _check(lambda: ad.mean(ad.upsample2(x)), x, rng)
        _check(lambda: ad.sum_all(ad.gap(x)), x, rng)

    def test_concat_and_slice(self):
        rng = np.random.default_rng(9)
        a = _leaf((2, 3, 4, 4), rng)
        b = _leaf((2, 2, 4, 4), rng)
        _check(lambda: ad.mean(ad.concat_channels(a, b)), a, rng)
        _check(lambda: ad.mean(ad.concat_channels(a, b)), b, rng)
        _check(lambda: ad.mean(ad.slice_rows(a, 1, 2)), a, rng)

    def test_softmax(self):
        rng = np.random.default_rng(10)
        a = _leaf((2, 4), rng)
        w = ad.constant(rng.normal(size=(2, 4)))
        _check(lambda: ad.sum_all(ad.mul(ad.softmax(a), w)), a, rng)

    def test_l1_distance(self):
        rng = np.random.default_rng(11)
        a = _leaf((3, 4), rng)
        b = ad.constant(rng.normal(size=(3, 4)) + 5.0)  # no sign-change kinks
        _check(lambda: ad.l1_distance(a, b), a, rng)

    def test_l2_norm_and_sumsq(self):
        rng = np.random.default_rng(12)
        a = _leaf((6,), rng)
        _check(lambda: ad.l2_norm(a), a, rng)
        _check(lambda: ad.sumsq(a), a, rng)

    def test_kld_vs_finite_differences(self):
        # gradient of KLD(p, softmax(l)) w.r.t. a random 5-logit vector
        rng = np.random.default_rng(13)
        logits = _leaf((1, 5), rng)
        p = rng.dirichlet(np.ones(5))[None]
        _check(lambda: ad.kld(ad.constant(p), ad.softmax(logits)), logits, rng)


def test_conv2d_matches_loop_oracle():
    # naive quadruple-loop convolution with zero 'same' padding, 50 random cases
    rng = np.random.default_rng(0)
    for _ in range(50):
        b, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x = rng.normal(size=(b, ci, h, w))
        kern = rng.normal(size=(co, ci, 3, 3))
        bias = rng.normal(size=(co,))
        got = ad.conv2d(ad.constant(x), ad.constant(kern), ad.constant(bias)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((b, co, h, w))
        for n in range(b):
            for o in range(co):
                for i in range(h):
                    for j in range(w):
                        want[n, o, i, j] = bias[o] + np.sum(
                            xp[n, :, i : i + 3, j : j + 3] * kern[o])
        assert np.max(np.abs(got - want)) <= 1e-12


def test_gap_hand_case():
    x = ad.constant(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ad.gap(x).data.shape == (1, 1)
    assert float(ad.gap(x).data[0, 0]) == pytest.approx(2.5)


def test_softmax_rows_normalized_and_shift_invariant():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(8, 4))
    p = ad.softmax(ad.constant(logits)).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    p_shift = ad.softmax(ad.constant(logits + 123.0)).data
    assert np.allclose(p, p_shift, atol=1e-12)


def test_full_classifier_loss_gradient():
    # grad of the composed conv/pool/gap/linear/softmax/KLD pipeline on one sample
    from mirrorcfe.classifier import ClassifierConfig, forward_graph, init_params

    rng = np.random.default_rng(2)
    cfg = ClassifierConfig(image_size=8, stage_channels=(4, 6), num_classes=3)
    params = init_params(cfg, seed=0)
    x = ad.Tensor(rng.uniform(0, 1, (1, 1, 8, 8)), trainable=True)
    gp = {k: ad.constant(v) for k, v in params.tensors.items()}
    onehot = np.zeros((1, 3))
    onehot[0, 1] = 1.0

    def loss_fn():
        nodes = forward_graph(gp, cfg, x)
        return ad.kld(ad.constant(onehot), nodes["probs"])

    assert ad.gradient_check(loss_fn, x, rng=rng) < 1e-3


class TestAdam:
    def test_single_step_bias_corrected_magnitude(self):
        p = ad.Tensor(np.zeros(3), trainable=True)
        p.grad = np.ones(3)
        state = ad.AdamState({"p": p}, lr=0.01)
        ad.adam_step({"p": p}, state)
        # bias correction makes the very first update ~= lr regardless of g scale
        assert np.max(np.abs(np.abs(p.data) - 0.01)) < 1e-9

    def test_missing_gradient_rejected(self):
        p = ad.Tensor(np.zeros(3), trainable=True)
        state = ad.AdamState({"p": p})
        with pytest.raises(ValueError, match="no gradient"):
            ad.adam_step({"p": p}, state)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(ad.constant(np.zeros((2, 2))), ad.constant(np.zeros((3,))))
        with pytest.raises(ad.ShapeError):
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))

    def test_non_scalar_backward(self):
        t = ad.constant(np.zeros(4))
        with pytest.raises(ad.NonScalarLossError):
            t.backward()

    def test_overflow_detected(self):
        big = ad.constant(np.array([1e308]))
        with pytest.raises(ad.NumericOverflowError):
            ad.mul(big, big)


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(2, 3, 3, 3))
    xt, wt = ad.constant(x.copy()), ad.constant(w.copy())
    out = ad.mean(ad.relu(ad.conv2d(xt, wt, ad.constant(np.zeros(2)))))
    out.backward()
    assert np.array_equal(xt.data, x)
    assert np.array_equal(wt.data, w)
