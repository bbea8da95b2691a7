"""Oracle tests for the autodiff primitives.

Expected values come from hand computation or an independent numpy
reimplementation inside the test, never from the code under test.
"""

import math

import numpy as np
import pytest

from fgnn import tensor as T
from fgnn.errors import ContractError, ShapeError, VocabError


class TestForwardValues:
    def test_matmul_matches_hand_expansion(self):
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = np.array([[7.0], [8.0], [9.0]])
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        # row-by-column expansion by hand
        expected = np.array([[1 * 7 + 2 * 8 + 3 * 9], [4 * 7 + 5 * 8 + 6 * 9]], dtype=float)
        assert out.shape == (2, 1)
        np.testing.assert_array_equal(out.data, expected)

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 1\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 1))))

    def test_masked_softmax_symmetric_logits(self):
        x = T.Tensor([1.0, 9.0, 1.0])
        mask = np.array([True, False, True])
        out = T.masked_softmax(x, mask)
        np.testing.assert_array_equal(out.data, [0.5, 0.0, 0.5])

    def test_masked_softmax_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            T.masked_softmax(T.Tensor([1.0, 2.0]), np.array([False, False]))

    def test_leaky_relu_negative_slope(self):
        out = T.leaky_relu(T.Tensor([-1.0]), slope=0.2)
        np.testing.assert_allclose(out.data, [-0.2], atol=0)

    def test_nll_uniform_logits(self):
        z = T.Tensor(np.zeros((1, 4)))
        loss = T.log_softmax_nll(z, [1])
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-15)

    def test_nll_dominant_logit_approaches_zero(self):
        z = T.Tensor([[0.0, 50.0, 0.0]])
        loss = T.log_softmax_nll(z, [1])
        assert loss.item() < 1e-20

    def test_nll_closed_form(self):
        z = T.Tensor([[1.0, 2.0, 3.0]])
        loss = T.log_softmax_nll(z, [2])
        # -log(e^3 / (e^1 + e^2 + e^3)) = log(1 + e^-1 + e^-2)
        assert loss.item() == pytest.approx(0.40760596444438, abs=1e-12)

    def test_nll_label_out_of_range(self):
        with pytest.raises(VocabError):
            T.log_softmax_nll(T.Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        x = T.Tensor(3.0, requires_grad=True)
        with T.Tape() as tape:
            loss = T.mul(x, x)
        tape.backward(loss)
        assert x.grad == pytest.approx(6.0, abs=1e-15)

    def test_accumulation_is_additive(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(T.mul(x, x))
        tape.backward(loss)
        first = x.grad.copy()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * first, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            out = T.mul(x, x)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_gather_gradient_counts_duplicates(self):
        table = T.Tensor(np.eye(3), requires_grad=True)
        with T.Tape() as tape:
            rows = T.gather(table, [1, 1, 2])
            loss = T.sum(rows)
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad[0], [0, 0, 0])
        np.testing.assert_array_equal(table.grad[1], [2, 2, 2])
        np.testing.assert_array_equal(table.grad[2], [1, 1, 1])

    def test_no_tape_means_no_tracking(self):
        x = T.Tensor([1.0], requires_grad=True)
        out = T.mul(x, x)
        assert not out.requires_grad


class TestGradCheck:
    def test_sum_of_squares_is_exact(self):
        x = T.Tensor([0.4, -1.2, 2.0], requires_grad=True)
        err = T.grad_check(lambda: T.sum(T.mul(x, x)), [x])
        assert err < 1e-9

    def test_masked_softmax_with_nll(self):
        rng = np.random.default_rng(7)
        z = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        mask = np.array([True, False, True, True, False])
        labels = [0, 2, 3]
        onehot = np.zeros((3, 5))
        onehot[np.arange(3), labels] = 1.0

        def f():
            probs = T.masked_softmax(z, mask)
            picked = T.sum(T.mul(probs, T.Tensor(onehot)), axis=1)
            return T.sum(T.mul(T.Tensor(-1.0), T.log(picked)))

        err = T.grad_check(f, [z])
        assert err < 1e-6

    def test_fused_nll_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        z = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        labels = [5, 0, 2, 2]
        err = T.grad_check(lambda: T.log_softmax_nll(z, labels), [z])
        assert err < 1e-7

    def test_composite_elementwise_chain(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)

        def f():
            h = T.tanh(T.matmul(x, w))
            return T.sum(T.mul(T.sigmoid(h), T.exp(T.mul(h, T.Tensor(0.3)))))

        err = T.grad_check(f, [x, w])
        assert err < 1e-7

    def test_segment_ops(self):
        rng = np.random.default_rng(13)
        offsets = np.array([0, 3, 5, 9], dtype=np.int64)
        scores = T.Tensor(rng.normal(size=9), requires_grad=True)
        rows = T.Tensor(rng.normal(size=(9, 4)), requires_grad=True)

        def f():
            alpha = T.segment_softmax(scores, offsets)
            pooled = T.segment_weighted_sum(alpha, rows, offsets)
            return T.sum(T.mul(pooled, pooled))

        err = T.grad_check(f, [scores, rows])
        assert err < 1e-7


class TestGRU:
    def test_all_zero_configuration_outputs_zero(self):
        d = 3
        p = T.GRUParams(
            *[T.Tensor(np.zeros(s)) for s in [(6, d), (d, d), (d,)] * 3]
        )
        out = T.gru_cell(T.Tensor(np.zeros((2, 6))), T.Tensor(np.zeros((2, d))), p)
        np.testing.assert_array_equal(out.data, np.zeros((2, d)))

    def test_scalar_hand_evaluation(self):
        # hidden size 1, input size 2, all parameters hand-picked
        wz, uz, bz = [0.5, -0.2], 0.3, 0.1
        wr, ur, br = [-0.4, 0.6], -0.5, 0.2
        wh, uh, bh = [0.7, 0.1], 0.4, -0.3
        x = [0.9, -1.1]
        h = 0.25

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        z = sig(wz[0] * x[0] + wz[1] * x[1] + uz * h + bz)
        r = sig(wr[0] * x[0] + wr[1] * x[1] + ur * h + br)
        cand = math.tanh(wh[0] * x[0] + wh[1] * x[1] + r * (uh * h) + bh)
        expected = (1 - z) * cand + z * h

        p = T.GRUParams(
            w_z=T.Tensor([[wz[0]], [wz[1]]]),
            u_z=T.Tensor([[uz]]),
            b_z=T.Tensor([bz]),
            w_r=T.Tensor([[wr[0]], [wr[1]]]),
            u_r=T.Tensor([[ur]]),
            b_r=T.Tensor([br]),
            w_h=T.Tensor([[wh[0]], [wh[1]]]),
            u_h=T.Tensor([[uh]]),
            b_h=T.Tensor([bh]),
        )
        out = T.gru_cell(T.Tensor([x]), T.Tensor([[h]]), p)
        assert out.data[0, 0] == pytest.approx(expected, abs=1e-14)

    def test_gradients_reach_first_step_through_unroll(self):
        rng = np.random.default_rng(3)
        d = 2
        tensors = [
            T.Tensor(rng.normal(scale=0.4, size=s), requires_grad=True)
            for s in [(2 * d, d), (d, d), (d,)] * 3
        ]
        p = T.GRUParams(*tensors)
        x = T.Tensor(rng.normal(size=(1, 2 * d)))
        with T.Tape() as tape:
            h = T.Tensor(np.zeros((1, d)))
            for _ in range(3):
                h = T.gru_cell(x, h, p)
            loss = T.sum(T.mul(h, h))
        tape.backward(loss)
        assert np.abs(tensors[0].grad).max() > 0

    def test_gru_gradcheck(self):
        rng = np.random.default_rng(5)
        d = 2
        tensors = [
            T.Tensor(rng.normal(scale=0.5, size=s), requires_grad=True)
            for s in [(2 * d, d), (d, d), (d,)] * 3
        ]
        p = T.GRUParams(*tensors)
        x = T.Tensor(rng.normal(size=(3, 2 * d)))
        h0 = T.Tensor(rng.normal(size=(3, d)))

        def f():
            h = T.gru_cell(x, h0, p)
            h = T.gru_cell(x, h, p)
            return T.sum(T.mul(h, h))

        assert T.grad_check(f, tensors) < 1e-6


class TestMaskedSoftmaxProperties:
    def test_mask_rows_sum_to_one_and_zero_off_mask(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            cols = int(rng.integers(1, 9))
            rows = int(rng.integers(1, 5))
            x = T.Tensor(rng.normal(size=(rows, cols)) * 10)
            mask = rng.random(cols) < 0.5
            if not mask.any():
                mask[int(rng.integers(cols))] = True
            out = T.masked_softmax(x, mask).data
            assert np.all(out[:, ~mask] == 0.0)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestArchive:
    def test_roundtrip_preserves_bits(self, tmp_path):
        rng = np.random.default_rng(23)
        named = [
            ("alpha", rng.normal(size=(3, 4))),
            ("beta", rng.normal(size=7)),
            ("gamma", np.array(2.5)),
        ]
        T.save_tensor_archive(tmp_path / "ckpt", named, extra={"note": "x"})
        arrays, manifest = T.load_tensor_archive(tmp_path / "ckpt")
        assert manifest["note"] == "x"
        for name, arr in named:
            np.testing.assert_array_equal(arrays[name], arr)
