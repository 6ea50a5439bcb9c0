import math

import numpy as np
import pytest

from ouro import tensor as T
from ouro.errors import ContractError, DegenerateInputError, DimensionError, NumericError


def fd_grad(f, param: T.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. param (f64)."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def analytic_grad(build, params):
    for p in params:
        p.grad = None
    with T.Tape() as tp:
        loss = build()
        tp.backward(loss)
    return [p.grad for p in params]


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
    return float((np.abs(a - n) / denom).max())


def check_op(build, params, tol=1e-6):
    """Compare tape gradients against finite differences for each param."""
    grads = analytic_grad(build, params)
    for p, g in zip(params, grads):
        num = fd_grad(lambda: build().item(), p)
        assert rel_err(g, num) < tol, f"gradient mismatch for {p.name or p.shape}"


def randt(rng, shape, scale=1.0, name=None):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


class TestForwardAnchors:
    def test_matmul_identity(self):
        a = T.tensor(np.arange(6, dtype=np.float64).reshape(2, 3), dtype=T.F64)
        eye = T.tensor(np.eye(3), dtype=T.F64)
        out = T.matmul(a, eye)
        assert np.array_equal(out.data, a.data)

    def test_matmul_hand(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=T.F64)
        b = T.tensor([[5.0, 6.0], [7.0, 8.0]], dtype=T.F64)
        assert np.allclose(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_rms_norm_hand(self):
        # x=[3,4]: rms = sqrt(25/2) -> y = x / 3.5355... = [0.848528, 1.131371]
        x = T.tensor([[3.0, 4.0]], dtype=T.F64)
        gamma = T.tensor([1.0, 1.0], dtype=T.F64)
        y = T.rms_norm(x, gamma, eps=0.0)
        assert np.allclose(y.data, [[0.848528, 1.131371]], atol=1e-5)

    def test_rms_norm_gamma_scales(self):
        x = T.tensor([[3.0, 4.0]], dtype=T.F64)
        gamma = T.tensor([2.0, 0.5], dtype=T.F64)
        y = T.rms_norm(x, gamma, eps=0.0)
        assert np.allclose(y.data, [[2 * 0.8485281374, 0.5 * 1.1313708499]], atol=1e-8)

    def test_cross_entropy_uniform(self):
        # Equal logits over 256 classes: loss = ln 256 regardless of targets.
        logits = T.zeros((2, 3, 256), dtype=T.F64)
        targets = np.array([[0, 17, 255], [4, 4, 4]])
        loss = T.cross_entropy(logits, targets)
        assert abs(loss.item() - math.log(256.0)) < 1e-9
        assert abs(loss.item() - 5.5452) < 1e-4

    def test_cross_entropy_matches_explicit_softmax(self):
        rng = np.random.default_rng(0)
        logits = T.Tensor(rng.standard_normal((2, 3, 7)))
        t = rng.integers(0, 7, size=(2, 3))
        m = np.array([[1, 1, 0], [1, 0, 1]], dtype=np.float64)
        loss = T.cross_entropy(logits, t, m)
        z = logits.data.astype(np.float64)
        p = np.exp(z - z.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        nll = -np.log(p[np.arange(2)[:, None], np.arange(3)[None, :], t])
        want = (nll * m).sum() / m.sum()
        assert abs(loss.item() - want) < 1e-6

    def test_mean_pool_hand(self):
        h = T.tensor([[[2.0, 4.0], [6.0, 8.0], [100.0, 100.0]]], dtype=T.F64)
        mask = np.array([[1.0, 1.0, 0.0]])
        out = T.mean_pool(h, mask)
        assert np.allclose(out.data, [[4.0, 6.0]])

    def test_mean_pool_empty_row_rejected(self):
        h = T.zeros((2, 3, 4), dtype=T.F64)
        mask = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(DegenerateInputError):
            T.mean_pool(h, mask)

    def test_sigmoid_midpoint(self):
        x = T.tensor([0.0], dtype=T.F64, requires_grad=True)
        with T.Tape() as tp:
            y = T.sigmoid(x)
            s = T.sum_all(y)
            tp.backward(s)
        assert abs(y.data[0] - 0.5) < 1e-12
        assert abs(x.grad[0] - 0.25) < 1e-12

    def test_sigmoid_extreme_inputs_stable(self):
        x = T.tensor([-1e4, 1e4], dtype=T.F64)
        y = T.sigmoid(x)
        assert np.all(np.isfinite(y.data))
        assert y.data[0] == 0.0 and y.data[1] == 1.0

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        y = T.softmax_last(T.Tensor(rng.standard_normal((3, 5)) * 30))
        assert np.allclose(y.data.sum(-1), 1.0, atol=1e-6)

    def test_causal_mask_blocks_future(self):
        scores = T.zeros((1, 1, 4, 4), dtype=T.F64)
        probs = T.softmax_last(T.causal_mask(scores)).data[0, 0]
        assert np.allclose(np.triu(probs, k=1), 0.0)
        for i in range(4):
            assert np.allclose(probs[i, : i + 1], 1.0 / (i + 1))

    def test_rope_preserves_norm_and_identity_at_origin(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.standard_normal((1, 2, 4, 8)))
        pos = np.arange(4)[:, None].astype(np.float64)
        freq = 1.0 / (10000.0 ** (np.arange(4)[None, :] / 4.0))
        ang = pos * freq
        y = T.rope(x, np.cos(ang), np.sin(ang))
        assert np.allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1), atol=1e-9)
        assert np.allclose(y.data[:, :, 0, :], x.data[:, :, 0, :])


class TestShapeAndContractErrors:
    def test_add_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError) as e:
            T.add(T.zeros((2, 3)), T.zeros((3, 2)))
        assert "(2, 3)" in str(e.value) and "(3, 2)" in str(e.value)

    def test_matmul_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))

    def test_mixed_dtype_rejected(self):
        with pytest.raises(DimensionError):
            T.add(T.zeros((2,), dtype=T.F32), T.zeros((2,), dtype=T.F64))

    def test_backward_requires_scalar(self):
        x = T.zeros((3,), requires_grad=True)
        with T.Tape() as tp:
            y = T.scale(x, 2.0)
            with pytest.raises(ContractError):
                tp.backward(y)

    def test_backward_requires_taped_loss(self):
        x = T.zeros((), requires_grad=True)
        with T.Tape() as tp:
            with pytest.raises(ContractError):
                tp.backward(x)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(T.zeros((1, 2, 5)), np.array([[0, 5]]))

    def test_finite_check_flags_overflow(self):
        x = T.tensor([1e30], dtype=T.F32)
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            T.mul(x, x)


class TestBackwardRules:
    def test_fanout_accumulates(self):
        x = T.tensor([3.0], dtype=T.F64, requires_grad=True)
        with T.Tape() as tp:
            y = T.add(x, x)
            tp.backward(T.sum_all(y))
        assert x.grad[0] == 2.0

    def test_grad_accumulates_across_tapes(self):
        x = T.tensor([1.0], dtype=T.F64, requires_grad=True)
        for _ in range(2):
            with T.Tape() as tp:
                tp.backward(T.sum_all(T.scale(x, 3.0)))
        assert x.grad[0] == 6.0

    def test_frozen_leaf_gets_no_grad(self):
        w = T.tensor([[1.0, 2.0]], dtype=T.F64, requires_grad=False)
        x = T.tensor([[1.0], [1.0]], dtype=T.F64, requires_grad=True)
        with T.Tape() as tp:
            tp.backward(T.sum_all(T.matmul(x, w)))
        assert w.grad is None and x.grad is not None

    def test_no_tape_records_nothing(self):
        x = T.tensor([1.0], dtype=T.F64, requires_grad=True)
        y = T.scale(x, 2.0)
        assert not y.requires_grad and y.grad is None


class TestGradientsAgainstFiniteDifferences:
    def test_elementwise_chain(self):
        rng = np.random.default_rng(10)
        a = randt(rng, (3, 4), name="a")
        b = randt(rng, (3, 4), name="b")
        check_op(lambda: T.sum_all(T.mul(T.silu(a), T.sigmoid(b))), [a, b])

    def test_add_sub_scale_bias(self):
        rng = np.random.default_rng(11)
        a = randt(rng, (2, 3))
        b = randt(rng, (2, 3))
        c = randt(rng, (3,))
        check_op(lambda: T.sum_all(T.add_bias(T.sub(T.scale(a, 1.7), b), c)), [a, b, c])

    def test_matmul_2d_and_batched(self):
        rng = np.random.default_rng(12)
        a = randt(rng, (3, 4))
        b = randt(rng, (4, 5))
        check_op(lambda: T.sum_all(T.matmul(a, b)), [a, b])
        c = randt(rng, (2, 3, 4))
        d = randt(rng, (2, 4, 5))
        check_op(lambda: T.sum_all(T.matmul(c, d)), [c, d])

    def test_linear(self):
        rng = np.random.default_rng(13)
        x = randt(rng, (2, 3, 4))
        w = randt(rng, (5, 4))
        check_op(lambda: T.sum_all(T.silu(T.linear(x, w))), [x, w])

    def test_reshape_permute_concat(self):
        rng = np.random.default_rng(14)
        a = randt(rng, (2, 3, 4))
        b = randt(rng, (2, 3, 2))
        check_op(
            lambda: T.sum_all(
                T.concat_last(T.permute(T.reshape(a, (2, 4, 3)), (0, 2, 1)), b)
            ),
            [a, b],
        )

    def test_index_select_with_repeats(self):
        rng = np.random.default_rng(15)
        x = randt(rng, (3, 4))
        idx = np.array([0, 2, 2, 1])
        check_op(lambda: T.sum_all(T.silu(T.index_select(x, 0, idx))), [x])

    def test_tile_rows(self):
        rng = np.random.default_rng(16)
        x = randt(rng, (1, 5))
        check_op(lambda: T.sum_all(T.sigmoid(T.tile_rows(x, 4))), [x])

    def test_softmax(self):
        rng = np.random.default_rng(17)
        x = randt(rng, (2, 6))
        w = randt(rng, (6,))
        check_op(lambda: T.sum_all(T.mul(T.softmax_last(x), T.tile_rows(T.reshape(w, (1, 6)), 2))), [x, w])

    def test_rms_norm(self):
        rng = np.random.default_rng(18)
        x = randt(rng, (4, 6))
        g = T.Tensor(rng.standard_normal(6) + 1.0, requires_grad=True)
        check_op(lambda: T.sum_all(T.silu(T.rms_norm(x, g))), [x, g])

    def test_mean_pool(self):
        rng = np.random.default_rng(19)
        h = randt(rng, (2, 4, 3))
        mask = np.array([[1.0, 1.0, 0.0, 1.0], [0.0, 1.0, 1.0, 1.0]])
        check_op(lambda: T.sum_all(T.silu(T.mean_pool(h, mask))), [h])

    def test_scale_ranks(self):
        rng = np.random.default_rng(20)
        u = randt(rng, (2, 3, 4))
        v = randt(rng, (2, 4))
        check_op(lambda: T.sum_all(T.silu(T.scale_ranks(u, v))), [u, v])

    def test_rope_grad(self):
        rng = np.random.default_rng(21)
        x = randt(rng, (1, 2, 3, 4))
        ang = np.arange(3)[:, None] * (1.0 / (10000.0 ** (np.arange(2)[None, :] / 2.0)))
        cos, sin = np.cos(ang), np.sin(ang)
        check_op(lambda: T.sum_all(T.silu(T.rope(x, cos, sin))), [x])

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(22)
        logits = randt(rng, (2, 3, 7))
        t = rng.integers(0, 7, size=(2, 3))
        m = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
        check_op(lambda: T.cross_entropy(logits, t, m), [logits])

    def test_attention_shaped_composite(self):
        # A miniature causal attention block exercising mask + softmax + matmul.
        rng = np.random.default_rng(23)
        q = randt(rng, (1, 2, 4, 3))
        k = randt(rng, (1, 2, 4, 3))
        v = randt(rng, (1, 2, 4, 3))

        def build():
            scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(3))
            probs = T.softmax_last(T.causal_mask(scores))
            return T.sum_all(T.silu(T.matmul(probs, v)))

        check_op(build, [q, k, v], tol=1e-5)
