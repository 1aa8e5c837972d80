"""
Diffcore tests - gradients against finite differences, shape and finiteness errors
"""
import numpy as np
import pytest

import diffcore as dc
from config import TokenizerConfig
from diffcore import GatherIndexError, NonFiniteError, ShapeError, Tensor
from editctl import consistency_loss_global, gumbel_softmax
from kinematics import recover_global
from tokenizer import decode, init_tokenizer

TOL = 1e-6


def weighted(y: Tensor, seed: int = 0) -> Tensor:
    """Scalar projection sum(w * y) with fixed random weights"""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return dc.sum_(y * Tensor(w))


class TestArithmetic:
    def test_binary_ops(self, rng):
        c = rng.uniform(0.5, 2.0, size=(3, 4))
        for op in (dc.add, dc.sub, dc.mul, dc.div):
            assert dc.gradcheck(lambda x: weighted(op(x, Tensor(c))), rng.uniform(0.5, 2.0, size=(3, 4))) < TOL
            assert dc.gradcheck(lambda x: weighted(op(Tensor(c), x)), rng.uniform(0.5, 2.0, size=(3, 4))) < TOL

    def test_scalar_ops(self, rng):
        x0 = rng.normal(size=(2, 5))
        assert dc.gradcheck(lambda x: weighted(x * 3.0 + 1.5), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(dc.div(x, 4.0) - 2.0), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(-x), x0) < TOL

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dc.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError):
            dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestLinearAlgebra:
    def test_matmul_shared_right(self, rng):
        w = rng.normal(size=(4, 3))
        assert dc.gradcheck(lambda x: weighted(dc.matmul(x, Tensor(w))), rng.normal(size=(2, 5, 4))) < TOL
        x = rng.normal(size=(2, 5, 4))
        assert dc.gradcheck(lambda m: weighted(dc.matmul(Tensor(x), m)), w) < TOL

    def test_matmul_batched(self, rng):
        b = rng.normal(size=(2, 4, 3))
        assert dc.gradcheck(lambda x: weighted(dc.matmul(x, Tensor(b))), rng.normal(size=(2, 5, 4))) < TOL

    def test_shape_ops(self, rng):
        x0 = rng.normal(size=(2, 3, 4))
        assert dc.gradcheck(lambda x: weighted(dc.transpose(x, (2, 0, 1))), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(dc.reshape(x, (6, 4))), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(dc.concat([x, x * 2.0], axis=1)), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(x[:, 1:, ::2]), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(x[:, [0, 2, 2], :]), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(dc.expand(x[:, :1, :], (5, 2, 3, 4))), x0) < TOL

    def test_gather_and_pick(self, rng):
        ids = np.array([[0, 2], [2, 1]])
        assert dc.gradcheck(lambda t: weighted(dc.gather(t, ids)), rng.normal(size=(3, 4))) < TOL
        picks = np.array([[1, 0, 3], [2, 2, 0]])
        assert dc.gradcheck(lambda a: weighted(dc.pick_last(a, picks)), rng.normal(size=(2, 3, 4))) < TOL

    def test_index_errors(self):
        with pytest.raises(GatherIndexError):
            dc.gather(Tensor(np.zeros((3, 2))), np.array([0, 3]))
        with pytest.raises(GatherIndexError):
            dc.pick_last(Tensor(np.zeros((2, 3))), np.array([0, -1]))
        with pytest.raises(ShapeError):
            dc.reshape(Tensor(np.zeros(6)), (4, 2))


class TestReductionsAndFunctions:
    def test_reductions(self, rng):
        x0 = rng.normal(size=(3, 4, 2))
        assert dc.gradcheck(lambda x: weighted(dc.sum_(x, axis=1)), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(dc.mean(x, axis=(0, 2), keepdims=True)), x0) < TOL
        assert dc.gradcheck(lambda x: weighted(dc.cumsum(x, axis=-2)), x0) < TOL

    def test_elementwise(self, rng):
        pos = rng.uniform(0.5, 2.0, size=(3, 4))
        away = rng.uniform(0.3, 1.0, size=(3, 4)) * np.where(rng.uniform(size=(3, 4)) < 0.5, -1.0, 1.0)
        for fn, x0 in ((dc.exp, away), (dc.log, pos), (dc.sqrt, pos), (dc.square, away),
                       (dc.abs_smooth, away), (dc.relu, away), (dc.sin, away), (dc.cos, away)):
            assert dc.gradcheck(lambda x: weighted(fn(x)), x0) < TOL, fn.__name__
        assert dc.gradcheck(lambda x: weighted(dc.minimum(x, 0.0)), away) < TOL

    def test_normalizers(self, rng):
        x0 = rng.normal(size=(2, 3, 5))
        for fn in (dc.softmax, dc.log_softmax, dc.layer_norm, dc.norm):
            assert dc.gradcheck(lambda x: weighted(fn(x)), x0) < TOL, fn.__name__

    def test_softmax_rows_sum_to_one(self, rng):
        y = dc.softmax(Tensor(rng.normal(size=(4, 7)) * 50.0)).data
        assert np.allclose(y.sum(axis=-1), 1.0)

    def test_abs_smooth_at_zero(self):
        _, g = dc.value_and_grad(lambda x: dc.sum_(dc.abs_smooth(x)), np.zeros(3))
        assert np.all(np.isfinite(g))
        assert np.allclose(g, 0.0)


class TestGradientRouting:
    def test_stop_gradient(self, rng):
        x0 = rng.normal(size=4)
        _, g = dc.value_and_grad(lambda x: dc.sum_(dc.stop_gradient(x) * x), x0)
        assert np.allclose(g, x0)

    def test_straight_through(self, rng):
        forward = rng.normal(size=(2, 3))
        x0 = rng.normal(size=(2, 3))
        out = dc.straight_through(Tensor(x0), forward)
        assert np.array_equal(out.data, forward)
        _, g = dc.value_and_grad(lambda x: dc.sum_(dc.straight_through(x, forward) * 2.0), x0)
        assert np.allclose(g, 2.0)

    def test_unused_input_gets_zero_gradient(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        loss = dc.sum_(a)
        dc.backward(loss)
        assert b.grad is None
        assert np.allclose(a.grad, 1.0)

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            dc.backward(Tensor(np.zeros(3), requires_grad=True) * 2.0)

    def test_non_finite_forward(self):
        with pytest.raises(NonFiniteError):
            dc.log(Tensor(np.array([-1.0, 1.0])))

    def test_primitive_set(self):
        names = dc.primitive_set()
        assert len(names) == len(set(names))
        assert {'matmul', 'softmax', 'straight_through', 'cumsum'} <= set(names)


class TestFullChain:
    def test_logits_to_consistency_loss(self):
        """logits -> gumbel-softmax -> soft code mix -> decode -> recover -> consistency"""
        cfg = TokenizerConfig(codebook_size=4, code_dim=4, levels=1, hidden=8)
        tok = init_tokenizer(cfg, num_joints=3, seed=11)
        rng = np.random.default_rng(5)
        t = 2
        book = tok.codebook(0)
        noise = rng.gumbel(size=(t, cfg.codebook_size))
        targets = rng.normal(size=(4 * t, 3, 3))
        mask = (rng.uniform(size=(4 * t, 3)) < 0.5).astype(float)
        mask[0, 0] = 1.0

        def chain(logits):
            probs = gumbel_softmax(logits, noise, 1.0)
            codes = dc.matmul(probs, Tensor(book))
            motion = recover_global(decode(codes, tok), 3)
            return consistency_loss_global(motion, targets, mask)

        assert dc.gradcheck(chain, rng.normal(size=(t, cfg.codebook_size))) < TOL
