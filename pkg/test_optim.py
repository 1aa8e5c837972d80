"""
Optimizer tests - warm-up, clipping, non-finite gradients
"""
import numpy as np
import pytest

from diffcore import NonFiniteError
from optim import AdamW


class TestAdamW:
    def test_warmup(self):
        opt = AdamW({'w': np.zeros(2)}, lr=1.0, warmup_steps=4)
        rates = []
        for _ in range(6):
            rates.append(opt.current_lr())
            opt.step({'w': np.ones(2)})
        assert rates == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]

    def test_first_step_moves_by_lr(self):
        params = {'w': np.array([1.0, -1.0])}
        opt = AdamW(params, lr=0.1, warmup_steps=0)
        opt.step({'w': np.array([0.3, -0.2])})
        assert np.allclose(params['w'], [0.9, -0.9], atol=1e-6)

    def test_clipping_reports_norm(self):
        opt = AdamW({'w': np.zeros(2)}, lr=0.1, warmup_steps=0, clip_norm=1.0)
        assert opt.step({'w': np.array([3.0, 4.0])}) == pytest.approx(5.0)

    def test_missing_gradient_is_zero(self):
        params = {'a': np.ones(2), 'b': np.ones(3)}
        opt = AdamW(params, lr=0.1, warmup_steps=0)
        opt.step({'a': np.ones(2), 'b': None})
        assert np.array_equal(params['b'], np.ones(3))
        assert np.all(params['a'] < 1.0)

    def test_non_finite_gradient(self):
        params = {'w': np.zeros(2)}
        opt = AdamW(params, lr=0.1)
        with pytest.raises(NonFiniteError):
            opt.step({'w': np.array([np.nan, 0.0])})
        assert np.array_equal(params['w'], np.zeros(2))
