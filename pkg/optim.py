"""
AdamW optimizer with linear warm-up for dict-of-array parameters
"""
from typing import Dict, Iterable, Optional

import numpy as np
from loguru import logger

from diffcore import NonFiniteError


class AdamW:
    """
    Decoupled-weight-decay Adam

    The learning rate ramps linearly from 0 to `lr` over `warmup_steps`
    updates and stays flat afterwards.
    """

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-3, warmup_steps: int = 100,
                 betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.0,
                 clip_norm: Optional[float] = 1.0, names: Optional[Iterable[str]] = None):
        self.params = params
        self.names = list(names) if names is not None else list(params.keys())
        self.lr = lr
        self.warmup_steps = max(0, int(warmup_steps))
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}

    def current_lr(self) -> float:
        if self.warmup_steps == 0:
            return self.lr
        return self.lr * min(1.0, (self.step_count + 1) / self.warmup_steps)

    def step(self, grads: Dict[str, Optional[np.ndarray]]):
        # unreached parameters count as a zero gradient
        grads = {k: (grads[k] if grads.get(k) is not None else np.zeros_like(self.params[k])) for k in self.names}
        total = float(np.sqrt(sum(float((grads[k] ** 2).sum()) for k in self.names)))
        if not np.isfinite(total):
            logger.error(f"Non-finite gradient norm at optimizer step {self.step_count}")
            raise NonFiniteError(f"non-finite gradient at optimizer step {self.step_count}")
        scale = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            scale = self.clip_norm / total

        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k in self.names:
            g = grads[k] * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                self.params[k] -= lr * self.weight_decay * self.params[k]
            self.params[k] -= lr * update
        return total
