"""
Edit Control - differentiable token sampling and inference-time editing

Features:
- Gumbel noise and Gumbel-softmax with max-subtraction
- Straight-through embedding: exact table row forward, soft average backward
- Consistency loss between spatial targets and recovered joint positions
- Sphere obstacle SDF loss with a safe-distance clamp
- Gradient descent on logits and on the selected code vectors
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

import diffcore as dc
import layers
from diffcore import ABS_SMOOTH_EPS, NonFiniteError, ShapeError, Tensor
from kinematics import SpatialControl, recover_global
from tokenizer import CodebookError, TokenizerWeights, decode

LossFn = Callable[[Tensor], Tensor]

# joints closer than this to an obstacle center are pushed along ESCAPE_DIRECTION
CENTER_TOL = 1e-6
ESCAPE_DIRECTION = np.array([1.0, 0.0, 0.0])


class ControlSpecError(ValueError):
    """Raised for malformed or empty control conditions"""


@dataclass
class EditConfig:
    """Step sizes and counts for logit and codebook editing"""
    lr_logits: float = 0.06
    steps_logits: int = 0
    lr_code: float = 0.06
    steps_code: int = 100
    temperature: float = 1.0
    consistency_weight: float = 1.0
    obstacle_weight: float = 1.0
    normalize_steps: bool = False    # step length lr on the largest gradient row

    def __post_init__(self):
        if self.steps_logits < 0 or self.steps_code < 0:
            raise ValueError("edit step counts must be non-negative")
        if self.lr_logits < 0 or self.lr_code < 0:
            raise ValueError("edit step sizes must be non-negative")
        if self.temperature <= 0:
            raise ValueError("edit temperature must be positive")


@dataclass
class Obstacle:
    """Sphere obstacle; center is (3,) or one center per frame (T, 3)"""
    center: np.ndarray
    radius: float
    safe_distance: float = 0.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.shape[-1] != 3 or self.center.ndim not in (1, 2):
            raise ControlSpecError(f"obstacle center must be (3,) or (T, 3), got {self.center.shape}")
        if self.radius <= 0:
            raise ControlSpecError(f"obstacle radius must be positive, got {self.radius}")
        if self.safe_distance < 0:
            raise ControlSpecError(f"safe distance must be non-negative, got {self.safe_distance}")

    def centers(self, frames: int) -> np.ndarray:
        if self.center.ndim == 1:
            return np.broadcast_to(self.center, (frames, 3)).copy()
        if self.center.shape[0] != frames:
            raise ControlSpecError(f"moving obstacle has {self.center.shape[0]} centers for {frames} frames")
        return self.center.copy()


@dataclass
class EditResult:
    value: np.ndarray
    trace: List[float] = field(default_factory=list)


# ====================
# SAMPLING
# ====================

def gumbel_from_uniform(u):
    return -np.log(-np.log(np.asarray(u, dtype=np.float64)))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) samples, u drawn from the open interval (0, 1)"""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return gumbel_from_uniform(u)


def gumbel_softmax(logits, noise: Optional[np.ndarray], temperature: float) -> Tensor:
    """Row-wise softmax((logits + noise) / temperature); noise may be None for zero"""
    if temperature <= 0:
        raise ValueError(f"gumbel_softmax: temperature must be positive, got {temperature}")
    logits = dc.as_tensor(logits)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != logits.shape:
            raise ShapeError(f"gumbel_softmax: shape mismatch {logits.shape} vs {noise.shape}")
        logits = logits + Tensor(noise)
    return dc.softmax(logits * (1.0 / temperature))


def dcse_embed(probs: Tensor, table) -> Tensor:
    """
    Straight-through embedding lookup

    Forward returns the table row of the hard (argmax) choice; backward
    behaves like the probability-weighted average of the rows.
    """
    probs = dc.as_tensor(probs)
    table = dc.as_tensor(table)
    if table.ndim != 2 or table.shape[0] != probs.shape[-1]:
        raise ShapeError(f"dcse_embed: shape mismatch {probs.shape} vs {table.shape}")
    squeeze = probs.ndim == 1
    if squeeze:
        probs = dc.reshape(probs, (1,) + probs.shape)
    soft = dc.matmul(probs, table)
    hard = table.data[np.argmax(probs.data, axis=-1)]
    out = dc.straight_through(soft, hard)
    return dc.reshape(out, out.shape[1:]) if squeeze else out


def dcse_token_embed(probs: Tensor, token_table) -> Tensor:
    """Transformer-space variant: rows are the token embeddings without the MASK row"""
    table = dc.as_tensor(token_table)
    k = probs.shape[-1]
    if table.shape[0] < k:
        raise ShapeError(f"dcse_token_embed: shape mismatch {probs.shape} vs {table.shape}")
    return dcse_embed(probs, table[:k] if table.shape[0] > k else table)


def mask_embedding(book: np.ndarray) -> np.ndarray:
    """Stand-in decoder input for MASK: the mean of the base codebook rows"""
    book = np.asarray(book, dtype=np.float64)
    if book.ndim != 2 or book.shape[0] == 0:
        raise CodebookError("mask_embedding: codebook is empty")
    return book.mean(axis=0)


# ====================
# LOSSES
# ====================

def consistency_loss_global(motion: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked mean Euclidean distance between motion (..., T, J, 3) and targets"""
    mask = np.asarray(mask, dtype=np.float64)
    active = float(mask.sum())
    if active == 0:
        raise ControlSpecError("consistency loss needs at least one controlled entry")
    motion = dc.as_tensor(motion)
    if motion.shape != np.shape(targets) or motion.shape[:-1] != mask.shape:
        raise ShapeError(f"consistency_loss: shape mismatch {motion.shape} vs {np.shape(targets)} / {mask.shape}")
    target = Tensor(np.asarray(targets, dtype=np.float64) * mask[..., None])
    dist = dc.norm(target - motion, eps=ABS_SMOOTH_EPS)
    return dc.sum_(dist * Tensor(mask)) / active


def consistency_loss(codes: Tensor, control: SpatialControl, tokenizer: TokenizerWeights,
                     p_tok: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """L_s for code vectors (t, d): decode, recover global positions, compare on controlled entries"""
    motion = recover_global(decode(codes, tokenizer, p_tok), tokenizer.num_joints)
    return consistency_loss_global(motion, control.targets, control.mask)


def combined_train_loss(nll, ls, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return nll * alpha + ls * (1.0 - alpha)


def sdf_sphere(point, center, radius: float):
    if radius <= 0:
        raise ValueError(f"sdf_sphere: radius must be positive, got {radius}")
    diff = np.asarray(point, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return np.linalg.norm(diff, axis=-1) - radius


def obstacle_loss(motion: Tensor, obstacles: Sequence[Obstacle], selector: np.ndarray) -> Tensor:
    """
    Sum over obstacles and selected (frame, joint) entries of -min(SDF, d)

    Entries at SDF >= d contribute the constant -d and no gradient.
    """
    if not obstacles:
        raise ControlSpecError("obstacle_loss needs at least one obstacle")
    motion = dc.as_tensor(motion)
    frames, joints, _ = motion.shape
    selector = np.asarray(selector, dtype=np.float64)
    if selector.shape != (frames, joints):
        raise ShapeError(f"obstacle_loss: selector {selector.shape} vs motion {motion.shape}")
    weight = Tensor(selector)
    total = None
    for obstacle in obstacles:
        centers = np.repeat(obstacle.centers(frames)[:, None, :], joints, axis=1)
        centers = _nudge_centers(motion.data, centers)
        sdf = dc.norm(motion - Tensor(centers), eps=ABS_SMOOTH_EPS) - obstacle.radius
        term = dc.sum_(dc.neg(dc.minimum(sdf, obstacle.safe_distance)) * weight)
        total = term if total is None else total + term
    return total


def _nudge_centers(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Move centers that coincide with a joint so the distance gradient is defined"""
    close = np.linalg.norm(points - centers, axis=-1) < CENTER_TOL
    if not close.any():
        return centers
    centers = centers.copy()
    centers[close] -= CENTER_TOL * ESCAPE_DIRECTION
    return centers


def obstacle_report(motion: np.ndarray, obstacles: Sequence[Obstacle], selector: np.ndarray) -> Dict[str, float]:
    """Minimum SDF over selected entries and how many sit inside an obstacle"""
    selected = np.asarray(selector) > 0
    min_sdf = float('inf')
    inside = 0
    for obstacle in obstacles:
        centers = np.repeat(obstacle.centers(motion.shape[0])[:, None, :], motion.shape[1], axis=1)
        sdf = sdf_sphere(motion, centers, obstacle.radius)[selected]
        if sdf.size:
            min_sdf = min(min_sdf, float(sdf.min()))
            inside += int((sdf < 0).sum())
    return {'min_sdf': min_sdf, 'violations': inside}


class EditObjective:
    """
    Differentiable editing objective over code vectors (t, d)

    consistency_weight * L_s (when a spatial control is present) plus
    obstacle_weight * obstacle loss (when obstacles are present).
    """

    def __init__(self, tokenizer: TokenizerWeights, control: Optional[SpatialControl] = None,
                 obstacles: Optional[Sequence[Obstacle]] = None, selector: Optional[np.ndarray] = None,
                 consistency_weight: float = 1.0, obstacle_weight: float = 1.0):
        self.tokenizer = tokenizer
        self.p_tok = layers.wrap(tokenizer.params)
        self.control = control if control is not None and not control.is_empty() else None
        self.obstacles = list(obstacles or [])
        self.selector = selector
        self.consistency_weight = consistency_weight
        self.obstacle_weight = obstacle_weight
        if self.obstacles and selector is None:
            raise ControlSpecError("obstacle avoidance needs a joint selector")

    @property
    def active(self) -> bool:
        use_obstacles = bool(self.obstacles) and self.obstacle_weight != 0
        return self.control is not None or use_obstacles

    def motion(self, codes: Tensor) -> Tensor:
        return recover_global(decode(codes, self.tokenizer, self.p_tok), self.tokenizer.num_joints)

    def __call__(self, codes: Tensor) -> Tensor:
        motion = self.motion(codes)
        total = None
        if self.control is not None:
            total = consistency_loss_global(motion, self.control.targets, self.control.mask) * self.consistency_weight
        if self.obstacles and self.obstacle_weight != 0:
            term = obstacle_loss(motion, self.obstacles, self.selector) * self.obstacle_weight
            total = term if total is None else total + term
        if total is None:
            raise ControlSpecError("edit objective has neither a spatial control nor obstacles")
        return total

    def via_logits(self, noise: np.ndarray, temperature: float, table: np.ndarray,
                   fixed_codes: np.ndarray, free: np.ndarray) -> LossFn:
        """Objective of logits: sample free positions through the straight-through embedding"""
        free_w = np.broadcast_to(np.asarray(free, dtype=np.float64)[:, None], fixed_codes.shape).copy()
        fixed = Tensor(np.asarray(fixed_codes, dtype=np.float64) * (1.0 - free_w))

        def loss_fn(logits: Tensor) -> Tensor:
            sampled = dcse_embed(gumbel_softmax(logits, noise, temperature), table)
            return self(sampled * Tensor(free_w) + fixed)

        return loss_fn


# ====================
# EDITING LOOPS
# ====================

def _descend(x0: np.ndarray, loss_fn: LossFn, lr: float, steps: int, what: str,
             normalize: bool = False) -> EditResult:
    x = np.array(x0, dtype=np.float64, copy=True)
    trace: List[float] = []
    for step in range(steps):
        xt = Tensor(x, requires_grad=True)
        try:
            loss = loss_fn(xt)
            dc.backward(loss)
        except NonFiniteError as e:
            logger.error(f"{what} editing produced a non-finite value at step {step}")
            raise NonFiniteError(f"{what} editing failed at step {step}: {e}") from e
        trace.append(float(loss.data))
        grad = xt.grad
        if normalize:
            scale = float(np.linalg.norm(grad, axis=-1).max()) if grad.size else 0.0
            if scale == 0.0:
                continue
            grad = grad / scale
        x = x - lr * grad
    if steps:
        logger.debug(f"{what} editing: {steps} steps, loss {trace[0]:.5f} -> {trace[-1]:.5f}")
    return EditResult(x, trace)


def logit_edit(l0: np.ndarray, loss_fn: LossFn, cfg: EditConfig) -> EditResult:
    """l <- l - lr * grad L(l) for cfg.steps_logits steps; trace holds the loss before each step"""
    return _descend(l0, loss_fn, cfg.lr_logits, cfg.steps_logits, 'Logit', cfg.normalize_steps)


def codebook_edit(e0: np.ndarray, loss_fn: LossFn, cfg: EditConfig) -> EditResult:
    """e <- e - lr * grad L(e) on the selected code vectors; the stored codebook is untouched"""
    return _descend(e0, loss_fn, cfg.lr_code, cfg.steps_code, 'Codebook', cfg.normalize_steps)


def trace_frame(trace: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({'step': np.arange(len(trace)), 'loss': np.asarray(trace, dtype=np.float64)})
