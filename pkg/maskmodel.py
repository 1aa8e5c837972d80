"""
Masked Motion Model - label-conditioned bidirectional transformer over base
tokens, a residual-level token head and the zero-initialized control branch
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

import diffcore as dc
import editctl
import layers
from config import RunConfig, TransformerConfig, substream
from diffcore import NonFiniteError, ShapeError, Tensor
from kinematics import recover_global
from optim import AdamW
from tokenizer import DOWNSAMPLE, TokenizerWeights, decode

CONTROL_CHANNELS = 7  # per frame and joint: target xyz, mask, relative xyz


@dataclass
class BaseWeights:
    """
    Conditioned masked transformer

    Features:
    - Token table with a MASK row (id K)
    - Label table with a NULL row (id C) for classifier-free guidance
    - Residual-level token head conditioned on the running code sum
    """
    params: Dict[str, np.ndarray]
    config: TransformerConfig
    codebook_size: int
    tokens: int
    num_classes: int
    levels: int
    code_dim: int
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def null_label(self) -> int:
        return self.num_classes


@dataclass
class ControlWeights:
    """Trainable copy of the base layers, spatial projection and zero connectors"""
    params: Dict[str, np.ndarray]
    config: TransformerConfig
    num_joints: int
    history: List[Dict[str, float]] = field(default_factory=list)


def init_base(cfg: TransformerConfig, codebook_size: int, tokens: int, num_classes: int,
              levels: int, code_dim: int, seed: int) -> BaseWeights:
    rng = substream(seed, 'base')
    width = cfg.embed
    p: Dict[str, np.ndarray] = {}
    layers.init_embedding(rng, p, 'tok_emb', codebook_size + 1, width)
    layers.init_embedding(rng, p, 'pos_emb', tokens + 1, width)
    layers.init_embedding(rng, p, 'label_emb', num_classes + 1, width)
    for k in range(cfg.layers):
        layers.init_transformer_layer(rng, p, f'layer{k}', width, cfg.ff_mult)
    layers.init_norm(p, 'ln_f', width)
    layers.init_linear(rng, p, 'head', width, codebook_size)

    layers.init_linear(rng, p, 'res.in', code_dim, width)
    layers.init_embedding(rng, p, 'res.level_emb', max(levels, 1), width)
    layers.init_embedding(rng, p, 'res.label_emb', num_classes + 1, width)
    layers.init_conv3(rng, p, 'res.ctx', width, width)
    layers.init_norm(p, 'res.ln', width)
    layers.init_linear(rng, p, 'res.ff', width, cfg.residual_hidden)
    layers.init_linear(rng, p, 'res.out', cfg.residual_hidden, codebook_size)
    return BaseWeights(p, cfg, codebook_size, tokens, num_classes, levels, code_dim)


def init_control(base: BaseWeights, num_joints: int, seed: int) -> ControlWeights:
    """Copies every base layer; connectors start at exactly zero"""
    rng = substream(seed, 'control')
    cfg = base.config
    p: Dict[str, np.ndarray] = {}
    for k in range(cfg.layers):
        prefix = f'layer{k}.'
        for name, value in base.params.items():
            if name.startswith(prefix):
                p[name] = value.copy()
        layers.init_linear(rng, p, f'conn{k}', cfg.embed, cfg.embed, zero=True)
    layers.init_linear(rng, p, 'spatial', DOWNSAMPLE * num_joints * CONTROL_CHANNELS, cfg.embed)
    return ControlWeights(p, cfg, num_joints)


# ====================
# SCHEDULE AND MASKING
# ====================

def mask_schedule(step: int, total: int) -> float:
    """Fraction of tokens still masked after `step` of `total` iterations"""
    if total < 1 or step < 0 or step >= total:
        raise ValueError(f"mask_schedule: step {step} outside [0, {total})")
    return math.cos(math.pi * step / (2.0 * total))


def training_mask_ratio(rng: np.random.Generator, size=None):
    return np.cos(np.pi * rng.uniform(0.0, 1.0, size=size) / 2.0)


def corrupt(tokens: np.ndarray, ratio: float, rng: np.random.Generator, mask_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Replace ceil(ratio * t) uniformly chosen positions with MASK

    Returns:
        (masked ids, boolean mask positions)
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"corrupt: ratio must be in (0, 1], got {ratio}")
    tokens = np.asarray(tokens, dtype=np.int64)
    t = tokens.shape[0]
    count = min(t, max(1, int(math.ceil(ratio * t - 1e-12))))
    positions = rng.choice(t, size=count, replace=False)
    mask = np.zeros(t, dtype=bool)
    mask[positions] = True
    out = tokens.copy()
    out[mask] = mask_id
    return out, mask


def drop_labels(labels: np.ndarray, rate: float, rng: np.random.Generator, null_label: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).copy()
    labels[rng.uniform(size=labels.shape) < rate] = null_label
    return labels


def confidence_remask(probs: np.ndarray, sampled: np.ndarray, keep_masked: int,
                      frozen: Optional[Sequence[int]] = None, mask_id: Optional[int] = None) -> np.ndarray:
    """
    Send the n least confident non-frozen positions back to MASK

    Confidence is the probability of the sampled id; ties go to the lower position.
    """
    probs = np.asarray(probs, dtype=np.float64)
    sampled = np.asarray(sampled, dtype=np.int64)
    t, k = probs.shape
    mask_id = k if mask_id is None else mask_id
    frozen_set = set(int(i) for i in (frozen if frozen is not None else ()))
    if keep_masked < 0 or keep_masked > t - len(frozen_set):
        raise ValueError(f"confidence_remask: n={keep_masked} outside [0, {t - len(frozen_set)}]")
    confidence = probs[np.arange(t), sampled]
    candidates = np.array([i for i in range(t) if i not in frozen_set], dtype=np.int64)
    order = candidates[np.lexsort((candidates, confidence[candidates]))]
    out = sampled.copy()
    out[order[:keep_masked]] = mask_id
    return out


# ====================
# FORWARD PASSES
# ====================

def _as_batch(ids, labels) -> Tuple[np.ndarray, np.ndarray, bool]:
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] == 1 and ids.shape[0] > 1:
        labels = np.full(ids.shape[0], labels[0], dtype=np.int64)
    if labels.shape[0] != ids.shape[0]:
        raise ShapeError(f"labels {labels.shape} do not match token batch {ids.shape}")
    return ids, labels, single


def _embed_inputs(p: Dict[str, Tensor], ids: np.ndarray, labels: np.ndarray) -> Tensor:
    b, t = ids.shape
    width = p['tok_emb'].shape[1]
    tok = dc.gather(p['tok_emb'], ids)
    lab = dc.reshape(dc.gather(p['label_emb'], labels), (b, 1, width))
    h = dc.concat([lab, tok], axis=1)
    return h + dc.expand(p['pos_emb'][: t + 1], (b, t + 1, width))


def _head(p: Dict[str, Tensor], h: Tensor) -> Tensor:
    h = layers.norm_affine(p, 'ln_f', h)
    return layers.linear(p, 'head', h[:, 1:, :])


def forward_base(ids, labels, base: BaseWeights, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Logits (t, K) for one sequence or (B, t, K) for a batch

    The label embedding is prepended as a condition token; attention is
    bidirectional over label and tokens.
    """
    ids, labels, single = _as_batch(ids, labels)
    p = p if p is not None else layers.wrap(base.params)
    h = _embed_inputs(p, ids, labels)
    for k in range(base.config.layers):
        h = layers.transformer_layer(p, f'layer{k}', h, base.config.heads)
    logits = _head(p, h)
    return dc.reshape(logits, logits.shape[1:]) if single else logits


def control_window(targets: np.ndarray, mask: np.ndarray, relative: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-token control input: the 4-frame window of [S, sigma, sigma*(S - provisional)]

    Args:
        targets: (..., T, J, 3)
        mask: (..., T, J)
        relative: (..., T, J, 3) or None for zeros

    Returns:
        (..., T/4, 4 * J * 7)
    """
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if relative is None:
        relative = np.zeros_like(targets)
    frames, joints = mask.shape[-2:]
    if frames % DOWNSAMPLE != 0:
        raise ShapeError(f"control frame count {frames} is not divisible by {DOWNSAMPLE}")
    per_frame = np.concatenate([targets * mask[..., None], mask[..., None], relative * mask[..., None]], axis=-1)
    lead = per_frame.shape[:-3]
    return per_frame.reshape(lead + (frames // DOWNSAMPLE, DOWNSAMPLE * joints * CONTROL_CHANNELS))


def forward_controlled(ids, labels, window: np.ndarray, base: BaseWeights, ctrl: ControlWeights,
                       p_base: Optional[Dict[str, Tensor]] = None,
                       p_ctrl: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Logits with the control branch added after every base layer

    Args:
        ids: (t,) or (B, t) token ids, MASK allowed
        labels: label id(s), NULL allowed
        window: control_window output, (t, D) or (B, t, D)
    """
    ids, labels, single = _as_batch(ids, labels)
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[None]
    b, t = ids.shape
    if window.shape[:2] != (b, t):
        raise ShapeError(f"forward_controlled: control covers {window.shape[1] * DOWNSAMPLE} frames, "
                         f"tokens need {t * DOWNSAMPLE} (shapes {window.shape} vs {ids.shape})")
    pb = p_base if p_base is not None else layers.wrap(base.params)
    pc = p_ctrl if p_ctrl is not None else layers.wrap(ctrl.params)
    width = base.config.embed

    h = _embed_inputs(pb, ids, labels)
    spatial = layers.linear(pc, 'spatial', Tensor(window))
    hc = h + dc.concat([Tensor(np.zeros((b, 1, width))), spatial], axis=1)
    for k in range(base.config.layers):
        h = layers.transformer_layer(pb, f'layer{k}', h, base.config.heads)
        hc = layers.transformer_layer(pc, f'layer{k}', hc, base.config.heads)
        h = h + layers.linear(pc, f'conn{k}', hc)
    logits = _head(pb, h)
    return dc.reshape(logits, logits.shape[1:]) if single else logits


def forward_residual(running: np.ndarray, level: int, labels, base: BaseWeights,
                     p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Logits (..., t, K) for residual level `level` given the sum of the earlier levels' codes"""
    running = np.asarray(running, dtype=np.float64)
    single = running.ndim == 2
    if single:
        running = running[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    p = p if p is not None else layers.wrap(base.params)
    b, t, _ = running.shape
    if labels.shape[0] == 1 and b > 1:
        labels = np.full(b, labels[0], dtype=np.int64)
    width = base.config.embed
    h = layers.linear(p, 'res.in', Tensor(running))
    level_row = dc.reshape(p['res.level_emb'][level:level + 1], (1, 1, width))
    label_rows = dc.reshape(dc.gather(p['res.label_emb'], labels), (b, 1, width))
    h = h + dc.expand(level_row, h.shape) + dc.expand(label_rows, h.shape)
    h = h + dc.relu(layers.conv3(p, 'res.ctx', h))
    h = dc.relu(layers.linear(p, 'res.ff', layers.norm_affine(p, 'res.ln', h)))
    logits = layers.linear(p, 'res.out', h)
    return dc.reshape(logits, logits.shape[1:]) if single else logits


def cfg_logits(l_cond, l_uncond, scale: float):
    """l_uncond + scale * (l_cond - l_uncond); arrays in, array out"""
    if isinstance(l_cond, Tensor) or isinstance(l_uncond, Tensor):
        l_cond, l_uncond = dc.as_tensor(l_cond), dc.as_tensor(l_uncond)
        return l_uncond + (l_cond - l_uncond) * float(scale)
    l_cond, l_uncond = np.asarray(l_cond), np.asarray(l_uncond)
    if l_cond.shape != l_uncond.shape:
        raise ShapeError(f"cfg_logits: shape mismatch {l_cond.shape} vs {l_uncond.shape}")
    return l_uncond + scale * (l_cond - l_uncond)


def masked_nll(logits: Tensor, targets: np.ndarray, mask_positions: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over masked positions"""
    logits = dc.as_tensor(logits)
    mask = np.asarray(mask_positions, dtype=np.float64)
    count = float(mask.sum())
    if count == 0:
        raise ValueError("masked_nll: no masked positions")
    picked = dc.pick_last(dc.log_softmax(logits), np.asarray(targets, dtype=np.int64))
    return -(dc.sum_(picked * Tensor(mask)) / count)


def predict_residual_levels(base: BaseWeights, tokenizer: TokenizerWeights, level0: np.ndarray, label: int,
                            cfg_scale: float = 5.0, temperature: float = 1e-8,
                            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Fill residual levels 1..V-1 for base ids (t,)

    Near-zero temperature decodes greedily; otherwise samples from the guided logits.
    """
    ids = np.zeros((level0.shape[0], tokenizer.levels), dtype=np.int64)
    ids[:, 0] = level0
    p = layers.wrap(base.params)
    for v in range(1, tokenizer.levels):
        running = tokenizer.embed(ids, levels=v)
        cond = forward_residual(running, v, label, base, p).data
        uncond = forward_residual(running, v, base.null_label, base, p).data
        guided = cfg_logits(cond, uncond, cfg_scale)
        if temperature <= 1e-6 or rng is None:
            ids[:, v] = np.argmax(guided, axis=-1)
        else:
            g = -np.log(-np.log(rng.uniform(1e-12, 1.0, size=guided.shape)))
            ids[:, v] = np.argmax(guided / temperature + g, axis=-1)
    return ids


# ====================
# TRAINING
# ====================

def _corrupt_batch(level0: np.ndarray, rng: np.random.Generator, mask_id: int) -> Tuple[np.ndarray, np.ndarray]:
    masked = np.empty_like(level0)
    positions = np.zeros(level0.shape, dtype=bool)
    ratios = training_mask_ratio(rng, size=level0.shape[0])
    for i in range(level0.shape[0]):
        masked[i], positions[i] = corrupt(level0[i], max(float(ratios[i]), 1e-9), rng, mask_id)
    return masked, positions


def _residual_loss(base: BaseWeights, tokenizer: TokenizerWeights, p: Dict[str, Tensor],
                   ids: np.ndarray, labels: np.ndarray) -> Optional[Tensor]:
    total = None
    everywhere = np.ones(ids.shape[:2], dtype=bool)
    for v in range(1, tokenizer.levels):
        logits = forward_residual(tokenizer.embed(ids, levels=v), v, labels, base, p)
        nll = masked_nll(logits, ids[..., v], everywhere)
        total = nll if total is None else total + nll
    return total


def _abort(stage: str, epoch: int, step: int, last: float, err: Exception):
    logger.error(f"{stage} diverged at epoch {epoch} step {step} (last finite loss {last:.6f})")
    raise NonFiniteError(f"{stage} training diverged at epoch {epoch} step {step}: {err}") from err


def train_base(features: np.ndarray, labels: np.ndarray, tokenizer: TokenizerWeights, cfg: RunConfig,
               seed: Optional[int] = None) -> BaseWeights:
    """
    Train the masked transformer and the residual head on tokenized clips

    Args:
        features: (N, T, F) training features
        labels: (N,) class ids
        tokenizer: trained, frozen tokenizer
        cfg: run configuration
        seed: master seed (defaults to cfg.seed)
    """
    seed = cfg.seed if seed is None else seed
    tcfg = cfg.transformer
    ids = tokenizer.tokenize(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n, t, _ = ids.shape
    base = init_base(tcfg, tokenizer.config.codebook_size, t, cfg.num_classes, tokenizer.levels,
                     tokenizer.config.code_dim, seed)
    shuffle_rng = substream(seed, 'base', 1)
    mask_rng = substream(seed, 'masking')
    names = list(base.params)
    opt = AdamW(base.params, lr=tcfg.lr, warmup_steps=tcfg.warmup_steps, names=names)
    logger.info(f"✓ Masked transformer initialized (L={tcfg.layers}, E={tcfg.embed}, heads={tcfg.heads})")

    last_finite = float('nan')
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(2)
        batches = 0
        for step, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            masked, positions = _corrupt_batch(ids[idx, :, 0], mask_rng, base.mask_id)
            batch_labels = drop_labels(labels[idx], tcfg.label_dropout, mask_rng, base.null_label)
            p = layers.wrap(base.params, trainable=True)
            try:
                nll = masked_nll(forward_base(masked, batch_labels, base, p), ids[idx, :, 0], positions)
                res = _residual_loss(base, tokenizer, p, ids[idx], batch_labels)
                loss = nll if res is None else nll + res
                dc.backward(loss)
                opt.step({k: p[k].grad for k in names})
            except NonFiniteError as e:
                _abort('Masked transformer', epoch, step, last_finite, e)
            last_finite = float(loss.data)
            sums += [float(nll.data), 0.0 if res is None else float(res.data)]
            batches += 1
        row = {'epoch': epoch, 'loss': sums[0] / batches, 'residual': sums[1] / batches}
        base.history.append(row)
        logger.debug(f"Base epoch {epoch}: masked nll={row['loss']:.4f} residual nll={row['residual']:.4f}")

    final = base.history[-1]['loss'] if base.history else float('nan')
    logger.success(f"✅ Masked transformer trained: final masked NLL {final:.4f} (log K = {math.log(base.codebook_size):.4f})")
    return base


def random_control(motion: np.ndarray, rng: np.random.Generator, levels: Sequence[int],
                   max_joints: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-truth targets on a random joint subset at a random density level"""
    frames, joints, _ = motion.shape
    mask = np.zeros((frames, joints))
    chosen = rng.choice(joints, size=int(rng.integers(1, min(max_joints, joints) + 1)), replace=False)
    density = int(levels[int(rng.integers(0, len(levels)))])
    for j in chosen:
        keyframes = rng.choice(frames, size=min(density, frames), replace=False)
        mask[keyframes, j] = 1.0
    return motion * mask[..., None], mask


def density_levels(frames: int) -> List[int]:
    return [1, 2, 5, max(1, frames // 4), frames]


def train_control(features: np.ndarray, motions: np.ndarray, labels: np.ndarray, base: BaseWeights,
                  tokenizer: TokenizerWeights, cfg: RunConfig, seed: Optional[int] = None) -> ControlWeights:
    """
    Train only the control branch with alpha * masked NLL + (1 - alpha) * consistency loss

    The consistency term samples masked positions through the straight-through
    estimator, decodes with the frozen tokenizer and recovers global positions.
    Base and tokenizer weights are never updated.
    """
    seed = cfg.seed if seed is None else seed
    tcfg = cfg.transformer
    features = np.asarray(features, dtype=np.float64)
    motions = np.asarray(motions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = tokenizer.tokenize(features)
    n, t, _ = ids.shape
    frames, joints = motions.shape[1:3]
    ctrl = init_control(base, joints, seed)
    rng = substream(seed, 'control', 1)
    mask_rng = substream(seed, 'masking', 1)
    gumbel_rng = substream(seed, 'gumbel')
    names = list(ctrl.params)
    opt = AdamW(ctrl.params, lr=tcfg.control_lr, warmup_steps=tcfg.warmup_steps, names=names)
    p_base = layers.wrap(base.params)
    p_tok = layers.wrap(tokenizer.params)
    book = tokenizer.codebook(0)
    stand_in = editctl.mask_embedding(book)
    full_embed = tokenizer.embed(ids)
    levels = density_levels(frames)
    logger.info(f"✓ Control branch initialized ({len(names)} tensors, alpha={tcfg.alpha})")

    last_finite = float('nan')
    for epoch in range(tcfg.control_epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for step, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            masked, positions = _corrupt_batch(ids[idx, :, 0], mask_rng, base.mask_id)
            batch_labels = drop_labels(labels[idx], tcfg.label_dropout, mask_rng, base.null_label)
            controls = [random_control(motions[i], rng, levels) for i in idx]
            targets = np.stack([c[0] for c in controls])
            sigma = np.stack([c[1] for c in controls])

            provisional_codes = np.where((masked == base.mask_id)[..., None], stand_in[None, None, :],
                                         book[np.minimum(masked, base.mask_id - 1)])
            provisional = recover_global(decode(provisional_codes, tokenizer, p_tok).data, joints)
            window = control_window(targets, sigma, sigma[..., None] * (targets - provisional))

            p_ctrl = layers.wrap(ctrl.params, trainable=True)
            try:
                logits = forward_controlled(masked, batch_labels, window, base, ctrl, p_base, p_ctrl)
                nll = masked_nll(logits, ids[idx, :, 0], positions)
                noise = editctl.gumbel_noise(logits.shape, gumbel_rng)
                probs = editctl.gumbel_softmax(logits, noise, 1.0)
                sampled = editctl.dcse_embed(probs, book)
                keep = positions[..., None].astype(np.float64)
                codes = sampled * Tensor(np.broadcast_to(keep, sampled.shape).copy()) \
                    + Tensor(full_embed[idx] * (1.0 - keep))
                motion = recover_global(decode(codes, tokenizer, p_tok), joints)
                ls = editctl.consistency_loss_global(motion, targets, sigma)
                loss = editctl.combined_train_loss(nll, ls, tcfg.alpha)
                dc.backward(loss)
                opt.step({k: p_ctrl[k].grad for k in names})
            except NonFiniteError as e:
                _abort('Control branch', epoch, step, last_finite, e)
            last_finite = float(loss.data)
            sums += [float(loss.data), float(nll.data), float(ls.data)]
            batches += 1
        row = {'epoch': epoch, 'loss': sums[0] / batches, 'nll': sums[1] / batches, 'consistency': sums[2] / batches}
        ctrl.history.append(row)
        logger.debug(f"Control epoch {epoch}: loss={row['loss']:.4f} nll={row['nll']:.4f} "
                     f"consistency={row['consistency']:.4f}")

    final = ctrl.history[-1]['consistency'] if ctrl.history else float('nan')
    logger.success(f"✅ Control branch trained: final consistency loss {final:.4f}")
    return ctrl
