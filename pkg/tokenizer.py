"""
Motion Tokenizer - temporal encoder, residual vector quantization, decoder

The encoder halves the frame rate twice (factor 4), each level of the
residual quantizer snaps the remaining residual to its nearest code and the
decoder mirrors the encoder back to MotionFeatures.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

import diffcore as dc
import layers
from config import RunConfig, TokenizerConfig, substream
from diffcore import NonFiniteError, ShapeError, Tensor
from kinematics import feature_width
from optim import AdamW

DOWNSAMPLE = 4
STD_FLOOR = 1e-4


class CodebookError(ValueError):
    """Raised for an empty or malformed codebook"""


@dataclass
class TokenizerWeights:
    """Encoder/decoder parameters, codebook levels and feature statistics"""
    params: Dict[str, np.ndarray]
    config: TokenizerConfig
    num_joints: int
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return self.config.levels

    @property
    def feature_dim(self) -> int:
        return feature_width(self.num_joints)

    def codebook(self, level: int = 0) -> np.ndarray:
        return self.params[f'codebook.{level}']

    def codebooks(self) -> List[np.ndarray]:
        return [self.codebook(v) for v in range(self.levels)]

    def trainable_names(self) -> List[str]:
        return [k for k in self.params if not k.startswith('stats.')]

    def tokenize(self, features: np.ndarray) -> np.ndarray:
        """(..., T, F) features -> (..., t, V) token ids"""
        z = encode(features, self).data
        ids, _ = residual_quantize(z, self.codebooks())
        return ids

    def embed(self, ids: np.ndarray, levels: Optional[int] = None) -> np.ndarray:
        """Sum of the per-level code vectors for (..., t, V) ids"""
        levels = self.levels if levels is None else levels
        ids = np.asarray(ids, dtype=np.int64)
        return sum(self.codebook(v)[ids[..., v]] for v in range(levels))

    def reconstruct(self, features: np.ndarray, levels: Optional[int] = None) -> np.ndarray:
        ids = self.tokenize(features)
        return decode(Tensor(self.embed(ids, levels)), self).data


def init_tokenizer(cfg: TokenizerConfig, num_joints: int, seed: int) -> TokenizerWeights:
    rng = substream(seed, 'tokenizer')
    feat = feature_width(num_joints)
    hid, dim = cfg.hidden, cfg.code_dim
    p: Dict[str, np.ndarray] = {}
    p['stats.mean'] = np.zeros(feat)
    p['stats.std'] = np.ones(feat)

    layers.init_linear(rng, p, 'enc.in', feat, hid)
    for k in range(2):
        layers.init_linear(rng, p, f'enc.down{k}', 2 * hid, hid)
        layers.init_residual_conv(rng, p, f'enc.res{k}', hid)
    layers.init_linear(rng, p, 'enc.out', hid, dim)

    layers.init_linear(rng, p, 'dec.in', dim, hid)
    for k in range(2):
        layers.init_residual_conv(rng, p, f'dec.res{k}', hid)
        layers.init_linear(rng, p, f'dec.up{k}', hid, 2 * hid)
    layers.init_linear(rng, p, 'dec.out', hid, feat)

    for v in range(cfg.levels):
        p[f'codebook.{v}'] = rng.normal(0.0, 1.0, size=(cfg.codebook_size, dim))
    return TokenizerWeights(p, cfg, num_joints)


def _batched(x) -> Tuple[Tensor, bool]:
    x = dc.as_tensor(x)
    if x.ndim == 2:
        return dc.reshape(x, (1,) + x.shape), True
    return x, False


def _view(w: TokenizerWeights, p: Optional[Dict[str, Tensor]]) -> Dict[str, Tensor]:
    return p if p is not None else layers.wrap(w.params)


# ====================
# ENCODER / DECODER
# ====================

def normalize(f: Tensor, p: Dict[str, Tensor]) -> Tensor:
    mean = dc.expand(p['stats.mean'], f.shape)
    inv = dc.expand(Tensor(1.0 / p['stats.std'].data), f.shape)
    return (f - mean) * inv


def encode_normalized(x: Tensor, p: Dict[str, Tensor]) -> Tensor:
    b, frames, _ = x.shape
    h = layers.linear(p, 'enc.in', x)
    for k in range(2):
        n, width = h.shape[1], h.shape[2]
        h = dc.reshape(h, (b, n // 2, 2 * width))
        h = dc.relu(layers.linear(p, f'enc.down{k}', h))
        h = layers.residual_conv(p, f'enc.res{k}', h)
    return layers.linear(p, 'enc.out', h)


def encode(f: Union[Tensor, np.ndarray], w: TokenizerWeights,
           p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Latent z (..., t, d) for features (..., T, F), t = T / 4

    Raises:
        ShapeError: T not divisible by 4 or wrong feature width
    """
    x, squeeze = _batched(f)
    if x.shape[-1] != w.feature_dim:
        raise ShapeError(f"encode: feature width {x.shape[-1]} vs expected {w.feature_dim}")
    if x.shape[1] % DOWNSAMPLE != 0 or x.shape[1] == 0:
        raise ShapeError(f"encode: frame count {x.shape[1]} is not divisible by {DOWNSAMPLE}")
    p = _view(w, p)
    z = encode_normalized(normalize(x, p), p)
    return dc.reshape(z, z.shape[1:]) if squeeze else z


def decode_normalized(e: Tensor, p: Dict[str, Tensor]) -> Tensor:
    b = e.shape[0]
    h = layers.linear(p, 'dec.in', e)
    for k in range(2):
        h = layers.residual_conv(p, f'dec.res{k}', h)
        h = dc.relu(layers.linear(p, f'dec.up{k}', h))
        n, width = h.shape[1], h.shape[2]
        h = dc.reshape(h, (b, 2 * n, width // 2))
    return layers.linear(p, 'dec.out', h)


def decode(e: Union[Tensor, np.ndarray], w: TokenizerWeights,
           p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """MotionFeatures (..., 4t, F) from embeddings (..., t, d); differentiable in e"""
    x, squeeze = _batched(e)
    if x.shape[-1] != w.config.code_dim:
        raise ShapeError(f"decode: embedding width {x.shape[-1]} vs code dim {w.config.code_dim}")
    p = _view(w, p)
    y = decode_normalized(x, p)
    std = dc.expand(p['stats.std'], y.shape)
    mean = dc.expand(p['stats.mean'], y.shape)
    y = y * std + mean
    return dc.reshape(y, y.shape[1:]) if squeeze else y


# ====================
# QUANTIZATION
# ====================

def quantize(z: np.ndarray, book: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest code per vector by squared Euclidean distance

    Args:
        z: (..., d) latents
        book: (K, d) code table

    Returns:
        ids (...,) with ties broken by lowest index, embeddings (..., d)
    """
    z = np.asarray(z, dtype=np.float64)
    book = np.asarray(book, dtype=np.float64)
    if book.ndim != 2 or book.shape[0] == 0:
        raise CodebookError("quantize: codebook is empty")
    if z.shape[-1] != book.shape[1]:
        raise ShapeError(f"quantize: shape mismatch {z.shape} vs {book.shape}")
    flat = z.reshape(-1, z.shape[-1])
    dist = ((flat[:, None, :] - book[None, :, :]) ** 2).sum(axis=-1)
    ids = np.argmin(dist, axis=1).reshape(z.shape[:-1])
    return ids, book[ids]


def residual_quantize(z: np.ndarray, books: List[np.ndarray]) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Token ids (..., V) and per-level embeddings; level v quantizes what the earlier levels left"""
    if not books:
        raise CodebookError("residual_quantize: at least one level is required")
    residual = np.asarray(z, dtype=np.float64)
    ids, embeddings = [], []
    for book in books:
        level_ids, e = quantize(residual, book)
        ids.append(level_ids)
        embeddings.append(e)
        residual = residual - e
    return np.stack(ids, axis=-1), embeddings


def vq_loss(z: Tensor, e: Tensor, beta: float) -> Tensor:
    """||sg(z) - e||^2 + beta ||z - sg(e)||^2, summed over d and averaged over vectors"""
    z, e = dc.as_tensor(z), dc.as_tensor(e)
    codebook_term = dc.sum_(dc.square(dc.stop_gradient(z) - e), axis=-1)
    commit_term = dc.sum_(dc.square(z - dc.stop_gradient(e)), axis=-1)
    return dc.mean(codebook_term + commit_term * beta)


# ====================
# TRAINING
# ====================

def _init_codebooks(w: TokenizerWeights, features: np.ndarray, rng: np.random.Generator):
    """Seed each level with latents (and later residuals) of the training set"""
    z = encode(features, w).data.reshape(-1, w.config.code_dim)
    residual = z
    k = w.config.codebook_size
    for v in range(w.levels):
        picks = rng.choice(residual.shape[0], size=k, replace=residual.shape[0] < k)
        book = residual[picks] + rng.normal(0.0, 1e-3, size=(k, residual.shape[1]))
        w.params[f'codebook.{v}'] = book
        _, e = quantize(residual, book)
        residual = residual - e


def tokenizer_step_loss(w: TokenizerWeights, p: Dict[str, Tensor], batch: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
    """Reconstruction MSE plus the per-level VQ loss; the decoder sees a straight-through latent"""
    x = normalize(Tensor(batch), p)
    z = encode_normalized(x, p)
    residual = z
    total = np.zeros(z.shape)
    vq = None
    for v in range(w.levels):
        ids, _ = quantize(residual.data, w.params[f'codebook.{v}'])
        e = dc.gather(p[f'codebook.{v}'], ids)
        level = vq_loss(residual, e, w.config.beta)
        vq = level if vq is None else vq + level
        total = total + e.data
        residual = residual - dc.stop_gradient(e)
    quantized = dc.straight_through(z, total)
    recon = dc.mean(dc.square(decode_normalized(quantized, p) - x))
    return recon + vq, recon, vq


def codebook_usage(w: TokenizerWeights, features: np.ndarray) -> List[float]:
    """Fraction of codes used per level on a feature set"""
    ids = w.tokenize(features)
    k = w.config.codebook_size
    return [len(np.unique(ids[..., v])) / k for v in range(w.levels)]


def train_tokenizer(features: np.ndarray, cfg: RunConfig, seed: Optional[int] = None) -> TokenizerWeights:
    """
    Train encoder, decoder and codebooks

    Args:
        features: (N, T, F) training features
        cfg: run configuration (tokenizer section)
        seed: master seed (defaults to cfg.seed)

    Returns:
        TokenizerWeights with the per-epoch loss history attached
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[0] == 0:
        raise ValueError("train_tokenizer needs a non-empty (N, T, F) feature array")
    seed = cfg.seed if seed is None else seed
    tcfg = cfg.tokenizer
    num_joints = (features.shape[-1] - 4) // 3 + 1
    w = init_tokenizer(tcfg, num_joints, seed)
    rng = substream(seed, 'tokenizer', 1)

    w.params['stats.mean'] = features.mean(axis=(0, 1))
    w.params['stats.std'] = np.maximum(features.std(axis=(0, 1)), STD_FLOOR)
    _init_codebooks(w, features[: min(len(features), 256)], rng)

    names = w.trainable_names()
    opt = AdamW(w.params, lr=tcfg.lr, warmup_steps=tcfg.warmup_steps, names=names)
    n = features.shape[0]
    last_finite = float('nan')
    logger.info(f"✓ Tokenizer initialized (K={tcfg.codebook_size}, d={tcfg.code_dim}, V={tcfg.levels})")

    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for step, start in enumerate(range(0, n, tcfg.batch_size)):
            batch = features[order[start:start + tcfg.batch_size]]
            p = layers.wrap(w.params, trainable=True, only=names)
            try:
                loss, recon, vq = tokenizer_step_loss(w, p, batch)
                dc.backward(loss)
                opt.step({k: p[k].grad for k in names})
            except NonFiniteError as e:
                logger.error(f"Tokenizer diverged at epoch {epoch} step {step} "
                             f"(last finite loss {last_finite:.6f})")
                raise NonFiniteError(f"tokenizer training diverged at epoch {epoch} step {step}: {e}") from e
            last_finite = float(loss.data)
            sums += [float(loss.data), float(recon.data), float(vq.data)]
            batches += 1
        row = {'epoch': epoch, 'loss': sums[0] / batches, 'recon': sums[1] / batches, 'vq': sums[2] / batches}
        w.history.append(row)
        logger.debug(f"Tokenizer epoch {epoch}: loss={row['loss']:.5f} recon={row['recon']:.5f} vq={row['vq']:.5f}")

    usage = codebook_usage(w, features)
    for v, frac in enumerate(usage):
        if frac < 0.5:
            logger.warning(f"Codebook level {v} uses only {frac:.0%} of its codes")
    final = w.history[-1]["loss"] if w.history else float("nan")
    logger.success(f"✅ Tokenizer trained: final loss {final:.5f}, "
                   f"usage {', '.join(f'{u:.0%}' for u in usage)}")
    return w


def loss_curve(w: TokenizerWeights) -> pd.DataFrame:
    return pd.DataFrame(w.history, columns=['epoch', 'loss', 'recon', 'vq'])
