"""
Network building blocks on top of diffcore
Parameters live in ordered dicts of float64 arrays; forward functions read
them through Tensor views so the same code serves training and inference.
"""
from typing import Dict, Iterable, Optional

import numpy as np

import diffcore as dc
from diffcore import Tensor

Params = Dict[str, np.ndarray]
TensorParams = Dict[str, Tensor]


def wrap(params: Params, trainable: bool = False, only: Optional[Iterable[str]] = None) -> TensorParams:
    """
    View a parameter dict as Tensors

    Args:
        params: name -> array
        trainable: mark every tensor as a gradient leaf
        only: if given, only these names become gradient leaves
    """
    names = set(only) if only is not None else None
    out = {}
    for name, value in params.items():
        grad = trainable and (names is None or name in names)
        out[name] = Tensor(value, requires_grad=grad)
    return out


# ====================
# INITIALIZATION
# ====================

def init_linear(rng: np.random.Generator, params: Params, name: str, fan_in: int, fan_out: int,
                zero: bool = False):
    if zero:
        params[f'{name}.w'] = np.zeros((fan_in, fan_out))
    else:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f'{name}.w'] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params[f'{name}.b'] = np.zeros(fan_out)


def init_norm(params: Params, name: str, width: int):
    params[f'{name}.g'] = np.ones(width)
    params[f'{name}.b'] = np.zeros(width)


def init_embedding(rng: np.random.Generator, params: Params, name: str, rows: int, width: int,
                   scale: float = 0.02):
    params[name] = rng.normal(0.0, scale, size=(rows, width))


def init_conv3(rng: np.random.Generator, params: Params, name: str, channels_in: int, channels_out: int):
    init_linear(rng, params, name, 3 * channels_in, channels_out)


def init_residual_conv(rng: np.random.Generator, params: Params, name: str, width: int):
    init_conv3(rng, params, f'{name}.c1', width, width)
    init_linear(rng, params, f'{name}.c2', width, width)


def init_transformer_layer(rng: np.random.Generator, params: Params, prefix: str, width: int,
                           ff_mult: int):
    init_norm(params, f'{prefix}.ln1', width)
    for proj in ('q', 'k', 'v', 'o'):
        init_linear(rng, params, f'{prefix}.attn.{proj}', width, width)
    init_norm(params, f'{prefix}.ln2', width)
    init_linear(rng, params, f'{prefix}.ff1', width, ff_mult * width)
    init_linear(rng, params, f'{prefix}.ff2', ff_mult * width, width)


# ====================
# FORWARD BLOCKS
# ====================

def _bias(p: TensorParams, name: str, like: Tensor) -> Tensor:
    return dc.expand(p[name], like.shape)


def linear(p: TensorParams, name: str, x: Tensor) -> Tensor:
    y = dc.matmul(x, p[f'{name}.w'])
    return y + _bias(p, f'{name}.b', y)


def norm_affine(p: TensorParams, name: str, x: Tensor) -> Tensor:
    xhat = dc.layer_norm(x)
    return xhat * _bias(p, f'{name}.g', xhat) + _bias(p, f'{name}.b', xhat)


def shift_time(x: Tensor, offset: int) -> Tensor:
    """Shift along the time axis (-2) with zero fill; offset=+1 looks one step back"""
    n = x.shape[-2]
    pad_shape = x.shape[:-2] + (1,) + x.shape[-1:]
    pad = Tensor(np.zeros(pad_shape))
    lead = (slice(None),) * (x.ndim - 2)
    if offset > 0:
        return dc.concat([pad, x[lead + (slice(0, n - 1), slice(None))]], axis=-2)
    return dc.concat([x[lead + (slice(1, n), slice(None))], pad], axis=-2)


def conv3(p: TensorParams, name: str, x: Tensor) -> Tensor:
    """Kernel-3 temporal convolution with zero padding"""
    if x.shape[-2] == 1:
        stacked = dc.concat([x * 0.0, x, x * 0.0], axis=-1)
    else:
        stacked = dc.concat([shift_time(x, 1), x, shift_time(x, -1)], axis=-1)
    return linear(p, name, stacked)


def residual_conv(p: TensorParams, name: str, x: Tensor) -> Tensor:
    h = dc.relu(conv3(p, f'{name}.c1', x))
    return x + linear(p, f'{name}.c2', h)


def attention(p: TensorParams, name: str, x: Tensor, heads: int) -> Tensor:
    """Bidirectional multi-head self-attention over axis -2 of (B, n, E)"""
    b, n, width = x.shape
    dh = width // heads

    def split(t: Tensor) -> Tensor:
        return dc.transpose(dc.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(p, f'{name}.q', x))
    k = split(linear(p, f'{name}.k', x))
    v = split(linear(p, f'{name}.v', x))
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = dc.softmax(scores)
    mixed = dc.matmul(weights, v)
    merged = dc.reshape(dc.transpose(mixed, (0, 2, 1, 3)), (b, n, width))
    return linear(p, f'{name}.o', merged)


def transformer_layer(p: TensorParams, prefix: str, x: Tensor, heads: int) -> Tensor:
    x = x + attention(p, f'{prefix}.attn', norm_affine(p, f'{prefix}.ln1', x), heads)
    h = dc.relu(linear(p, f'{prefix}.ff1', norm_affine(p, f'{prefix}.ln2', x)))
    return x + linear(p, f'{prefix}.ff2', h)

