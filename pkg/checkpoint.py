"""
Checkpoints - JSON manifest plus a raw little-endian float64 blob
"""
import hashlib
import json
import os
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from config import CONFIG_VERSION, RunConfig, TokenizerConfig, TransformerConfig, config_hash
from kinematics import SkeletonError
from maskmodel import BaseWeights, ControlWeights
from tokenizer import TokenizerWeights

Weights = Union[TokenizerWeights, BaseWeights, ControlWeights]
BLOB_DTYPE = '<f8'


class MissingArtifactError(FileNotFoundError):
    """Raised when a checkpoint or prerequisite artifact is absent"""


def paths_for(stem: str) -> Tuple[str, str]:
    return f'{stem}.json', f'{stem}.bin'


def _kind_of(weights: Weights) -> str:
    if isinstance(weights, TokenizerWeights):
        return 'tokenizer'
    if isinstance(weights, BaseWeights):
        return 'base'
    if isinstance(weights, ControlWeights):
        return 'control'
    raise TypeError(f"cannot checkpoint {type(weights).__name__}")


def _meta(weights: Weights) -> Dict[str, Any]:
    if isinstance(weights, TokenizerWeights):
        return {'num_joints': weights.num_joints}
    if isinstance(weights, BaseWeights):
        return {'codebook_size': weights.codebook_size, 'tokens': weights.tokens,
                'num_classes': weights.num_classes, 'levels': weights.levels, 'code_dim': weights.code_dim}
    return {'num_joints': weights.num_joints}


def save_checkpoint(weights: Weights, stem: str, cfg: RunConfig) -> Tuple[str, str]:
    """
    Write <stem>.json and <stem>.bin

    Returns:
        (manifest path, blob path)
    """
    manifest_path, blob_path = paths_for(stem)
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, value in weights.params.items():
        arr = np.ascontiguousarray(value, dtype=BLOB_DTYPE)
        entries.append({'name': name, 'shape': list(arr.shape), 'offset': offset, 'count': int(arr.size)})
        offset += int(arr.size)
        chunks.append(arr.tobytes())
    manifest = {
        'version': CONFIG_VERSION,
        'kind': _kind_of(weights),
        'seed': cfg.seed,
        'config': cfg.to_dict(),
        'config_hash': config_hash(cfg),
        'skeleton': list(cfg.joint_names),
        'meta': _meta(weights),
        'history': weights.history,
        'params': entries,
    }
    with open(blob_path, 'wb') as f:
        f.write(b''.join(chunks))
    with open(manifest_path, 'w') as f:
        json.dump(manifest, f, indent=2)
    logger.success(f"✅ Saved {manifest['kind']} checkpoint: {manifest_path}")
    return manifest_path, blob_path


def load_params(stem: str, kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Manifest and parameter dict in manifest order"""
    manifest_path, blob_path = paths_for(stem)
    for path in (manifest_path, blob_path):
        if not os.path.exists(path):
            logger.error(f"Missing checkpoint file: {path}")
            raise MissingArtifactError(f"missing checkpoint file: {path}")
    with open(manifest_path, 'r') as f:
        manifest = json.load(f)
    if kind is not None and manifest.get('kind') != kind:
        raise MissingArtifactError(f"{manifest_path} holds a '{manifest.get('kind')}' checkpoint, expected '{kind}'")
    flat = np.fromfile(blob_path, dtype=BLOB_DTYPE)
    params: Dict[str, np.ndarray] = {}
    for entry in manifest['params']:
        start, count = entry['offset'], entry['count']
        if start + count > flat.size:
            raise MissingArtifactError(f"{blob_path} is truncated at parameter '{entry['name']}'")
        params[entry['name']] = flat[start:start + count].astype(np.float64).reshape(entry['shape'])
    return manifest, params


def _check_skeleton(manifest: Dict[str, Any], joint_names: Optional[Sequence[str]], stem: str):
    if joint_names is not None and list(manifest['skeleton']) != list(joint_names):
        raise SkeletonError(f"{stem}: checkpoint skeleton {manifest['skeleton']} does not match {list(joint_names)}")


def load_tokenizer(stem: str, joint_names: Optional[Sequence[str]] = None) -> TokenizerWeights:
    manifest, params = load_params(stem, 'tokenizer')
    _check_skeleton(manifest, joint_names, stem)
    cfg = TokenizerConfig(**manifest['config']['tokenizer'])
    weights = TokenizerWeights(params, cfg, manifest['meta']['num_joints'], manifest.get('history', []))
    logger.info(f"✓ Tokenizer loaded from {stem}")
    return weights


def load_base(stem: str, joint_names: Optional[Sequence[str]] = None) -> BaseWeights:
    manifest, params = load_params(stem, 'base')
    _check_skeleton(manifest, joint_names, stem)
    meta = manifest['meta']
    cfg = TransformerConfig(**manifest['config']['transformer'])
    weights = BaseWeights(params, cfg, meta['codebook_size'], meta['tokens'], meta['num_classes'],
                          meta['levels'], meta['code_dim'], manifest.get('history', []))
    logger.info(f"✓ Masked transformer loaded from {stem}")
    return weights


def load_control(stem: str, joint_names: Optional[Sequence[str]] = None) -> ControlWeights:
    manifest, params = load_params(stem, 'control')
    _check_skeleton(manifest, joint_names, stem)
    cfg = TransformerConfig(**manifest['config']['transformer'])
    weights = ControlWeights(params, cfg, manifest['meta']['num_joints'], manifest.get('history', []))
    logger.info(f"✓ Control branch loaded from {stem}")
    return weights


def blob_hash(stem: str) -> str:
    _, blob_path = paths_for(stem)
    if not os.path.exists(blob_path):
        raise MissingArtifactError(f"missing checkpoint file: {blob_path}")
    with open(blob_path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()
