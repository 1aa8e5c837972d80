"""
Shared fixtures: a tiny run configuration and models trained on it once per session
"""
import copy
import os
from types import SimpleNamespace

import numpy as np
import pytest

os.environ['ENVIRONMENT'] = 'testing'

from config import RunConfig
from editctl import EditConfig
from maskmodel import train_base, train_control
from motiondata.data_manager import stack_features, stack_labels, stack_motions
from motiondata.synthetic import make_dataset
from pipeline import GenerationRequest, Models
from tokenizer import train_tokenizer

TINY = {
    'seed': 7,
    'frames': 16,
    'dataset_size': 32,
    'heldout_size': 8,
    'tokenizer': {'codebook_size': 16, 'code_dim': 8, 'levels': 2, 'hidden': 16,
                  'epochs': 3, 'batch_size': 16, 'warmup_steps': 5},
    'transformer': {'layers': 1, 'embed': 16, 'heads': 2, 'residual_hidden': 16, 'epochs': 2,
                    'batch_size': 16, 'warmup_steps': 5, 'control_epochs': 1},
    'generation': {'iterations': 4},
}


# Sizes for the slow empirical checks
DESK = {
    'seed': 7,
    'frames': 32,
    'dataset_size': 128,
    'heldout_size': 32,
    'tokenizer': {'codebook_size': 32, 'code_dim': 16, 'levels': 2, 'hidden': 32,
                  'epochs': 40, 'batch_size': 32, 'warmup_steps': 20},
    'transformer': {'layers': 2, 'embed': 32, 'heads': 4, 'residual_hidden': 32, 'epochs': 40,
                    'batch_size': 32, 'warmup_steps': 20, 'control_epochs': 10},
    'generation': {'iterations': 8},
}


def _sized_dict(sizes: dict, root: str) -> dict:
    data = copy.deepcopy(sizes)
    data['paths'] = {
        'data_dir': os.path.join(root, 'data'),
        'checkpoint_dir': os.path.join(root, 'checkpoints'),
        'output_dir': os.path.join(root, 'outputs'),
    }
    return data


def tiny_dict(root: str) -> dict:
    return _sized_dict(TINY, root)


@pytest.fixture(scope='session')
def tiny_config(tmp_path_factory) -> RunConfig:
    return RunConfig.from_dict(tiny_dict(str(tmp_path_factory.mktemp('maskmotion'))))


@pytest.fixture(scope='session')
def tiny_data(tiny_config):
    samples = make_dataset(tiny_config.dataset_size, tiny_config.frames, tiny_config.num_joints, tiny_config.seed)
    heldout = make_dataset(tiny_config.heldout_size, tiny_config.frames, tiny_config.num_joints,
                           tiny_config.seed, stream='heldout')
    return SimpleNamespace(
        features=stack_features(samples), motions=stack_motions(samples), labels=stack_labels(samples),
        heldout_features=stack_features(heldout), heldout_motions=stack_motions(heldout),
        heldout_labels=stack_labels(heldout),
    )


@pytest.fixture(scope='session')
def trained(tiny_config, tiny_data):
    tokenizer = train_tokenizer(tiny_data.features, tiny_config)
    base = train_base(tiny_data.features, tiny_data.labels, tokenizer, tiny_config)
    snapshot = {k: v.copy() for k, v in base.params.items()}
    control = train_control(tiny_data.features, tiny_data.motions, tiny_data.labels, base, tokenizer, tiny_config)
    return SimpleNamespace(tokenizer=tokenizer, base=base, control=control, base_snapshot=snapshot,
                           models=Models(tokenizer, base, control))


@pytest.fixture(scope='session')
def desk(tmp_path_factory):
    """Desk-scale config, data and models for the slow empirical checks"""
    cfg = RunConfig.from_dict(_sized_dict(DESK, str(tmp_path_factory.mktemp('desk'))))
    samples = make_dataset(cfg.dataset_size, cfg.frames, cfg.num_joints, cfg.seed)
    heldout = make_dataset(cfg.heldout_size, cfg.frames, cfg.num_joints, cfg.seed, stream='heldout')
    features, motions, labels = stack_features(samples), stack_motions(samples), stack_labels(samples)
    tokenizer = train_tokenizer(features, cfg)
    base = train_base(features, labels, tokenizer, cfg)
    control = train_control(features, motions, labels, base, tokenizer, cfg)
    return SimpleNamespace(
        config=cfg, features=features, motions=motions, labels=labels,
        heldout_features=stack_features(heldout), heldout_motions=stack_motions(heldout),
        heldout_labels=stack_labels(heldout),
        tokenizer=tokenizer, base=base, control=control, models=Models(tokenizer, base, control),
    )


@pytest.fixture
def make_request(tiny_config):
    """Request factory sized for the tiny models, with short edit loops"""
    def factory(**kwargs):
        defaults = dict(label=0, frames=tiny_config.frames, iterations=tiny_config.generation.iterations,
                        edit=EditConfig(steps_logits=0, steps_code=5), seed=3)
        defaults.update(kwargs)
        return GenerationRequest(**defaults)
    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
