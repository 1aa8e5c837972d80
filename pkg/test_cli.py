"""
Configuration, checkpoint and command-line tests
"""
import json
import os

import numpy as np
import pytest

from checkpoint import (MissingArtifactError, blob_hash, load_base, load_control, load_params, load_tokenizer,
                        paths_for, save_checkpoint)
import cli
from cli import EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, load_run_config, run
from config import ConfigError, RunConfig, apply_overrides, config_hash, substream, validate_config
from conftest import tiny_dict
from generation_config import available_profiles, edit_config_for, get_profile, total_logit_steps
from kinematics import SkeletonError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(tiny_dict(str(tmp_path))))
    return str(path)


class TestRunConfig:
    def test_json_round_trip(self, tiny_config):
        again = RunConfig.from_json(tiny_config.to_json())
        assert again == tiny_config
        assert config_hash(again) == config_hash(tiny_config)

    def test_partial_sections_keep_defaults(self):
        cfg = RunConfig.from_dict({'tokenizer': {'codebook_size': 16}})
        assert cfg.tokenizer.codebook_size == 16
        assert cfg.tokenizer.code_dim == 32

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({'bogus': 1})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({'tokenizer': {'bogus': 1}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({'tokenizer': 3})
        with pytest.raises(ConfigError):
            RunConfig.from_json('[1, 2]')

    def test_overrides(self, tiny_config):
        cfg = apply_overrides(tiny_config, {'generation.cfg_scale': 3.0, 'seed': None})
        assert cfg.generation.cfg_scale == 3.0
        assert cfg.seed == tiny_config.seed
        assert config_hash(cfg) != config_hash(tiny_config)
        with pytest.raises(ConfigError):
            apply_overrides(tiny_config, {'generation.bogus': 1})
        with pytest.raises(ConfigError):
            apply_overrides(tiny_config, {'seed.value': 1})

    def test_validation(self, tiny_config):
        assert validate_config(tiny_config)
        for overrides in ({'transformer.heads': 3}, {'frames': 10}, {'transformer.alpha': 1.5},
                          {'generation.iterations': 0}, {'generation.keyframe_threshold': 0.0},
                          {'joint_names': ['head', 'pelvis']}):
            with pytest.raises(ConfigError):
                validate_config(apply_overrides(tiny_config, overrides))

    def test_load_run_config(self, config_file):
        cfg = load_run_config(config_file, ['generation.cfg_scale=2.5', 'generation.profile="medium"'], seed=99)
        assert cfg.seed == 99
        assert cfg.generation.cfg_scale == 2.5
        assert cfg.generation.profile == 'medium'
        with pytest.raises(ConfigError):
            load_run_config(config_file, ['no_equals_sign'])

    def test_substreams(self):
        a = substream(5, 'dataset').uniform(size=4)
        b = substream(5, 'dataset').uniform(size=4)
        c = substream(5, 'heldout').uniform(size=4)
        d = substream(5, 'dataset', 1).uniform(size=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)


class TestProfiles:
    def test_fast(self):
        edit = edit_config_for('fast')
        assert edit.steps_logits == 0
        assert edit.steps_code == 100
        assert edit.lr_code == 0.06

    def test_accurate_budget(self):
        assert total_logit_steps('accurate', 10) == 600
        assert edit_config_for('accurate').steps_code == 600

    def test_unknown_profile(self):
        with pytest.raises(KeyError):
            get_profile('turbo')
        assert set(available_profiles()) == {'fast', 'medium', 'accurate'}

    def test_run_overrides(self):
        edit = edit_config_for('fast', overrides={'fast': {'steps_code': 3}})
        assert edit.steps_code == 3
        assert get_profile('fast')['steps_code'] == 100


class TestCheckpoints:
    def test_round_trip(self, trained, tiny_config, tmp_path):
        for weights, loader in ((trained.tokenizer, load_tokenizer), (trained.base, load_base),
                                (trained.control, load_control)):
            stem = str(tmp_path / type(weights).__name__)
            save_checkpoint(weights, stem, tiny_config)
            loaded = loader(stem, tiny_config.joint_names)
            assert list(loaded.params) == list(weights.params)
            for name, value in weights.params.items():
                assert np.array_equal(loaded.params[name], value)
            assert loaded.history == weights.history

    def test_manifest(self, trained, tiny_config, tmp_path):
        stem = str(tmp_path / 'tokenizer')
        manifest_path, blob_path = save_checkpoint(trained.tokenizer, stem, tiny_config)
        assert (manifest_path, blob_path) == paths_for(stem)
        manifest, _ = load_params(stem)
        assert manifest['kind'] == 'tokenizer'
        assert manifest['config_hash'] == config_hash(tiny_config)
        assert len(blob_hash(stem)) == 64

    def test_errors(self, trained, tiny_config, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_tokenizer(str(tmp_path / 'absent'))
        stem = str(tmp_path / 'tokenizer')
        save_checkpoint(trained.tokenizer, stem, tiny_config)
        with pytest.raises(MissingArtifactError):
            load_base(stem)
        with pytest.raises(SkeletonError):
            load_tokenizer(stem, ('pelvis', 'head'))
        blob = paths_for(stem)[1]
        with open(blob, 'r+b') as f:
            f.truncate(os.path.getsize(blob) // 2)
        with pytest.raises(MissingArtifactError):
            load_tokenizer(stem)


class TestCommandLine:
    def test_usage_errors(self, config_file):
        assert run(['--config', config_file, 'eval', 'bogus']) == EXIT_USAGE
        assert run(['--config', config_file]) == EXIT_USAGE
        assert run(['--config', config_file, '--set', 'tokenizer.bogus=1', 'make-data']) == EXIT_USAGE

    def test_missing_checkpoints(self, config_file):
        assert run(['--config', config_file, 'train', 'base']) == EXIT_MISSING
        assert run(['--config', config_file, 'generate', '--label', '0']) == EXIT_MISSING
        assert run(['--config', config_file, 'eval', 'density']) == EXIT_MISSING

    def test_make_data(self, config_file, tmp_path, capsys):
        out = str(tmp_path / 'motions.jsonl')
        assert run(['--config', config_file, 'make-data', '--size', '8', '--out', out]) == EXIT_OK
        with open(out) as f:
            assert len(f.readlines()) == 8
        assert 'walk_straight' in capsys.readouterr().out.replace(' ', '_')

    @pytest.mark.slow
    def test_end_to_end(self, config_file, tmp_path):
        base = ['--config', config_file, '--set', 'profiles={"fast": {"steps_code": 3}}']
        for stage in ('tokenizer', 'base', 'control'):
            assert run(base + ['train', stage]) == EXIT_OK
            assert os.path.exists(tmp_path / 'checkpoints' / f'{stage}.json')
            assert os.path.exists(tmp_path / 'checkpoints' / f'{stage}_loss.csv')

        control = tmp_path / 'control.json'
        control.write_text(json.dumps({'entries': [{'joint': 'pelvis', 'frame': 15, 'target': [0.0, 0.95, 0.8]}]}))
        out = tmp_path / 'generated'
        assert run(base + ['generate', '--label', '1', '--control', str(control), '--trace',
                           '--out', str(out)]) == EXIT_OK
        metrics = json.loads((out / 'metrics.json').read_text())
        assert 'avg_err' in metrics['metrics']
        assert (out / 'confidence_before.csv').exists()
        assert (out / 'edit_codebook.csv').exists()

        reports = tmp_path / 'reports'
        assert run(base + ['eval', 'upperbody', '--samples', '2', '--out', str(reports)]) == EXIT_OK
        assert (reports / 'upperbody.json').exists()
        assert run(base + ['generate', '--label', '99']) == EXIT_USAGE

    def test_rerun_from_cache_is_bit_identical(self, config_file, tmp_path):
        stem = str(tmp_path / 'checkpoints' / 'tokenizer')
        assert run(['--config', config_file, 'train', 'tokenizer']) == EXIT_OK
        fresh = blob_hash(stem)
        assert any(name.startswith('dataset_') for name in os.listdir(tmp_path / 'data'))
        assert run(['--config', config_file, 'train', 'tokenizer']) == EXIT_OK
        assert blob_hash(stem) == fresh

    def test_generate_seed_option(self, config_file, monkeypatch):
        seeds = []
        monkeypatch.setitem(cli.COMMANDS, 'generate', lambda args, cfg: seeds.append(cfg.seed) or EXIT_OK)
        assert run(['--config', config_file, '--seed', '3', 'generate', '--label', '0', '--seed', '11']) == EXIT_OK
        assert run(['--config', config_file, '--seed', '3', 'generate', '--label', '0']) == EXIT_OK
        assert seeds == [11, 3]

    def test_modified_base_weights_exit_code(self, trained, config_file, tmp_path, monkeypatch):
        cfg = load_run_config(config_file, [])
        save_checkpoint(trained.tokenizer, str(tmp_path / 'checkpoints' / 'tokenizer'), cfg)
        save_checkpoint(trained.base, str(tmp_path / 'checkpoints' / 'base'), cfg)

        def drifting_control(features, motions, labels, base, tokenizer, cfg):
            name = next(iter(base.params))
            base.params[name] = base.params[name] + 1.0
            return trained.control

        monkeypatch.setattr(cli, 'train_control', drifting_control)
        assert run(['--config', config_file, 'train', 'control']) == EXIT_NUMERIC
