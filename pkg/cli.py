"""
MaskMotion Desk - Command line
Subcommands: make-data, train, generate, eval
"""
import argparse
import json
import os
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

import evalharness
from analytics.report_tracker import ReportTracker
from checkpoint import (MissingArtifactError, blob_hash, load_base, load_control, load_tokenizer, paths_for,
                        save_checkpoint)
from config import DEFAULT_SEED, ConfigError, RunConfig, apply_overrides, config_hash, validate_config
from diffcore import NonFiniteError
from editctl import ControlSpecError
from generation_config import available_profiles, edit_config_for, total_logit_steps
from kinematics import SkeletonError
from maskmodel import train_base, train_control
from motiondata.data_manager import (MotionDataManager, MotionFormatError, stack_features, stack_labels,
                                     stack_motions)
from pipeline import (GenerationRequest, GenerationResult, Models, avoid, confidence_trace, generate,
                      load_control_file, load_obstacle_file, load_timeline_file, save_edit_traces, timeline)
from tokenizer import codebook_usage, loss_curve, train_tokenizer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_MISSING = 3

STAGES = ('tokenizer', 'base', 'control')
SUITES = ('density', 'cross', 'upperbody', 'components', 'quality')


class UsageError(Exception):
    """Bad command-line usage"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ====================
# CONFIG
# ====================

def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: Optional[str], overrides: Sequence[str] = (), seed: Optional[int] = None) -> RunConfig:
    """Run config from a JSON file (or defaults), then --set key=value overrides, then --seed"""
    cfg = RunConfig.load(path) if path else RunConfig(seed=DEFAULT_SEED)
    parsed: Dict[str, Any] = {}
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split('=', 1)
        parsed[key.strip()] = _parse_value(value)
    parsed['seed'] = seed
    cfg = apply_overrides(cfg, parsed)
    validate_config(cfg)
    return cfg


def _stem(cfg: RunConfig, stage: str) -> str:
    return os.path.join(cfg.paths.checkpoint_dir, stage)


def _data(cfg: RunConfig, path: Optional[str], stream: str = 'dataset', size: Optional[int] = None):
    manager = MotionDataManager(cfg.paths.data_dir, cfg.joint_names)
    if path:
        if not os.path.exists(path):
            raise MissingArtifactError(f"motion file not found: {path}")
        return manager.load_motions(path)
    n = size if size is not None else (cfg.dataset_size if stream == 'dataset' else cfg.heldout_size)
    return manager.get_dataset(n, cfg.frames, cfg.seed, stream)


def load_models(cfg: RunConfig, need_control: bool = False) -> Models:
    tokenizer = load_tokenizer(_stem(cfg, 'tokenizer'), cfg.joint_names)
    base = load_base(_stem(cfg, 'base'), cfg.joint_names)
    control = None
    if need_control or os.path.exists(paths_for(_stem(cfg, 'control'))[0]):
        control = load_control(_stem(cfg, 'control'), cfg.joint_names)
    return Models(tokenizer, base, control)


# ====================
# COMMANDS
# ====================

def cmd_make_data(args, cfg: RunConfig) -> int:
    manager = MotionDataManager(cfg.paths.data_dir, cfg.joint_names)
    size = args.size if args.size is not None else (cfg.dataset_size if args.stream == 'dataset' else cfg.heldout_size)
    samples = manager.get_dataset(size, cfg.frames, cfg.seed, args.stream, use_cache=False)
    if args.out:
        manager.save_motions(samples, args.out)
    print(manager.summary(samples).to_string(index=False))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    samples = _data(cfg, args.data)
    features = stack_features(samples)
    labels = stack_labels(samples)
    stem = _stem(cfg, args.stage)

    if args.stage == 'tokenizer':
        weights = train_tokenizer(features, cfg)
        curve = loss_curve(weights)
        usage = codebook_usage(weights, features)
        logger.info(f"Codebook usage per level: {', '.join(f'{u:.0%}' for u in usage)}")
    elif args.stage == 'base':
        tokenizer = load_tokenizer(_stem(cfg, 'tokenizer'), cfg.joint_names)
        weights = train_base(features, labels, tokenizer, cfg)
        curve = pd.DataFrame(weights.history)
    else:
        tokenizer = load_tokenizer(_stem(cfg, 'tokenizer'), cfg.joint_names)
        base_stem = _stem(cfg, 'base')
        base = load_base(base_stem, cfg.joint_names)
        frozen = {k: v.copy() for k, v in base.params.items()}
        weights = train_control(features, stack_motions(samples), labels, base, tokenizer, cfg)
        if any(not np.array_equal(frozen[k], v) for k, v in base.params.items()):
            raise RuntimeError("base weights changed during control training")
        logger.info(f"Base weights unchanged (blob {blob_hash(base_stem)[:12]})")
        curve = pd.DataFrame(weights.history)

    manifest_path, _ = save_checkpoint(weights, stem, cfg)
    curve_path = f'{stem}_loss.csv'
    curve.to_csv(curve_path, index=False)
    print(f"checkpoint: {manifest_path}")
    print(f"loss curve: {curve_path}")
    return EXIT_OK


def _request(args, cfg: RunConfig) -> GenerationRequest:
    gen = cfg.generation
    profile = args.profile or gen.profile
    edit = edit_config_for(profile, gen.temperature, gen.obstacle_weight, cfg.profiles)
    logger.info(f"Profile '{profile}': {total_logit_steps(profile, gen.iterations, cfg.profiles)} logit steps, "
                f"{edit.steps_code} codebook steps")
    return GenerationRequest(
        label=args.label if args.label is not None else 0,
        frames=args.length or cfg.frames,
        iterations=gen.iterations,
        cfg_scale=gen.cfg_scale,
        cfg_scale_residual=gen.cfg_scale_residual,
        temperature=gen.temperature,
        residual_temperature=gen.residual_temperature,
        edit=edit,
        seed=cfg.seed,
        trace=args.trace,
    )


def cmd_generate(args, cfg: RunConfig) -> int:
    if args.label is None and not args.timeline:
        raise UsageError("generate needs --label (or --timeline)")
    req = _request(args, cfg)
    if args.control:
        req.spatial = load_control_file(args.control, req.frames, cfg.joint_names)
    if args.obstacles:
        req.obstacles, req.obstacle_joints = load_obstacle_file(args.obstacles, req.frames, cfg.joint_names)
    models = load_models(cfg, need_control=bool(args.control or args.timeline))

    if args.timeline:
        base_label, prompts = load_timeline_file(args.timeline)
        result = timeline(prompts, base_label, req, models)
        label = prompts[-1].label if prompts else base_label
    elif req.obstacles:
        result = avoid(req, models)
        label = req.label
    else:
        result = generate(req, models)
        label = req.label

    out_dir = args.out or os.path.join(cfg.paths.output_dir, f'generate_l{label}_s{cfg.seed}')
    written = write_result(result, label, out_dir, cfg)
    for path in written:
        print(path)
    return EXIT_OK


def write_result(result: GenerationResult, label: int, out_dir: str, cfg: RunConfig) -> List[str]:
    """motion.jsonl, metrics.json and, when traced, confidence and edit traces"""
    os.makedirs(out_dir, exist_ok=True)
    manager = MotionDataManager(cfg.paths.data_dir, cfg.joint_names)
    motion_path = os.path.join(out_dir, 'motion.jsonl')
    manager.save_global([result.motion], [label], motion_path)
    metrics_path = os.path.join(out_dir, 'metrics.json')
    with open(metrics_path, 'w') as f:
        json.dump({'label': label, 'seed': cfg.seed, 'config_hash': config_hash(cfg),
                   'tokens': result.tokens.tolist(), 'metrics': result.metrics}, f, indent=2,
                  default=lambda v: v.item() if hasattr(v, 'item') else str(v))
    written = [motion_path, metrics_path]
    if result.confidence_before is not None:
        written.extend(confidence_trace(result, out_dir))
        written.extend(save_edit_traces(result, out_dir))
    return written


def _quality_report(models: Models, motions: np.ndarray, labels: np.ndarray, features: np.ndarray,
                    req: GenerationRequest, cfg: RunConfig, samples: int) -> evalharness.MetricReport:
    nll = evalharness.heldout_masked_nll(models.base, models.tokenizer, features, labels, cfg.seed)
    classifier = evalharness.MotionClassifier(cfg.joint_names, cfg.num_classes).fit(
        cfg.dataset_size, cfg.frames, cfg.seed)
    generated, gen_labels = [], []
    for k in range(samples):
        label = int(labels[k % len(labels)])
        generated.append(generate(replace(req, label=label, seed=req.seed + k), models).motion)
        gen_labels.append(label)
    skate = float(np.mean([evalharness.foot_skate(m, cfg.joint_names) for m in generated]))
    diversity = evalharness.diversity_proxy(generated, seed=cfg.seed) if len(generated) > 1 else float('nan')
    nan = float('nan')
    return evalharness.MetricReport(
        'quality', nan, nan, nan, skate, diversity, None, (), len(generated),
        extras={'Masked NLL': nll,
                'Classifier Acc. (real)': classifier.accuracy(motions, labels),
                'Classifier Acc. (generated)': classifier.accuracy(generated, gen_labels)})


def cmd_eval(args, cfg: RunConfig) -> int:
    profile = args.profile or ('accurate' if args.suite == 'components' else cfg.generation.profile)
    args.profile, args.label, args.length, args.trace = profile, 0, None, False
    req = _request(args, cfg)
    models = load_models(cfg, need_control=args.suite != 'quality')
    heldout = _data(cfg, args.data, stream='heldout')
    motions, labels = stack_motions(heldout), stack_labels(heldout)

    threshold = cfg.generation.keyframe_threshold
    if args.suite == 'density':
        reports = evalharness.density_sweep(models, motions, labels, req, joint=args.joint, samples=args.samples,
                                            threshold=threshold)
    elif args.suite == 'cross':
        reports = evalharness.cross_protocol(models, motions, labels, req, samples=max(1, args.samples // 5),
                                             threshold=threshold)
    elif args.suite == 'upperbody':
        reports = [evalharness.upper_body_protocol(models, motions, labels, req, samples=args.samples,
                                                   threshold=threshold)]
    elif args.suite == 'components':
        reports = evalharness.components_suite(models, motions, labels, req, samples=args.samples, joint=args.joint,
                                               threshold=threshold)
    else:
        reports = [_quality_report(models, motions, labels, stack_features(heldout), req, cfg, args.samples)]

    tracker = ReportTracker(cfg, args.out or os.path.join(cfg.paths.output_dir, 'reports'))
    tracker.add_reports(args.suite, reports, {'profile': profile})
    json_path, csv_path = tracker.save(args.suite)
    tracker.print_summary(args.suite)
    print(json_path)
    print(csv_path)
    return EXIT_OK


# ====================
# PARSER
# ====================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='maskmotion', description='Controllable masked motion generation at desk scale')
    parser.add_argument('--config', help='Run config JSON')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config key, e.g. generation.cfg_scale=3')
    parser.add_argument('--seed', type=int, default=None, help='Master seed (overrides the config)')
    sub = parser.add_subparsers(dest='command', required=True)

    data = sub.add_parser('make-data', help='Build and cache a synthetic dataset')
    data.add_argument('--stream', choices=['dataset', 'heldout'], default='dataset')
    data.add_argument('--size', type=int, default=None)
    data.add_argument('--out', help='Also write the motions to this JSONL file')

    train = sub.add_parser('train', help='Train one stage')
    train.add_argument('stage', choices=STAGES)
    train.add_argument('--data', help='Motion JSONL file (default: synthetic dataset)')

    gen = sub.add_parser('generate', help='Generate one motion')
    gen.add_argument('--label', type=int, default=None)
    gen.add_argument('--length', type=int, default=None, help='Frames (multiple of 4)')
    gen.add_argument('--profile', choices=available_profiles(), default=None)
    gen.add_argument('--control', help='Spatial control JSON')
    gen.add_argument('--obstacles', help='Obstacle JSON')
    gen.add_argument('--timeline', help='Timeline JSON')
    gen.add_argument('--trace', action='store_true', help='Write confidence and edit traces')
    gen.add_argument('--out', help='Output directory')
    gen.add_argument('--seed', dest='command_seed', type=int, default=None,
                     help='Master seed for this generation (overrides --seed and the config)')

    ev = sub.add_parser('eval', help='Run an evaluation suite')
    ev.add_argument('suite', choices=SUITES)
    ev.add_argument('--profile', choices=available_profiles(), default=None)
    ev.add_argument('--samples', type=int, default=20)
    ev.add_argument('--joint', default='pelvis')
    ev.add_argument('--data', help='Held-out motion JSONL file (default: synthetic held-out set)')
    ev.add_argument('--out', help='Report directory')
    return parser


COMMANDS = {
    'make-data': cmd_make_data,
    'train': cmd_train,
    'generate': cmd_generate,
    'eval': cmd_eval,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, dispatch and map failures to exit codes"""
    try:
        args = build_parser().parse_args(argv)
        seed = getattr(args, 'command_seed', None)
        cfg = load_run_config(args.config, args.set, seed if seed is not None else args.seed)
        return COMMANDS[args.command](args, cfg)
    except MissingArtifactError as e:
        logger.error(f"❌ Missing artifact: {e}")
        return EXIT_MISSING
    except NonFiniteError as e:
        logger.error(f"❌ Numeric failure: {e}")
        return EXIT_NUMERIC
    except RuntimeError as e:
        logger.error(f"❌ Training failure: {e}")
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ControlSpecError, SkeletonError, MotionFormatError, KeyError, ValueError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_USAGE
