"""
Generation Pipeline - iterative masked decoding with control and editing

Features:
- Any-joint, any-frame spatial control
- Obstacle avoidance with a violation report
- Body-part timeline control (sequential prompts)
- Confidence traces before and after logit editing
"""
import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy import special

from checkpoint import MissingArtifactError
from config import JOINT_NAMES, substream
from diffcore import Tensor
from editctl import (ControlSpecError, EditConfig, EditObjective, Obstacle, codebook_edit,
                     gumbel_noise, logit_edit, mask_embedding, obstacle_report, trace_frame)
from kinematics import SkeletonError, SpatialControl, joint_index, recover_global
from maskmodel import (BaseWeights, ControlWeights, cfg_logits, confidence_remask, control_window,
                       forward_base, forward_controlled, mask_schedule, predict_residual_levels)
from tokenizer import DOWNSAMPLE, TokenizerWeights, decode


class TraceDisabledError(RuntimeError):
    """Raised when confidence traces are requested from an untraced generation"""


@dataclass
class Models:
    tokenizer: TokenizerWeights
    base: BaseWeights
    control: Optional[ControlWeights] = None

    @property
    def num_joints(self) -> int:
        return self.tokenizer.num_joints


@dataclass
class GenerationRequest:
    label: int
    frames: int = 64
    spatial: Optional[SpatialControl] = None
    obstacles: List[Obstacle] = field(default_factory=list)
    obstacle_joints: Optional[np.ndarray] = None    # (T, J) selector
    iterations: int = 10
    cfg_scale: float = 4.0
    cfg_scale_residual: float = 5.0
    temperature: float = 1.0
    residual_temperature: float = 1e-8
    edit: EditConfig = field(default_factory=EditConfig)
    seed: int = 0
    trace: bool = False
    use_control_branch: bool = True
    use_logit_edit: bool = True
    use_codebook_edit: bool = True


@dataclass
class GenerationResult:
    motion: np.ndarray
    tokens: np.ndarray
    metrics: Dict[str, Any] = field(default_factory=dict)
    confidence_before: Optional[np.ndarray] = None
    confidence_after: Optional[np.ndarray] = None
    edit_traces: List[Tuple[str, List[float]]] = field(default_factory=list)
    codes: Optional[np.ndarray] = None     # (t, d) decoder input after editing


@dataclass
class TimelinePrompt:
    label: int
    joints: Tuple[str, ...]
    start: int
    end: int


def _softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    return special.softmax(logits / temperature, axis=-1)


def _check_request(req: GenerationRequest, models: Models) -> int:
    if req.frames % DOWNSAMPLE != 0 or req.frames < DOWNSAMPLE:
        raise ControlSpecError(f"length {req.frames} must be a positive multiple of {DOWNSAMPLE}")
    if req.iterations < 1:
        raise ControlSpecError("generation needs at least one iteration")
    t = req.frames // DOWNSAMPLE
    if t > models.base.tokens:
        raise ControlSpecError(f"length {req.frames} exceeds the trained maximum {models.base.tokens * DOWNSAMPLE}")
    if not 0 <= req.label < models.base.num_classes:
        raise ControlSpecError(f"label {req.label} outside [0, {models.base.num_classes})")
    if req.spatial is not None and req.spatial.mask.shape != (req.frames, models.num_joints):
        raise SkeletonError(f"control covers {req.spatial.mask.shape}, expected ({req.frames}, {models.num_joints})")
    if models.control is not None and models.control.num_joints != models.num_joints:
        raise SkeletonError("control branch and tokenizer disagree on the skeleton")
    return t


def _provisional_window(ids: np.ndarray, control: SpatialControl, models: Models,
                        stand_in: np.ndarray) -> np.ndarray:
    book = models.tokenizer.codebook(0)
    mask_id = models.base.mask_id
    codes = np.where((ids == mask_id)[:, None], stand_in[None, :], book[np.minimum(ids, mask_id - 1)])
    provisional = recover_global(decode(codes, models.tokenizer).data, models.num_joints)
    relative = control.mask[..., None] * (control.targets - provisional)
    return control_window(control.targets, control.mask, relative)


def _control_error(motion: np.ndarray, control: SpatialControl) -> float:
    dist = np.linalg.norm(motion - control.targets, axis=-1)
    return float((dist * control.mask).sum() / control.mask.sum())


def generate(req: GenerationRequest, models: Models) -> GenerationResult:
    """
    Iterative masked decoding

    Starts from an all-MASK sequence; each iteration predicts guided logits,
    optionally edits them toward the control objective, samples the masked
    positions and re-masks the least confident tokens. Residual levels are
    filled greedily, the summed codes are optionally edited once more and
    decoded to global joint positions.
    """
    t = _check_request(req, models)
    tokenizer, base = models.tokenizer, models.base
    control = req.spatial if req.spatial is not None and not req.spatial.is_empty() else None
    use_branch = req.use_control_branch and control is not None
    if use_branch and models.control is None:
        raise MissingArtifactError("spatial control requested but no control branch is loaded")

    objective = EditObjective(tokenizer, control, req.obstacles, req.obstacle_joints,
                              req.edit.consistency_weight, req.edit.obstacle_weight)
    editing = objective.active
    sample_rng = substream(req.seed, 'gumbel')
    book = tokenizer.codebook(0)
    stand_in = mask_embedding(book)
    mask_id = base.mask_id

    ids = np.full(t, mask_id, dtype=np.int64)
    before = np.zeros((req.iterations, t))
    after = np.zeros((req.iterations, t))
    traces: List[Tuple[str, List[float]]] = []

    for i in range(req.iterations):
        masked = ids == mask_id
        if use_branch:
            window = _provisional_window(ids, control, models, stand_in)
            cond = forward_controlled(ids, req.label, window, base, models.control).data
            uncond = forward_controlled(ids, base.null_label, window, base, models.control).data
        else:
            cond = forward_base(ids, req.label, base).data
            uncond = forward_base(ids, base.null_label, base).data
        logits = cfg_logits(cond, uncond, req.cfg_scale)
        before[i] = _softmax_rows(logits, req.temperature).max(axis=-1)
        # one draw per iteration: the edit relaxes the same sample that is drawn below
        g = gumbel_noise(logits.shape, sample_rng)

        if editing and req.use_logit_edit and req.edit.steps_logits > 0:
            fixed = book[np.minimum(ids, mask_id - 1)]
            loss_fn = objective.via_logits(g * req.temperature, req.temperature, book, fixed, masked)
            edited = logit_edit(logits, loss_fn, req.edit)
            logits = edited.value
            traces.append((f'logits_iter{i}', edited.trace))

        probs = _softmax_rows(logits, req.temperature)
        after[i] = probs.max(axis=-1)
        drawn = np.argmax(logits / req.temperature + g, axis=-1)
        sampled = np.where(masked, drawn, ids)

        if i + 1 < req.iterations:
            keep = max(1, int(round(mask_schedule(i + 1, req.iterations) * t)))
        else:
            keep = 0
        ids = confidence_remask(probs, sampled, min(keep, t), frozen=None, mask_id=mask_id)
        logger.debug(f"Iteration {i}: {int((ids == mask_id).sum())} tokens re-masked")

    tokens = predict_residual_levels(base, tokenizer, ids, req.label, req.cfg_scale_residual,
                                     req.residual_temperature)
    codes = tokenizer.embed(tokens)
    metrics: Dict[str, Any] = {}
    if editing and req.use_codebook_edit and req.edit.steps_code > 0:
        edited = codebook_edit(codes, objective, req.edit)
        codes = edited.value
        traces.append(('codebook', edited.trace))
        if edited.trace:
            metrics['edit_loss_initial'] = edited.trace[0]
            metrics['edit_loss_final'] = float(objective(Tensor(codes)).data)

    motion = recover_global(decode(codes, tokenizer).data, models.num_joints)
    if control is not None:
        metrics['avg_err'] = _control_error(motion, control)
    if req.obstacles:
        metrics.update(obstacle_report(motion, req.obstacles, req.obstacle_joints))
    logger.success(f"✅ Generated {req.frames} frames for label {req.label}"
                   + (f" (avg err {metrics['avg_err']:.4f})" if 'avg_err' in metrics else ''))
    return GenerationResult(motion, tokens, metrics,
                            before if req.trace else None, after if req.trace else None, traces, codes)


AVOID_LOGIT_STEPS = 10
AVOID_ROUNDS = 4
AVOID_REFINE_STEPS = 50


def avoid(req: GenerationRequest, models: Models) -> GenerationResult:
    """
    Generation with the obstacle term added to the edit objective

    Edits run with normalized steps and at least AVOID_LOGIT_STEPS logit
    steps per iteration. While selected joints still sit inside an obstacle,
    the decoded codes are refined again with a doubled step size, for at
    most AVOID_ROUNDS rounds. Remaining violations are reported.
    """
    if not req.obstacles:
        raise ControlSpecError("avoid needs at least one obstacle")
    if req.obstacle_joints is None or not np.any(req.obstacle_joints):
        raise ControlSpecError("avoid needs a non-empty joint selector")
    edit = replace(req.edit, normalize_steps=True,
                   steps_logits=max(req.edit.steps_logits, AVOID_LOGIT_STEPS))
    req = replace(req, edit=edit)
    result = generate(req, models)

    rounds = 0
    if req.use_codebook_edit and req.edit.obstacle_weight != 0:
        objective = EditObjective(models.tokenizer, req.spatial, req.obstacles, req.obstacle_joints,
                                  edit.consistency_weight, edit.obstacle_weight)
        refine = replace(edit, steps_code=max(edit.steps_code, AVOID_REFINE_STEPS))
        while result.metrics.get('violations', 0) > 0 and rounds < AVOID_ROUNDS:
            rounds += 1
            refine = replace(refine, lr_code=refine.lr_code * 2.0)
            edited = codebook_edit(result.codes, objective, refine)
            result.codes = edited.value
            result.edit_traces.append((f'avoid_round{rounds}', edited.trace))
            result.motion = recover_global(decode(result.codes, models.tokenizer).data, models.num_joints)
            result.metrics.update(obstacle_report(result.motion, req.obstacles, req.obstacle_joints))
            if objective.control is not None:
                result.metrics['avg_err'] = _control_error(result.motion, objective.control)
            logger.debug(f"Avoid round {rounds}: {result.metrics['violations']} violations")
    result.metrics['avoid_rounds'] = rounds
    if result.metrics.get('violations', 0) > 0:
        logger.warning(f"⚠️ Obstacle still penetrated at {result.metrics['violations']} entries "
                       f"(min SDF {result.metrics['min_sdf']:.4f})")
    return result


def joint_selector(joints: Sequence[str], frames: int, joint_names: Sequence[str] = JOINT_NAMES) -> np.ndarray:
    selector = np.zeros((frames, len(joint_names)))
    for name in joints:
        selector[:, joint_index(name, joint_names)] = 1.0
    return selector


# ====================
# CONTROL BUILDERS
# ====================

def control_any(joints: Sequence[str], frames: Sequence[int], targets, total_frames: int,
                joint_names: Sequence[str] = JOINT_NAMES) -> SpatialControl:
    """
    Spatial control from parallel lists of joint names, frame indices and xyz targets

    Raises:
        ControlSpecError: empty request, frame out of range or conflicting duplicates
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3) if len(joints) else np.zeros((0, 3))
    if len(joints) == 0:
        raise ControlSpecError("control_any: at least one (joint, frame) entry is required")
    if not len(joints) == len(frames) == len(targets):
        raise ControlSpecError("control_any: joints, frames and targets must have equal lengths")
    S = np.zeros((total_frames, len(joint_names), 3))
    sigma = np.zeros((total_frames, len(joint_names)))
    for k, (name, frame, target) in enumerate(zip(joints, frames, targets)):
        j = joint_index(name, joint_names)
        frame = int(frame)
        if not 0 <= frame < total_frames:
            raise ControlSpecError(f"control entry {k}: frame {frame} outside [0, {total_frames})")
        if sigma[frame, j] and not np.array_equal(S[frame, j], target):
            raise ControlSpecError(f"control entry {k}: conflicting targets for {name} at frame {frame}")
        S[frame, j] = target
        sigma[frame, j] = 1.0
    return SpatialControl(S, sigma)


def zigzag_targets(frames: int, origin, amplitude: float = 0.5, forward_speed: float = 0.05,
                   segment: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Keyframes every `segment` frames alternating between -amplitude and +amplitude in x"""
    origin = np.asarray(origin, dtype=np.float64)
    keyframes = np.arange(0, frames, segment)
    side = np.where((keyframes // segment) % 2 == 0, -1.0, 1.0)
    targets = np.stack([origin[0] + side * amplitude,
                        np.full(keyframes.shape, origin[1]),
                        origin[2] + forward_speed * keyframes], axis=1)
    return keyframes, targets


def zigzag_control(joint: str, frames: int, origin, amplitude: float = 0.5, forward_speed: float = 0.05,
                   segment: int = 8, joint_names: Sequence[str] = JOINT_NAMES) -> SpatialControl:
    keyframes, targets = zigzag_targets(frames, origin, amplitude, forward_speed, segment)
    return control_any([joint] * len(keyframes), keyframes, targets, frames, joint_names)


# ====================
# TIMELINE
# ====================

def timeline_control(current: np.ndarray, prompt: TimelinePrompt,
                     joint_names: Sequence[str] = JOINT_NAMES) -> Optional[SpatialControl]:
    """Anchor every joint outside the prompt on all frames, and the prompt's joints outside its window"""
    frames = current.shape[0]
    if not prompt.joints:
        raise ControlSpecError("timeline prompt needs at least one body part")
    if not 0 <= prompt.start < prompt.end <= frames:
        raise ControlSpecError(f"timeline window [{prompt.start}, {prompt.end}) outside [0, {frames})")
    mask = np.ones((frames, len(joint_names)))
    for name in prompt.joints:
        mask[prompt.start:prompt.end, joint_index(name, joint_names)] = 0.0
    if not mask.any():
        return None
    return SpatialControl.from_motion(current, mask)


def timeline(prompts: Sequence[TimelinePrompt], base_label: int, req: GenerationRequest,
             models: Models) -> GenerationResult:
    """
    Body-part timeline control

    Pass 0 generates the whole body from base_label. Each prompt then
    regenerates with its own label while the current result anchors the
    joints and frames it does not own. Later prompts win where prompts overlap.
    A spatial control on the request holds on every pass and wins over the
    anchor where both set an entry.
    """
    joint_names = JOINT_NAMES[:models.num_joints]
    user = req.spatial if req.spatial is not None and not req.spatial.is_empty() else None
    result = generate(replace(req, label=base_label), models)
    for k, prompt in enumerate(prompts):
        anchor = timeline_control(result.motion, prompt, joint_names)
        if user is None or anchor is None:
            control = anchor if user is None else user
        else:
            control = anchor.merge(user)
        logger.info(f"Timeline pass {k + 1}: label {prompt.label} on {', '.join(prompt.joints)} "
                    f"frames [{prompt.start}, {prompt.end})")
        result = generate(replace(req, label=prompt.label, spatial=control), models)
        if anchor is not None:
            result.metrics['anchor_err'] = _control_error(result.motion, anchor)
        result.metrics['controlled_entries'] = control.active if control is not None else 0
    result.metrics['timeline_passes'] = len(prompts) + 1
    return result


# ====================
# FILES
# ====================

def confidence_trace(result: GenerationResult, out_dir: str, stem: str = 'confidence') -> Tuple[str, str]:
    """Write iteration x token max-probability tables before and after logit editing"""
    if result.confidence_before is None or result.confidence_after is None:
        raise TraceDisabledError("confidence traces were not recorded (generate with trace=True)")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for suffix, table in (('before', result.confidence_before), ('after', result.confidence_after)):
        df = pd.DataFrame(table, columns=[f'token_{j}' for j in range(table.shape[1])])
        df.index.name = 'iteration'
        path = os.path.join(out_dir, f'{stem}_{suffix}.csv')
        df.to_csv(path)
        paths.append(path)
    logger.debug(f"💾 Confidence traces written to {out_dir}")
    return paths[0], paths[1]


def save_edit_traces(result: GenerationResult, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, trace in result.edit_traces:
        path = os.path.join(out_dir, f'edit_{name}.csv')
        trace_frame(trace).to_csv(path, index=False)
        paths.append(path)
    return paths


def _read_json(path: str) -> Any:
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ControlSpecError(f"{path}: not valid JSON ({e})") from e


def load_control_file(path: str, frames: int, joint_names: Sequence[str] = JOINT_NAMES) -> SpatialControl:
    """{"entries": [{"joint": name, "frame": n, "target": [x, y, z]}, ...]}"""
    data = _read_json(path)
    entries = data.get('entries') if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise ControlSpecError(f"{path}: expected an object with an 'entries' list")
    joints, idx, targets = [], [], []
    for k, entry in enumerate(entries):
        try:
            target = [float(v) for v in entry['target']]
            if len(target) != 3:
                raise ValueError("target needs 3 coordinates")
            joints.append(str(entry['joint']))
            idx.append(int(entry['frame']))
            targets.append(target)
        except (KeyError, TypeError, ValueError) as e:
            raise ControlSpecError(f"{path}: entry {k} is malformed ({e})") from e
    try:
        return control_any(joints, idx, targets, frames, joint_names)
    except SkeletonError as e:
        raise ControlSpecError(f"{path}: {e}") from e


def load_obstacle_file(path: str, frames: int,
                       joint_names: Sequence[str] = JOINT_NAMES) -> Tuple[List[Obstacle], np.ndarray]:
    """{"joints": [names], "obstacles": [{"center": [..] or [[..], ...], "radius": r, "safe_distance": d}]}"""
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get('obstacles'), list):
        raise ControlSpecError(f"{path}: expected an object with an 'obstacles' list")
    obstacles = []
    for k, entry in enumerate(data['obstacles']):
        try:
            obstacles.append(Obstacle(np.asarray(entry['center'], dtype=np.float64), float(entry['radius']),
                                      float(entry.get('safe_distance', 0.5))))
        except (KeyError, TypeError, ValueError) as e:
            raise ControlSpecError(f"{path}: obstacle {k} is malformed ({e})") from e
    joints = data.get('joints', ['pelvis'])
    return obstacles, joint_selector(joints, frames, joint_names)


def load_timeline_file(path: str) -> Tuple[int, List[TimelinePrompt]]:
    """{"base_label": c, "prompts": [{"label": c, "joints": [..], "start": a, "end": b}, ...]}"""
    data = _read_json(path)
    if not isinstance(data, dict) or 'base_label' not in data:
        raise ControlSpecError(f"{path}: expected an object with 'base_label' and 'prompts'")
    prompts = []
    for k, entry in enumerate(data.get('prompts', [])):
        try:
            prompts.append(TimelinePrompt(int(entry['label']), tuple(entry['joints']),
                                          int(entry['start']), int(entry['end'])))
        except (KeyError, TypeError, ValueError) as e:
            raise ControlSpecError(f"{path}: prompt {k} is malformed ({e})") from e
    return int(data['base_label']), prompts
