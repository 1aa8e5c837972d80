"""
Evaluation Harness - Control metrics and evaluation protocols
Keyframe errors, foot skating, diversity and the density / cross / upper-body / component suites
"""
import itertools
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from sklearn.ensemble import RandomForestClassifier
from sklearn.preprocessing import StandardScaler

from config import JOINT_NAMES, MOTION_CLASSES, substream
from editctl import ControlSpecError
from kinematics import SkeletonError, SpatialControl, extract_features, joint_index
from maskmodel import BaseWeights, corrupt, forward_base, masked_nll
from motiondata.synthetic import make_dataset
from pipeline import GenerationRequest, GenerationResult, Models, generate
from tokenizer import TokenizerWeights

ERROR_THRESHOLD = 0.5          # desk units, "50 cm"
FOOT_HEIGHT_EPS = 0.05
FOOT_SLIDE_EPS = 0.025
FEET = ('left_foot', 'right_foot')
LOWER_BODY = ('pelvis', 'left_foot', 'right_foot')

# Enumeration order of the cross-combination protocol
CROSS_JOINTS = ('pelvis', 'left_foot', 'right_foot', 'head', 'left_wrist', 'right_wrist')

# (logit edit, codebook edit, control branch)
COMPONENT_GRID = list(itertools.product((False, True), repeat=3))

REPORT_COLUMNS = ('Traj. Err.', 'Loc. Err.', 'Avg. Err.', 'Foot Skating', 'Diversity')


@dataclass
class MetricReport:
    """One row of an evaluation table"""
    name: str
    traj_err: float = 0.0
    loc_err: float = 0.0
    avg_err: float = 0.0
    foot_skate: float = 0.0
    diversity_proxy: float = float('nan')
    density: Optional[int] = None
    joints: Tuple[str, ...] = ()
    samples: int = 0
    extras: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for key in ('traj_err', 'loc_err', 'avg_err', 'foot_skate'):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative, got {getattr(self, key)}")
        for key in ('traj_err', 'loc_err', 'foot_skate'):
            if getattr(self, key) > 1:
                raise ValueError(f"{key} is a ratio, got {getattr(self, key)}")

    def to_row(self) -> Dict[str, Any]:
        row = {
            'Name': self.name,
            'Joints': '+'.join(self.joints),
            'Density': self.density,
            'Samples': self.samples,
            'Traj. Err.': self.traj_err,
            'Loc. Err.': self.loc_err,
            'Avg. Err.': self.avg_err,
            'Foot Skating': self.foot_skate,
            'Diversity': self.diversity_proxy,
        }
        row.update(self.extras)
        return row


# ====================
# METRICS
# ====================

def keyframe_errors(gen: np.ndarray, control: SpatialControl,
                    threshold: float = ERROR_THRESHOLD) -> Tuple[float, float, float]:
    """
    Errors over the controlled entries of one motion

    Returns:
        (traj_err, loc_err, avg_err): 1 if any entry misses by more than
        threshold, the fraction of entries that miss, and the mean distance
    """
    if control.is_empty():
        raise ControlSpecError("keyframe errors need at least one controlled entry")
    gen = np.asarray(gen, dtype=np.float64)
    if gen.shape != control.targets.shape:
        raise SkeletonError(f"generated motion {gen.shape} does not match control {control.targets.shape}")
    active = control.mask > 0
    dist = np.linalg.norm(gen[active] - control.targets[active], axis=-1)
    misses = dist > threshold
    return float(misses.any()), float(misses.mean()), float(dist.mean())


def batch_keyframe_errors(gens: Sequence[np.ndarray], controls: Sequence[SpatialControl],
                          threshold: float = ERROR_THRESHOLD) -> Tuple[float, float, float]:
    """Per-sample keyframe errors averaged over a sample set"""
    if len(gens) != len(controls) or not gens:
        raise ValueError("need matching, non-empty lists of motions and controls")
    rows = np.array([keyframe_errors(g, c, threshold) for g, c in zip(gens, controls)])
    traj, loc, avg = rows.mean(axis=0)
    return float(traj), float(loc), float(avg)


def foot_skate(gen: np.ndarray, joint_names: Sequence[str] = JOINT_NAMES,
               height_eps: float = FOOT_HEIGHT_EPS, slide_eps: float = FOOT_SLIDE_EPS) -> float:
    """Fraction of frame transitions where a grounded foot slides farther than slide_eps"""
    feet = [joint_index(name, joint_names) for name in FEET if name in joint_names]
    if not feet:
        raise SkeletonError("foot skating needs left_foot or right_foot in the skeleton")
    gen = np.asarray(gen, dtype=np.float64)
    if gen.shape[0] < 2:
        return 0.0
    positions = gen[:, feet, :]
    grounded = positions[1:, :, 1] < height_eps
    step = np.linalg.norm(positions[1:, :, [0, 2]] - positions[:-1, :, [0, 2]], axis=-1)
    skating = np.any(grounded & (step > slide_eps), axis=1)
    return float(skating.mean())


def diversity_proxy(samples: Sequence[np.ndarray], pairs: int = 100, seed: int = 0) -> float:
    """Mean over random pairs of the frame- and joint-averaged L2 distance"""
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    rng = substream(seed, 'eval-pairs')
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    first = rng.integers(0, len(stack), size=pairs)
    second = (first + rng.integers(1, len(stack), size=pairs)) % len(stack)
    dist = np.linalg.norm(stack[first] - stack[second], axis=-1)
    return float(dist.mean())


def random_keyframes(frames: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= count <= frames:
        raise ControlSpecError(f"cannot pick {count} keyframes from {frames} frames")
    return np.sort(rng.choice(frames, size=count, replace=False))


def keyframe_mask(frames: int, joint_ids: Sequence[int], num_joints: int, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """σ with `count` random keyframes per listed joint"""
    mask = np.zeros((frames, num_joints))
    for j in joint_ids:
        mask[random_keyframes(frames, count, rng), j] = 1.0
    return mask


# ====================
# PROTOCOLS
# ====================

def _summarize(name: str, results: List[GenerationResult], controls: List[SpatialControl],
               joint_names: Sequence[str], seed: int, density: Optional[int] = None,
               joints: Tuple[str, ...] = (), threshold: float = ERROR_THRESHOLD) -> MetricReport:
    motions = [r.motion for r in results]
    traj, loc, avg = batch_keyframe_errors(motions, controls, threshold)
    skate = float(np.mean([foot_skate(m, joint_names) for m in motions]))
    diversity = diversity_proxy(motions, seed=seed) if len(motions) >= 2 else float('nan')
    return MetricReport(name, traj, loc, avg, skate, diversity, density, joints, len(motions))


def _run(models: Models, motions: np.ndarray, labels: np.ndarray, req: GenerationRequest,
         masks: List[np.ndarray], **toggles) -> Tuple[List[GenerationResult], List[SpatialControl]]:
    results, controls = [], []
    for k, mask in enumerate(masks):
        i = k % len(motions)
        control = SpatialControl.from_motion(motions[i], mask)
        sample_req = replace(req, label=int(labels[i]), frames=motions.shape[1], spatial=control,
                             seed=req.seed + k, trace=False, **toggles)
        results.append(generate(sample_req, models))
        controls.append(control)
    return results, controls


def density_sweep(models: Models, motions: np.ndarray, labels: np.ndarray, req: GenerationRequest,
                  joint: str = 'pelvis', levels: Optional[Sequence[int]] = None,
                  samples: int = 20, threshold: float = ERROR_THRESHOLD) -> List[MetricReport]:
    """
    Control one joint with ground-truth keyframes at increasing density

    Args:
        motions: (N, T, J, 3) held-out ground-truth motions
        labels: (N,) their labels
        req: request template (edit profile, scales, seed)
        joint: controlled joint
        levels: keyframe counts, defaults to 1, 2, 5, 25% and 100% of T
        samples: generations per level
        threshold: keyframe distance above which a trajectory or location fails

    Returns:
        one MetricReport per level
    """
    motions = np.asarray(motions, dtype=np.float64)
    frames, num_joints = motions.shape[1:3]
    joint_names = JOINT_NAMES[:num_joints]
    levels = list(levels) if levels is not None else [1, 2, 5, frames // 4, frames]
    for level in levels:
        if not 1 <= level <= frames:
            raise ControlSpecError(f"density level {level} outside [1, {frames}]")
    j = joint_index(joint, joint_names)

    reports = []
    for k, level in enumerate(levels):
        rng = substream(req.seed, 'eval-keyframes', k)
        masks = [keyframe_mask(frames, [j], num_joints, level, rng) for _ in range(samples)]
        results, controls = _run(models, motions, labels, req, masks)
        report = _summarize(f'density_{level}', results, controls, joint_names, req.seed, level, (joint,),
                            threshold)
        reports.append(report)
        logger.info(f"Density {level:>3}: avg err {report.avg_err:.4f}, traj err {report.traj_err:.3f}")

    errors = [r.avg_err for r in reports]
    increasing = bool(all(b >= a for a, b in zip(errors, errors[1:])))
    for report in reports:
        report.extras['avg_err_increases'] = increasing
    logger.info(f"Avg. Err. {'increases' if increasing else 'does not increase'} with density")
    return reports


def cross_combinations() -> List[Tuple[str, ...]]:
    """All 63 non-empty joint subsets, by size then in joint order"""
    combos = []
    for size in range(1, len(CROSS_JOINTS) + 1):
        combos.extend(itertools.combinations(CROSS_JOINTS, size))
    return combos


def cross_protocol(models: Models, motions: np.ndarray, labels: np.ndarray, req: GenerationRequest,
                   keyframes: int = 5, samples: int = 4,
                   threshold: float = ERROR_THRESHOLD) -> List[MetricReport]:
    """One report per joint combination, each joint controlled at `keyframes` random frames"""
    motions = np.asarray(motions, dtype=np.float64)
    frames, num_joints = motions.shape[1:3]
    joint_names = JOINT_NAMES[:num_joints]
    missing = [name for name in CROSS_JOINTS if name not in joint_names]
    if missing:
        raise SkeletonError(f"cross combinations need joints {missing}")

    reports = []
    for k, combo in enumerate(cross_combinations()):
        rng = substream(req.seed, 'eval-keyframes', 100 + k)
        ids = [joint_index(name, joint_names) for name in combo]
        masks = [keyframe_mask(frames, ids, num_joints, keyframes, rng) for _ in range(samples)]
        results, controls = _run(models, motions, labels, req, masks)
        reports.append(_summarize(f'cross_{k + 1}', results, controls, joint_names, req.seed, keyframes, combo,
                                  threshold))
    logger.info(f"Cross combinations: mean avg err {np.mean([r.avg_err for r in reports]):.4f}")
    return reports


def upper_body_protocol(models: Models, motions: np.ndarray, labels: np.ndarray, req: GenerationRequest,
                        samples: int = 20, threshold: float = ERROR_THRESHOLD) -> MetricReport:
    """Lower body held to ground truth on every frame, upper body generated"""
    motions = np.asarray(motions, dtype=np.float64)
    frames, num_joints = motions.shape[1:3]
    joint_names = JOINT_NAMES[:num_joints]
    if samples < 20:
        logger.warning(f"⚠️ Upper-body diversity over {samples} generations (fewer than 20)")
    mask = np.zeros((frames, num_joints))
    for name in LOWER_BODY:
        mask[:, joint_index(name, joint_names)] = 1.0
    results, controls = _run(models, motions, labels, req, [mask] * samples)
    report = _summarize('upper_body', results, controls, joint_names, req.seed, frames, LOWER_BODY, threshold)
    report.extras['controlled_entries'] = int(mask.sum())
    logger.info(f"Upper body: anchor avg err {report.avg_err:.4f}, diversity {report.diversity_proxy:.4f}")
    return report


def components_suite(models: Models, motions: np.ndarray, labels: np.ndarray, req: GenerationRequest,
                     keyframes: int = 5, samples: int = 20, joint: str = 'pelvis',
                     threshold: float = ERROR_THRESHOLD) -> List[MetricReport]:
    """Every on/off combination of logit editing, codebook editing and the control branch"""
    motions = np.asarray(motions, dtype=np.float64)
    frames, num_joints = motions.shape[1:3]
    joint_names = JOINT_NAMES[:num_joints]
    rng = substream(req.seed, 'eval-keyframes', 200)
    ids = [joint_index(joint, joint_names)]
    masks = [keyframe_mask(frames, ids, num_joints, keyframes, rng) for _ in range(samples)]

    reports = []
    for k, (logit, code, branch) in enumerate(COMPONENT_GRID):
        results, controls = _run(models, motions, labels, req, masks, use_logit_edit=logit,
                                 use_codebook_edit=code, use_control_branch=branch)
        report = _summarize(f'#{k + 1}', results, controls, joint_names, req.seed, keyframes, (joint,),
                            threshold)
        report.extras.update({'Logits Editing': logit, 'Codebook Editing': code, 'Control Branch': branch})
        reports.append(report)
        logger.info(f"Components #{k + 1} (logit={logit}, codebook={code}, branch={branch}): "
                    f"avg err {report.avg_err:.4f}")
    return reports


# ====================
# QUALITY PROXIES
# ====================

def heldout_masked_nll(base: BaseWeights, tokenizer: TokenizerWeights, features: np.ndarray,
                       labels: np.ndarray, seed: int, ratio: float = 0.5) -> float:
    """Masked-token NLL of held-out clips at a fixed mask ratio"""
    ids = tokenizer.tokenize(np.asarray(features, dtype=np.float64))[..., 0]
    rng = substream(seed, 'masking', 2)
    rows = [corrupt(row, ratio, rng, base.mask_id) for row in ids]
    corrupted = np.stack([r[0] for r in rows])
    positions = np.stack([r[1] for r in rows])
    nll = masked_nll(forward_base(corrupted, np.asarray(labels, dtype=np.int64), base), ids, positions)
    return float(nll.data)


def clip_descriptor(motion: np.ndarray, joint_names: Sequence[str] = JOINT_NAMES) -> np.ndarray:
    """Heading-invariant summary of a clip: per-channel mean, std and mean absolute value"""
    feats = extract_features(np.asarray(motion, dtype=np.float64), joint_names)
    return np.concatenate([feats.mean(axis=0), feats.std(axis=0), np.abs(feats).mean(axis=0)])


class MotionClassifier:
    """
    Random-forest label classifier over standardized clip descriptors

    Trained on its own synthetic stream, independent of the generator's data.
    Its accuracy on generated clips stands in for text-motion alignment.
    """

    def __init__(self, joint_names: Sequence[str] = JOINT_NAMES, num_classes: int = len(MOTION_CLASSES)):
        self.joint_names = tuple(joint_names)
        self.num_classes = num_classes
        self.scaler = StandardScaler()
        self.model: Optional[RandomForestClassifier] = None
        self.train_accuracy: Optional[float] = None

    def _descriptors(self, motions: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([clip_descriptor(m, self.joint_names) for m in motions])

    def fit(self, n: int, frames: int, seed: int, n_estimators: int = 100,
            max_depth: Optional[int] = 10) -> 'MotionClassifier':
        samples = make_dataset(n, frames, len(self.joint_names), seed, stream='classifier')
        motions = [s.global_motion for s in samples]
        labels = np.array([s.label for s in samples], dtype=np.int64)
        x = self.scaler.fit_transform(self._descriptors(motions))

        rng = substream(seed, 'classifier', 1)
        self.model = RandomForestClassifier(
            n_estimators=n_estimators,
            max_depth=max_depth,
            random_state=int(rng.integers(2 ** 31 - 1)),
        )
        self.model.fit(x, labels)
        self.train_accuracy = self.accuracy(motions, labels)
        logger.success(f"✅ Motion classifier trained on {n} clips (train accuracy {self.train_accuracy:.3f})")
        return self

    def predict(self, motions: Sequence[np.ndarray]) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("classifier is not trained")
        return self.model.predict(self.scaler.transform(self._descriptors(motions)))

    def accuracy(self, motions: Sequence[np.ndarray], labels: Sequence[int]) -> float:
        return float(np.mean(self.predict(motions) == np.asarray(labels)))
