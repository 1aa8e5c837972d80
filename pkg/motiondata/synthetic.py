"""
Synthetic Motion - Procedural labelled motion clips for desk-scale training
"""
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from loguru import logger

from config import JOINT_NAMES, MOTION_CLASSES, substream
from kinematics import SkeletonError, feature_width, recover_global

PELVIS_HEIGHT = 0.95

# Root-local rest offsets (+x is the body's left, +z is forward)
REST_OFFSETS = {
    'head': (0.0, 0.6, 0.08),
    'left_wrist': (0.22, 0.05, 0.0),
    'right_wrist': (-0.22, 0.05, 0.0),
    'left_foot': (0.1, -0.93, 0.0),
    'right_foot': (-0.1, -0.93, 0.0),
}

# Documented jitter ranges, drawn uniformly per sample
JITTER = {
    'speed': (0.04, 0.07),           # units per frame
    'radius': (1.0, 2.0),            # circle radius
    'body_scale': (0.95, 1.05),
    'gait_period': (28.0, 36.0),     # frames per stride cycle
    'stride': (0.12, 0.2),           # foot swing amplitude
    'arm_swing': (0.06, 0.12),
    'wave_amplitude': (0.1, 0.2),
    'wave_period': (10.0, 16.0),
    'zigzag_amplitude': (0.4, 0.8),  # heading amplitude in radians
    'zigzag_period': (24.0, 40.0),
}


@dataclass
class SyntheticSample:
    features: np.ndarray
    global_motion: np.ndarray
    label: int
    text_tag: str


def class_name(label: int) -> str:
    return MOTION_CLASSES[label]


def text_tag_for(label: int) -> str:
    return MOTION_CLASSES[label].replace('_', ' ')


class MotionSynthesizer:
    """
    Builds local feature tracks for each motion class

    Features:
    - Yaw/planar velocity profiles per class (straight, circles, zigzag, side step)
    - Gait cycle with swinging feet and arms
    - Hand wave on the right wrist
    - Per-sample parameter jitter from JITTER
    """

    def __init__(self, frames: int, joint_names=JOINT_NAMES):
        self.frames = frames
        self.joint_names = tuple(joint_names)
        self.num_joints = len(self.joint_names)

    def _draw(self, rng: np.random.Generator, key: str) -> float:
        lo, hi = JITTER[key]
        return float(rng.uniform(lo, hi))

    def _root_track(self, name: str, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        n = np.arange(self.frames, dtype=np.float64)
        yaw = np.zeros(self.frames)
        vx = np.zeros(self.frames)
        vz = np.zeros(self.frames)

        if name in ('walk_straight', 'walk_and_wave'):
            vz[:] = self._draw(rng, 'speed')
        elif name in ('walk_circle_ccw', 'walk_circle_cw'):
            speed = self._draw(rng, 'speed')
            radius = self._draw(rng, 'radius')
            # turning right (positive yaw) traces a clockwise loop in the x-z plane
            yaw[:] = speed / radius if name == 'walk_circle_cw' else -speed / radius
            vz[:] = speed
        elif name == 'zigzag':
            speed = self._draw(rng, 'speed')
            amplitude = self._draw(rng, 'zigzag_amplitude')
            period = self._draw(rng, 'zigzag_period')
            heading = amplitude * np.sin(2.0 * np.pi * n / period)
            yaw = np.diff(heading, prepend=0.0)
            vz[:] = speed
        elif name == 'side_step':
            direction = 1.0 if rng.uniform() < 0.5 else -1.0
            vx[:] = direction * self._draw(rng, 'speed') * 0.6

        return {'yaw': yaw, 'vx': vx, 'vz': vz}

    def _offsets(self, name: str, rng: np.random.Generator, scale: float) -> np.ndarray:
        frames = self.frames
        n = np.arange(frames, dtype=np.float64)
        offsets = np.zeros((frames, self.num_joints - 1, 3))
        for j, joint in enumerate(self.joint_names[1:]):
            offsets[:, j, :] = np.asarray(REST_OFFSETS[joint]) * scale

        walking = name in ('walk_straight', 'walk_circle_ccw', 'walk_circle_cw', 'zigzag', 'walk_and_wave')
        stepping = name == 'side_step'
        if walking or stepping:
            period = self._draw(rng, 'gait_period')
            phase = 2.0 * np.pi * n / period + rng.uniform(0.0, 2.0 * np.pi)
            stride = self._draw(rng, 'stride')
            arm = self._draw(rng, 'arm_swing')
            axis = 2 if walking else 0
            for joint, sign in (('left_foot', 1.0), ('right_foot', -1.0)):
                if joint in self.joint_names:
                    j = self.joint_names.index(joint) - 1
                    swing = sign * np.sin(phase)
                    offsets[:, j, axis] += stride * swing
                    offsets[:, j, 1] += 0.08 * np.maximum(0.0, swing)
            if walking:
                for joint, sign in (('left_wrist', -1.0), ('right_wrist', 1.0)):
                    if joint in self.joint_names:
                        j = self.joint_names.index(joint) - 1
                        offsets[:, j, 2] += arm * sign * np.sin(phase)

        if name in ('wave_hand_stand', 'walk_and_wave') and 'right_wrist' in self.joint_names:
            j = self.joint_names.index('right_wrist') - 1
            amplitude = self._draw(rng, 'wave_amplitude')
            period = self._draw(rng, 'wave_period')
            wave = np.sin(2.0 * np.pi * n / period + rng.uniform(0.0, 2.0 * np.pi))
            offsets[:, j, 0] = (-0.3 + amplitude * wave) * scale
            offsets[:, j, 1] = 0.55 * scale
            offsets[:, j, 2] = 0.1 * scale

        return offsets

    def features_for(self, label: int, rng: np.random.Generator) -> np.ndarray:
        name = class_name(label)
        scale = self._draw(rng, 'body_scale')
        track = self._root_track(name, rng)
        offsets = self._offsets(name, rng, scale)
        height = np.full(self.frames, PELVIS_HEIGHT * scale)
        return np.concatenate([
            track['yaw'][:, None], track['vx'][:, None], track['vz'][:, None], height[:, None],
            offsets.reshape(self.frames, -1),
        ], axis=1)

    def sample(self, label: int, rng: np.random.Generator) -> SyntheticSample:
        features = self.features_for(label, rng)
        motion = recover_global(features, self.num_joints)
        return SyntheticSample(features, motion, label, text_tag_for(label))


def make_dataset(n: int, frames: int, num_joints: int, seed: int,
                 stream: str = 'dataset') -> List[SyntheticSample]:
    """
    Deterministic labelled dataset, labels assigned round-robin over the classes

    Args:
        n: number of samples
        frames: frames per clip (divisible by 4)
        num_joints: skeleton size, the first J names of the default skeleton
        seed: master seed
        stream: seed substream name ('heldout' for evaluation data)
    """
    if frames % 4 != 0 or frames < 4:
        raise SkeletonError(f"frame count {frames} must be a positive multiple of 4")
    if num_joints < 2 or num_joints > len(JOINT_NAMES):
        raise SkeletonError(f"J must be in [2, {len(JOINT_NAMES)}], got {num_joints}")
    joint_names = JOINT_NAMES[:num_joints]
    synth = MotionSynthesizer(frames, joint_names)
    rng = substream(seed, stream)
    samples = [synth.sample(i % len(MOTION_CLASSES), rng) for i in range(n)]
    if n % len(MOTION_CLASSES):
        logger.debug(f"{n} samples over {len(MOTION_CLASSES)} classes; remainder assigned round-robin")
    logger.info(f"✓ Synthetic dataset built: {n} clips x {frames} frames, "
                f"J={num_joints}, F={feature_width(num_joints)}")
    return samples
