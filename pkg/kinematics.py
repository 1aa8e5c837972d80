"""
Kinematics - Local motion features and global joint positions

Feature layout per frame (F = 4 + 3(J-1)):
    [yaw velocity, planar velocity x, planar velocity z, root height,
     (J-1) root-local joint offsets (x, y, z)]
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from loguru import logger

import diffcore as dc
from config import JOINT_NAMES
from diffcore import Tensor

HEADING_EPS = 1e-9


class SkeletonError(ValueError):
    """Raised for feature widths or joint names that do not fit the skeleton"""


def feature_width(num_joints: int) -> int:
    return 4 + 3 * (num_joints - 1)


def joints_for_width(width: int) -> int:
    if width < 4 or (width - 4) % 3 != 0:
        raise SkeletonError(f"feature width {width} does not match any skeleton")
    return (width - 4) // 3 + 1


def joint_index(name: str, joint_names: Sequence[str] = JOINT_NAMES) -> int:
    try:
        return list(joint_names).index(name)
    except ValueError:
        raise SkeletonError(f"unknown joint '{name}' (skeleton: {', '.join(joint_names)})") from None


def wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class SpatialControl:
    """Target positions S (T, J, 3) plus binary mask sigma (T, J)"""
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.mask = (np.asarray(self.mask) > 0).astype(np.float64)
        if self.targets.shape != self.mask.shape + (3,):
            raise SkeletonError(f"control targets {self.targets.shape} do not match mask {self.mask.shape}")
        # uncontrolled entries carry no target
        self.targets = self.targets * self.mask[..., None]

    @property
    def frames(self) -> int:
        return self.mask.shape[0]

    @property
    def active(self) -> int:
        return int(self.mask.sum())

    def is_empty(self) -> bool:
        return self.active == 0

    @classmethod
    def empty(cls, frames: int, num_joints: int) -> 'SpatialControl':
        return cls(np.zeros((frames, num_joints, 3)), np.zeros((frames, num_joints)))

    @classmethod
    def from_motion(cls, motion: np.ndarray, mask: np.ndarray) -> 'SpatialControl':
        """Control that asks for `motion` wherever `mask` is set"""
        return cls(np.asarray(motion, dtype=np.float64), mask)

    def merge(self, other: 'SpatialControl') -> 'SpatialControl':
        """Entries of `other` win where both are set"""
        mask = np.maximum(self.mask, other.mask)
        take_other = other.mask[..., None] > 0
        targets = np.where(take_other, other.targets, self.targets)
        return SpatialControl(targets, mask)


# ====================
# RECOVERY R(.)
# ====================

def recover_global(features: Union[Tensor, np.ndarray], num_joints: Optional[int] = None):
    """
    Global joint positions from local motion features

    Accepts (..., T, F) as a Tensor (differentiable, returns a Tensor) or as
    an array (returns an array). Yaw and planar position integrate with an
    inclusive cumulative sum from the origin.
    """
    as_array = not isinstance(features, Tensor)
    f = Tensor(features) if as_array else features
    width = f.shape[-1]
    if num_joints is None:
        num_joints = joints_for_width(width)
    if width != feature_width(num_joints):
        raise SkeletonError(f"feature width {width} does not match J={num_joints} "
                            f"(expected {feature_width(num_joints)})")

    lead = f.shape[:-1]
    theta = dc.cumsum(f[..., 0:1], axis=-2)
    c, s = dc.cos(theta), dc.sin(theta)
    vx, vz = f[..., 1:2], f[..., 2:3]
    px = dc.cumsum(c * vx + s * vz, axis=-2)
    pz = dc.cumsum(dc.neg(s) * vx + c * vz, axis=-2)
    height = f[..., 3:4]
    root = dc.reshape(dc.concat([px, height, pz], axis=-1), lead + (1, 3))
    if num_joints == 1:
        out = root
    else:
        rest = num_joints - 1
        offsets = dc.reshape(f[..., 4:], lead + (rest, 3))
        ox, oy, oz = offsets[..., 0], offsets[..., 1], offsets[..., 2]
        wide = lead + (rest,)
        cw, sw = dc.expand(c, wide), dc.expand(s, wide)
        jx = dc.expand(px, wide) + cw * ox + sw * oz
        jy = dc.expand(height, wide) + oy
        jz = dc.expand(pz, wide) - sw * ox + cw * oz
        one = wide + (1,)
        joints = dc.concat([dc.reshape(jx, one), dc.reshape(jy, one), dc.reshape(jz, one)], axis=-1)
        out = dc.concat([root, joints], axis=-2)
    return out.data.copy() if as_array else out


# ====================
# EXTRACTION
# ====================

def root_headings(motion: np.ndarray, joint_names: Sequence[str] = JOINT_NAMES) -> np.ndarray:
    """Heading per frame from the head-pelvis planar direction (0 faces +z)"""
    head = joint_index('head', joint_names)
    d = motion[:, head, :] - motion[:, 0, :]
    headings = np.zeros(motion.shape[0])
    previous = 0.0
    fallbacks = 0
    for n in range(motion.shape[0]):
        dx, dz = d[n, 0], d[n, 2]
        if np.hypot(dx, dz) < HEADING_EPS:
            headings[n] = previous
            fallbacks += 1
        else:
            headings[n] = np.arctan2(dx, dz)
        previous = headings[n]
    if fallbacks:
        logger.warning(f"Heading undefined on {fallbacks} frame(s); reused previous heading")
    return headings


def extract_features(motion: np.ndarray, joint_names: Sequence[str] = JOINT_NAMES) -> np.ndarray:
    """
    Inverse of recover_global for a single (T, J, 3) motion

    Args:
        motion: global joint positions, joint 0 is the pelvis
        joint_names: skeleton names, must contain 'head'

    Returns:
        (T, F) features such that recover_global(features) reproduces motion
    """
    motion = np.asarray(motion, dtype=np.float64)
    if motion.ndim != 3 or motion.shape[2] != 3:
        raise SkeletonError(f"expected (T, J, 3) motion, got {motion.shape}")
    frames, num_joints, _ = motion.shape
    if num_joints != len(joint_names):
        raise SkeletonError(f"motion has {num_joints} joints, skeleton names {len(joint_names)}")
    if frames < 2:
        raise SkeletonError("feature extraction needs at least 2 frames")

    theta = root_headings(motion, joint_names)
    yaw_vel = wrap_angle(np.diff(theta, prepend=0.0))
    c, s = np.cos(theta), np.sin(theta)

    root = motion[:, 0, :]
    step = np.diff(root, axis=0, prepend=np.zeros((1, 3)))
    vx = c * step[:, 0] - s * step[:, 2]
    vz = s * step[:, 0] + c * step[:, 2]

    rel = motion[:, 1:, :] - root[:, None, :]
    ox = c[:, None] * rel[..., 0] - s[:, None] * rel[..., 2]
    oz = s[:, None] * rel[..., 0] + c[:, None] * rel[..., 2]
    offsets = np.stack([ox, rel[..., 1], oz], axis=-1).reshape(frames, -1)

    return np.concatenate([yaw_vel[:, None], vx[:, None], vz[:, None], root[:, 1:2], offsets], axis=1)
