"""
Data Manager - Build, cache and load motion datasets (JSON lines)
"""
import json
import os
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from config import DATA_DIR, JOINT_NAMES, MOTION_CLASSES
from kinematics import SkeletonError, extract_features, feature_width, recover_global
from motiondata.synthetic import SyntheticSample, make_dataset, text_tag_for


class MotionFormatError(ValueError):
    """Raised when a motion file line cannot be parsed"""


class MotionDataManager:
    """
    Manages motion datasets on disk

    Features:
    - Generate synthetic datasets deterministically per seed
    - Cache datasets locally as JSON lines
    - Validate shape, finiteness and label range on load
    - Per-class summary tables
    """

    def __init__(self, cache_dir: str = DATA_DIR, joint_names: Sequence[str] = JOINT_NAMES):
        self.cache_dir = cache_dir
        self.joint_names = tuple(joint_names)

        # Create cache directory
        os.makedirs(cache_dir, exist_ok=True)

        logger.info(f"✓ Data Manager initialized (cache: {cache_dir})")

    def get_dataset(self, n: int, frames: int, seed: int, stream: str = 'dataset',
                    use_cache: bool = True) -> List[SyntheticSample]:
        """
        Synthetic dataset for (n, frames, seed, stream), cached on disk

        Args:
            n: number of clips
            frames: frames per clip
            seed: master seed
            stream: 'dataset' for training clips, 'heldout' for evaluation
            use_cache: whether to reuse a cached file

        Returns:
            list of SyntheticSample
        """
        cache_file = self._get_cache_filename(n, frames, seed, stream)

        if use_cache and os.path.exists(cache_file):
            logger.info(f"📂 Loading cached motions: {cache_file}")
            return self.load_motions(cache_file)

        samples = make_dataset(n, frames, len(self.joint_names), seed, stream=stream)
        self.save_motions(samples, cache_file)
        return samples

    def _get_cache_filename(self, n: int, frames: int, seed: int, stream: str) -> str:
        """Generate cache filename"""
        return os.path.join(self.cache_dir, f"{stream}_n{n}_t{frames}_j{len(self.joint_names)}_s{seed}.jsonl")

    def save_motions(self, samples: List[SyntheticSample], path: str):
        """Write one JSON object per clip"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as f:
            for sample in samples:
                record = {
                    'label': int(sample.label),
                    'text_tag': sample.text_tag,
                    'global': np.asarray(sample.global_motion).tolist(),
                }
                # features are stored verbatim so a cached dataset reloads bit-identical
                if np.size(sample.features):
                    record['features'] = np.asarray(sample.features).tolist()
                f.write(json.dumps(record) + '\n')
        logger.debug(f"💾 Saved {len(samples)} motions: {path}")

    def load_motions(self, path: str) -> List[SyntheticSample]:
        """
        Read a motion file

        Records written by save_motions carry their features and load
        exactly as saved. Records with global positions only (external
        files, generated motions) get features re-derived and the global
        track recovered from them, so every loaded sample satisfies the
        features/global round trip.
        """
        samples = []
        with open(path, 'r') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    motion = np.asarray(record['global'], dtype=np.float64)
                    label = int(record['label'])
                    tag = str(record.get('text_tag', ''))
                    stored = record.get('features')
                    features = None if stored is None else np.asarray(stored, dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise MotionFormatError(f"{path}:{line_no}: malformed motion record ({e})") from e
                where = f"{path}:{line_no}"
                self._validate_motion(motion, label, where)
                if features is None:
                    features = extract_features(motion, self.joint_names)
                    motion = recover_global(features, len(self.joint_names))
                else:
                    self._validate_features(features, motion.shape[0], where)
                samples.append(SyntheticSample(features, motion, label, tag or text_tag_for(label)))
        logger.debug(f"✅ Loaded {len(samples)} motions from {path}")
        return samples

    def save_global(self, motions: List[np.ndarray], labels: List[int], path: str):
        """Write generated motions in the same JSON-lines format"""
        samples = [SyntheticSample(np.zeros((0,)), m, int(lab), text_tag_for(int(lab)))
                   for m, lab in zip(motions, labels)]
        self.save_motions(samples, path)

    def _validate_motion(self, motion: np.ndarray, label: int, where: str):
        """Validate one clip"""
        if motion.ndim != 3 or motion.shape[1:] != (len(self.joint_names), 3):
            raise SkeletonError(f"{where}: expected (T, {len(self.joint_names)}, 3), got {motion.shape}")
        if not np.all(np.isfinite(motion)):
            raise MotionFormatError(f"{where}: motion contains non-finite values")
        if not 0 <= label < len(MOTION_CLASSES):
            raise MotionFormatError(f"{where}: label {label} outside [0, {len(MOTION_CLASSES)})")

    def _validate_features(self, features: np.ndarray, frames: int, where: str):
        width = feature_width(len(self.joint_names))
        if features.shape != (frames, width):
            raise SkeletonError(f"{where}: expected features ({frames}, {width}), got {features.shape}")
        if not np.all(np.isfinite(features)):
            raise MotionFormatError(f"{where}: features contain non-finite values")

    def summary(self, samples: List[SyntheticSample]) -> pd.DataFrame:
        """Per-class clip counts and mean root travel distance"""
        rows = []
        for sample in samples:
            root = sample.global_motion[:, 0, :]
            travel = float(np.linalg.norm(np.diff(root[:, [0, 2]], axis=0), axis=1).sum())
            rows.append({'label': sample.label, 'text_tag': sample.text_tag, 'travel': travel})
        df = pd.DataFrame(rows, columns=['label', 'text_tag', 'travel'])
        if df.empty:
            return df
        return df.groupby(['label', 'text_tag']).agg(count=('travel', 'size'),
                                                     mean_travel=('travel', 'mean')).reset_index()


def stack_features(samples: List[SyntheticSample]) -> np.ndarray:
    return np.stack([s.features for s in samples])


def stack_motions(samples: List[SyntheticSample]) -> np.ndarray:
    return np.stack([s.global_motion for s in samples])


def stack_labels(samples: List[SyntheticSample], indices: Optional[np.ndarray] = None) -> np.ndarray:
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return labels if indices is None else labels[indices]
