"""Voxel observation cache: raw per-view evidence grouped by voxel.

Fusing normally keeps only constant-size running sums per voxel; optimizing
scaling parameters against the fused map, or training the learned strategy,
requires re-fusing under candidate parameters. The cache stores, for every
surface voxel with a ground-truth label, the raw logits and viewing features
of each observation in CSR layout (``voxel_start`` offsets into the flat
observation arrays, observations sorted by voxel).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CacheRequiredError, ConfigError


@dataclass
class ObservationCache:
    class_count: int
    voxel_key: np.ndarray  # linear grid index per voxel (provenance)
    voxel_gt: np.ndarray
    voxel_start: np.ndarray  # CSR offsets, length V+1
    obs_logits: np.ndarray  # (M, K) float32
    obs_dist: np.ndarray
    obs_inc: np.ndarray
    obs_frame: np.ndarray
    scene_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.voxel_start.shape[0] != self.voxel_key.shape[0] + 1:
            raise ConfigError("voxel_start must have one more entry than voxel_key")
        if self.num_voxels and np.any(np.diff(self.voxel_start) < 1):
            raise ConfigError("every cached voxel needs at least one observation")

    @property
    def num_voxels(self) -> int:
        return self.voxel_key.shape[0]

    @property
    def num_obs(self) -> int:
        return self.obs_logits.shape[0]

    @cached_property
    def obs_voxel_row(self) -> np.ndarray:
        """Voxel row of each observation (derived from the CSR offsets)."""
        return np.repeat(np.arange(self.num_voxels, dtype=np.int64), np.diff(self.voxel_start))

    @property
    def obs_counts(self) -> np.ndarray:
        return np.diff(self.voxel_start)

    def voxel_slice(self, row: int) -> slice:
        return slice(int(self.voxel_start[row]), int(self.voxel_start[row + 1]))

    def select(self, rows: np.ndarray) -> "ObservationCache":
        """New cache restricted to the given voxel rows (order preserved)."""
        rows = np.asarray(rows, dtype=np.int64)
        lengths = (self.voxel_start[rows + 1] - self.voxel_start[rows]).astype(np.int64)
        total = int(lengths.sum())
        base = np.repeat(self.voxel_start[rows], lengths)
        offs = np.arange(total, dtype=np.int64) - np.repeat(
            np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths
        )
        obs_rows = base + offs
        return ObservationCache(
            class_count=self.class_count,
            voxel_key=self.voxel_key[rows].copy(),
            voxel_gt=self.voxel_gt[rows].copy(),
            voxel_start=np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
            obs_logits=self.obs_logits[obs_rows].copy(),
            obs_dist=self.obs_dist[obs_rows].copy(),
            obs_inc=self.obs_inc[obs_rows].copy(),
            obs_frame=self.obs_frame[obs_rows].copy(),
            scene_id=self.scene_id,
            seed=self.seed,
        )

    def subsample(self, max_voxels: int, seed: int) -> "ObservationCache":
        """Uniform voxel subsample (deterministic for a seed); identity when
        the cache is already small enough."""
        if self.num_voxels <= max_voxels:
            return self
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(self.num_voxels, size=max_voxels, replace=False))
        return self.select(rows)

    def save(self, path: str) -> None:
        np.savez(
            path,
            class_count=np.int64(self.class_count),
            voxel_key=self.voxel_key,
            voxel_gt=self.voxel_gt,
            voxel_start=self.voxel_start,
            obs_logits=self.obs_logits,
            obs_dist=self.obs_dist,
            obs_inc=self.obs_inc,
            obs_frame=self.obs_frame,
            scene_id=np.bytes_(self.scene_id.encode()),
            seed=np.int64(self.seed),
        )

    @classmethod
    def load(cls, path: str) -> "ObservationCache":
        import os

        if not os.path.exists(path):
            raise CacheRequiredError(
                f"observation cache not found: {path}; re-run fuse with --cache"
            )
        with np.load(path) as z:
            return cls(
                class_count=int(z["class_count"]),
                voxel_key=z["voxel_key"],
                voxel_gt=z["voxel_gt"],
                voxel_start=z["voxel_start"],
                obs_logits=z["obs_logits"],
                obs_dist=z["obs_dist"],
                obs_inc=z["obs_inc"],
                obs_frame=z["obs_frame"],
                scene_id=bytes(z["scene_id"]).decode(),
                seed=int(z["seed"]),
            )


def build_cache(
    chunks: list[dict],
    gt_label: np.ndarray,
    keep_idx: np.ndarray,
    class_count: int,
    scene_id: str = "",
    seed: int = 0,
) -> ObservationCache:
    """Assemble a cache from per-frame scatter chunks.

    Keeps only voxels in ``keep_idx`` (typically the surface set) that carry a
    ground-truth label; observations are grouped by voxel in frame order.
    """
    keep = np.zeros(gt_label.shape[0], dtype=bool)
    keep[keep_idx] = True
    keep &= gt_label >= 0
    if not chunks:
        raise CacheRequiredError("no observations were cached during fusion")
    all_idx = np.concatenate([c["idx"] for c in chunks])
    all_logits = np.concatenate([c["logits"] for c in chunks])
    all_dist = np.concatenate([c["dist"] for c in chunks])
    all_inc = np.concatenate([c["inc"] for c in chunks])
    all_frame = np.concatenate([c["frame"] for c in chunks])
    m = keep[all_idx]
    all_idx = all_idx[m]
    order = np.argsort(all_idx, kind="stable")
    sorted_idx = all_idx[order]
    uniq, counts = np.unique(sorted_idx, return_counts=True)
    return ObservationCache(
        class_count=class_count,
        voxel_key=uniq.astype(np.int64),
        voxel_gt=gt_label[uniq].astype(np.int32),
        voxel_start=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        obs_logits=all_logits[m][order],
        obs_dist=all_dist[m][order],
        obs_inc=all_inc[m][order],
        obs_frame=all_frame[m][order],
        scene_id=scene_id,
        seed=seed,
    )
