"""End-to-end orchestration: fuse a scene, export, and evaluate.

Fused distributions are cast to float32 when they leave the pipeline (export
or prediction sets) and renormalized in float64 on the way back in, so
metrics computed in-process match metrics recomputed from the CSV export
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import glfs as glfs_mod
from . import tsdf
from .cache import ObservationCache, build_cache
from .errors import ConfigError, DegenerateInputError
from .frames import Scene
from .fusion import (
    DEFAULT_LAPLACE_ALPHA,
    FusionStrategy,
    GridAccumulator,
    WeightScheme,
)
from .mathutil import softmax
from .metrics import DEFAULT_BINS, PredictionSet, all_metrics, reliability_table
from .scaling import ScalingParams


@dataclass
class FusedMap:
    scene: Scene
    grid: tsdf.VoxelGrid
    accumulator: GridAccumulator
    surface_idx: np.ndarray
    strategy: FusionStrategy
    cache: ObservationCache | None = None


def prediction_set_from_probs32(probs32: np.ndarray, gt: np.ndarray) -> PredictionSet:
    """Float32 probabilities -> float64 renormalized prediction set (the one
    canonical conversion used both in-process and when reading exports)."""
    p = np.asarray(probs32, dtype=np.float32).astype(np.float64)
    p /= p.sum(axis=1, keepdims=True)
    return PredictionSet(p, gt)


def fuse_scene(
    scene: Scene,
    strategy: FusionStrategy = FusionStrategy.RBU,
    scheme: WeightScheme | None = None,
    alpha: float = DEFAULT_LAPLACE_ALPHA,
    scaling: ScalingParams | None = None,
    glfs_params: glfs_mod.GLFSParams | None = None,
    truncation_factor: float = tsdf.DEFAULT_TRUNCATION_FACTOR,
    surface_band: float | None = None,
    enable_cache: bool = False,
    assign_gt: bool = True,
    threads: int = 0,
    backend=None,
    grid: tsdf.VoxelGrid | None = None,
) -> FusedMap:
    """Integrate every frame (geometry + semantics) and label the surface.

    Semantic observations go to voxels inside the truncation band of each
    frame; likelihoods are ``softmax(logits / tau)`` when scaling parameters
    (or the learned strategy's temperature vector) are given. The raw logits
    of every band observation are retained when ``enable_cache`` is on.
    """
    strategy = FusionStrategy(strategy)
    scheme = scheme or WeightScheme.constant()
    if strategy is FusionStrategy.GLFS and glfs_params is None:
        raise ConfigError("fusion strategy glfs needs --glfs-params")
    if grid is None:
        grid = tsdf.VoxelGrid.from_scene(scene, truncation_factor)
    k = scene.class_count

    divisor = None
    if scaling is not None:
        divisor = scaling.divisor(k)
    if strategy is FusionStrategy.GLFS:
        tau = glfs_params.tau
        divisor = tau if divisor is None else divisor * tau

    gates = None
    if strategy is FusionStrategy.GLFS:
        gates = (glfs_params.gate_g, glfs_params.gate_eps)
    acc = GridAccumulator(strategy, grid.num_voxels, k, alpha=alpha, caching=enable_cache, glfs_gates=gates)

    need_geom = enable_cache or strategy is FusionStrategy.GLFS or scheme.kind != "const"
    for frame in scene.frames:
        obs = tsdf.frame_observations(
            grid, frame, scene.intrinsics, scheme, need_geom=need_geom, backend=backend, threads=threads
        )
        band = np.nonzero(obs.band_mask)[0]
        raw = frame.logits.reshape(-1, k)[obs.pix[band]]
        scaled = raw.astype(np.float64) if divisor is None else raw / divisor
        probs = softmax(scaled)
        if strategy is FusionStrategy.GLFS:
            w = glfs_mod.lookup_weights(
                glfs_params, np.argmax(probs, axis=1), obs.dist[band], obs.inc[band]
            )
        else:
            w = obs.wvox[band].astype(np.float64)
        acc.observe_frame(
            band,
            probs,
            w,
            cache_logits=raw if enable_cache else None,
            dist=obs.dist[band],
            inc=obs.inc[band],
            frame_index=frame.index,
            backend=backend,
            threads=threads,
        )
        tsdf.apply_updates(grid, obs, backend=backend, threads=threads)

    surface_idx = tsdf.extract_surface_voxels(grid, surface_band)
    if assign_gt and scene.has_gt:
        tsdf.assign_ground_truth(grid, scene, surface_idx, backend=backend, threads=threads)

    cache = None
    if enable_cache:
        cache = build_cache(acc.cache_chunks, grid.gt_label, surface_idx, k)
    return FusedMap(
        scene=scene,
        grid=grid,
        accumulator=acc,
        surface_idx=surface_idx,
        strategy=strategy,
        cache=cache,
    )


def voxel_rows(fused: FusedMap) -> np.ndarray:
    """Surface voxels that are labeled and semantically observed (the metric
    population)."""
    idx = fused.surface_idx
    ok = (fused.grid.gt_label[idx] >= 0) & (fused.accumulator.obs_count[idx] > 0)
    return idx[ok]


def voxel_prediction_set(fused: FusedMap):
    """(PredictionSet, voxel linear indices) for the metric population."""
    rows = voxel_rows(fused)
    if rows.size == 0:
        raise DegenerateInputError("no labeled surface voxels to evaluate")
    probs32 = fused.accumulator.finalize(rows).astype(np.float32)
    return prediction_set_from_probs32(probs32, fused.grid.gt_label[rows]), rows


def pixel_prediction_set(
    scene: Scene, scaling: ScalingParams | None = None, stride: int = 1
) -> PredictionSet:
    """Pooled pixel predictions (optionally scaled) against gt labels."""
    if not scene.has_gt:
        raise DegenerateInputError("pixel evaluation needs ground-truth labels")
    k = scene.class_count
    divisor = None if scaling is None else scaling.divisor(k)
    prob_parts, gt_parts = [], []
    for frame in scene.frames:
        lg = frame.logits[::stride, ::stride].reshape(-1, k).astype(np.float64)
        if divisor is not None:
            lg = lg / divisor
        prob_parts.append(softmax(lg).astype(np.float32))
        gt_parts.append(frame.gt_labels[::stride, ::stride].reshape(-1).astype(np.int64))
    return prediction_set_from_probs32(np.concatenate(prob_parts), np.concatenate(gt_parts))


def export_map(fused: FusedMap, path: str, sidecar_extra: dict | None = None) -> None:
    """Voxel export for all surface voxels; unobserved/unlabeled rows carry -1."""
    idx = fused.surface_idx
    k = fused.accumulator.class_count
    probs32 = np.zeros((idx.size, k), dtype=np.float32)
    pred = np.full(idx.size, -1, dtype=np.int64)
    conf = np.zeros(idx.size, dtype=np.float64)
    observed = fused.accumulator.obs_count[idx] > 0
    if np.any(observed):
        p = fused.accumulator.finalize(idx[observed]).astype(np.float32)
        probs32[observed] = p
        pred[observed] = np.argmax(p, axis=1)
        conf[observed] = np.max(p, axis=1)
    extra = {"class_count": k}
    if sidecar_extra:
        extra.update(sidecar_extra)
    tsdf.write_map_csv(path, fused.grid, idx, pred, conf, probs=probs32, sidecar_extra=extra)


def prediction_set_from_map_csv(path: str):
    """Reconstruct the metric population from an export (lossless)."""
    cols, meta = tsdf.read_map_csv(path)
    gt = cols["gt_label"].astype(np.int64)
    pred = cols["pred_label"].astype(np.int64)
    ok = (gt >= 0) & (pred >= 0)
    if not np.any(ok):
        raise DegenerateInputError(f"{path}: no labeled rows to evaluate")
    return prediction_set_from_probs32(cols["probs"][ok], gt[ok]), cols, meta


def evaluate_predictions(preds: PredictionSet, bins: int = DEFAULT_BINS, meta: dict | None = None) -> dict:
    """Six-metric JSON payload (with optional run metadata under ``meta``)."""
    payload = all_metrics(preds, bins)
    payload["meta"] = {"n": len(preds), "bins": bins, **(meta or {})}
    return payload


def reliability_tables(preds: PredictionSet, bins: int = DEFAULT_BINS) -> dict:
    return {
        "none": reliability_table(preds, bins, "none"),
        "gt-class": reliability_table(preds, bins, "gt-class"),
    }
