"""Post-hoc logit calibration: temperature and vector scaling.

Scaled likelihoods are ``softmax(logits / tau)`` with a scalar temperature or
per-class positive vector. Parameters are fit by minimizing a binned
calibration metric either over pooled pixels (2-D) or over the re-fused voxel
map (3-D, which needs an observation cache so every candidate temperature can
be pushed through fusion).

The search is deterministic: a log-spaced sweep of 50 temperatures on
[0.01, 200] (the identity is always added as a candidate), then Nelder-Mead
refinement capped at 200 evaluations / 1e-4 objective improvement. Vector
mode starts from the best scalar, constrains each class temperature to within
50% of it, and seeds the simplex from a diagonal log sweep plus 30 random
in-box samples.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import Bounds, minimize

from . import glfs as glfs_mod
from .cache import ObservationCache
from .errors import ConfigError, DegenerateInputError
from .fusion import (
    DEFAULT_LAPLACE_ALPHA,
    FusionStrategy,
    WeightScheme,
    finalize_from_sums,
    laplace_smooth,
)
from .frames import Scene
from .mathutil import softmax
from .metrics import DEFAULT_BINS, PredictionSet, compute_ece, compute_mece, compute_tl_ece

log = logging.getLogger(__name__)

SWEEP_POINTS = 50
SWEEP_RANGE = (0.01, 200.0)
REFINE_MAX_EVALS = 200
REFINE_FTOL = 1e-4
VECTOR_RANDOM_SAMPLES = 30

_METRICS = {"mece": compute_mece, "ece": compute_ece, "tl-ece": compute_tl_ece, "tl_ece": compute_tl_ece}


@dataclass
class ScalingParams:
    """mode 'temp' holds a single temperature; 'vector' one per class."""

    mode: str
    tau: np.ndarray

    def __post_init__(self):
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=np.float64))
        if self.mode not in ("temp", "vector"):
            raise ConfigError(f"unknown scaling mode {self.mode!r}")
        if self.mode == "temp" and self.tau.shape != (1,):
            raise ConfigError("temperature mode takes a single tau")
        if np.any(self.tau <= 0) or not np.all(np.isfinite(self.tau)):
            raise ConfigError("tau entries must be finite and > 0")

    @classmethod
    def identity(cls) -> "ScalingParams":
        return cls("temp", np.array([1.0]))

    @property
    def scalar(self) -> float:
        return float(self.tau[0])

    def divisor(self, class_count: int) -> np.ndarray:
        if self.mode == "temp":
            return np.full(class_count, self.scalar)
        if self.tau.shape[0] != class_count:
            raise ConfigError(f"vector tau has {self.tau.shape[0]} entries for {class_count} classes")
        return self.tau

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"mode": self.mode, "tau": self.tau.tolist()}, fh)

    @classmethod
    def load(cls, path: str) -> "ScalingParams":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(payload["mode"], np.asarray(payload["tau"], dtype=np.float64))


def scale_logits(logits: np.ndarray, params: ScalingParams) -> np.ndarray:
    """Calibrated likelihoods ``softmax(logits / tau)`` (rows are samples)."""
    logits = np.asarray(logits, dtype=np.float64)
    return softmax(logits / params.divisor(logits.shape[-1]))


@dataclass
class CalibrationObjective:
    metric: str = "mece"
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ConfigError(f"unknown calibration metric {self.metric!r}")
        self.metric_fn = _METRICS[self.metric]

    def __call__(self, probs: np.ndarray, gt: np.ndarray) -> float:
        return self.metric_fn(PredictionSet(probs, gt), self.bins)


# ---------------------------------------------------------------------------
# search machinery
# ---------------------------------------------------------------------------


def _sweep_taus() -> np.ndarray:
    taus = np.geomspace(SWEEP_RANGE[0], SWEEP_RANGE[1], SWEEP_POINTS)
    return np.append(taus, 1.0)  # identity is always a candidate


def _safe(objective, tau_vec: np.ndarray) -> float:
    try:
        value = objective(tau_vec)
    except (DegenerateInputError, FloatingPointError):
        return np.inf
    return value if np.isfinite(value) else np.inf


def _refine(objective, x0_log: np.ndarray, bounds_log=None, max_evals: int = REFINE_MAX_EVALS):
    """Nelder-Mead in log-temperature space; returns the best point seen."""
    best = {"x": x0_log.copy(), "f": _safe(objective, np.exp(x0_log))}

    def fun(x):
        f = _safe(objective, np.exp(x))
        if f < best["f"]:
            best["f"] = f
            best["x"] = x.copy()
        return f

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # NM warns when maxfev stops it early
        minimize(
            fun,
            x0_log,
            method="Nelder-Mead",
            bounds=None if bounds_log is None else Bounds(bounds_log[0], bounds_log[1]),
            options={"maxfev": max_evals, "fatol": REFINE_FTOL, "xatol": 1e-3},
        )
    return np.exp(best["x"]), best["f"]


def _search_scalar(objective, max_evals: int) -> tuple[float, float]:
    taus = _sweep_taus()
    values = [_safe(objective, np.array([t])) for t in taus]
    i = int(np.argmin(values))
    tau0, f0 = taus[i], values[i]
    tau, f = _refine(objective, np.log(np.array([tau0])), max_evals=max_evals)
    return (float(tau[0]), f) if f < f0 else (float(tau0), f0)


def _search_vector(objective, class_count: int, tau0: float, seed: int, max_evals: int):
    lo, hi = 0.5 * tau0, 1.5 * tau0
    candidates = [np.full(class_count, c) for c in np.geomspace(lo, hi, SWEEP_POINTS)]
    candidates.append(np.full(class_count, tau0))
    rng = np.random.default_rng(seed)
    candidates.extend(rng.uniform(lo, hi, size=(VECTOR_RANDOM_SAMPLES, class_count)))
    values = [_safe(objective, c) for c in candidates]
    i = int(np.argmin(values))
    best_c, best_f = candidates[i], values[i]
    bounds_log = (np.full(class_count, np.log(lo)), np.full(class_count, np.log(hi)))
    tau, f = _refine(objective, np.log(best_c), bounds_log=bounds_log, max_evals=max_evals)
    return (tau, f) if f < best_f else (best_c, best_f)


# ---------------------------------------------------------------------------
# 2-D (pixel) calibration
# ---------------------------------------------------------------------------


def pooled_pixel_logits(scenes: list[Scene], stride: int = 8):
    """Subsampled pixel logits and labels pooled over scenes."""
    logit_parts, gt_parts = [], []
    for scene in scenes:
        if not scene.has_gt:
            raise DegenerateInputError("2-D calibration needs ground-truth labels on every frame")
        for frame in scene.frames:
            logit_parts.append(
                frame.logits[::stride, ::stride].reshape(-1, scene.class_count).astype(np.float64)
            )
            gt_parts.append(frame.gt_labels[::stride, ::stride].reshape(-1).astype(np.int64))
    logits = np.concatenate(logit_parts)
    gt = np.concatenate(gt_parts)
    if logits.shape[0] == 0:
        raise DegenerateInputError("no labeled pixels available")
    return logits, gt


def calibrate_2d(
    scenes: list[Scene],
    objective: CalibrationObjective | None = None,
    mode: str = "temp",
    stride: int = 8,
    seed: int = 0,
    max_evals: int = REFINE_MAX_EVALS,
) -> ScalingParams:
    """Fit scaling parameters against pooled pixel predictions."""
    objective = objective or CalibrationObjective()
    logits, gt = pooled_pixel_logits(scenes, stride)
    if np.unique(gt).size < 2:
        log.warning("2-D calibration labels contain a single class; the objective is degenerate")

    def fun(tau_vec: np.ndarray) -> float:
        return objective(softmax(logits / tau_vec), gt)

    tau0, _ = _search_scalar(fun, max_evals)
    if mode == "temp":
        return ScalingParams("temp", np.array([tau0]))
    tau, _ = _search_vector(fun, logits.shape[1], tau0, seed, max_evals)
    return ScalingParams("vector", tau)


# ---------------------------------------------------------------------------
# 3-D (fused-map) calibration
# ---------------------------------------------------------------------------


def refuse_cache(
    cache: ObservationCache,
    strategy: FusionStrategy,
    tau_vec: np.ndarray | None = None,
    scheme: WeightScheme | None = None,
    alpha: float = DEFAULT_LAPLACE_ALPHA,
    glfs_params=None,
) -> np.ndarray:
    """Re-fuse every cached voxel under a candidate temperature vector."""
    strategy = FusionStrategy(strategy)
    if glfs_params is not None and strategy is FusionStrategy.GLFS:
        scaled_params = glfs_params
        if tau_vec is not None:
            # candidate scaling composes with the model's own temperatures
            scaled_params = glfs_mod.GLFSParams(
                tau=glfs_params.tau * tau_vec,
                gate_g=glfs_params.gate_g,
                gate_eps=glfs_params.gate_eps,
                table=glfs_params.table,
                dist_edges=glfs_params.dist_edges,
                inc_edges=glfs_params.inc_edges,
            )
        return glfs_mod.glfs_fuse_batch(cache, scaled_params, alpha)

    scheme = scheme or WeightScheme.constant()
    logits = cache.obs_logits.astype(np.float64)
    if tau_vec is not None:
        logits = logits / tau_vec
    probs = softmax(logits)
    w = scheme.weights(cache.obs_dist.astype(np.float64), cache.obs_inc.astype(np.float64))
    starts = cache.voxel_start[:-1]
    weight_sum = np.add.reduceat(w, starts)
    obs_count = cache.obs_counts
    log_sum = lin_sum = votes = None
    if strategy in (FusionStrategy.RBU, FusionStrategy.GEOMETRIC_MEAN):
        log_sum = np.add.reduceat(w[:, None] * np.log(laplace_smooth(probs, alpha)), starts, axis=0)
    elif strategy is FusionStrategy.NAIVE_AVERAGING:
        lin_sum = np.add.reduceat(w[:, None] * probs, starts, axis=0)
    elif strategy is FusionStrategy.HISTOGRAM:
        k = cache.class_count
        am = np.argmax(probs, axis=1)
        votes = np.bincount(cache.obs_voxel_row * k + am, minlength=cache.num_voxels * k).reshape(-1, k)
    else:
        raise ConfigError("glfs re-fusion needs glfs_params")
    return finalize_from_sums(
        strategy, log_sum=log_sum, lin_sum=lin_sum, votes=votes, weight_sum=weight_sum, obs_count=obs_count
    )


def calibrate_3d(
    caches: list[ObservationCache],
    strategy: FusionStrategy = FusionStrategy.RBU,
    objective: CalibrationObjective | None = None,
    mode: str = "temp",
    scheme: WeightScheme | None = None,
    alpha: float = DEFAULT_LAPLACE_ALPHA,
    glfs_params=None,
    seed: int = 0,
    max_evals: int = REFINE_MAX_EVALS,
) -> ScalingParams:
    """Fit scaling parameters against the fused voxel maps.

    Each objective evaluation re-finalizes every cached voxel under the
    candidate temperatures; with several caches the mean objective is
    minimized.
    """
    objective = objective or CalibrationObjective()
    if not caches:
        raise ConfigError("calibrate_3d needs at least one observation cache")
    for c in caches:
        if c.num_voxels == 0:
            raise DegenerateInputError("observation cache is empty")
    class_count = caches[0].class_count

    def fun(tau_vec: np.ndarray) -> float:
        vals = []
        for c in caches:
            probs = refuse_cache(c, strategy, tau_vec, scheme, alpha, glfs_params)
            vals.append(objective(probs, c.voxel_gt.astype(np.int64)))
        return float(np.mean(vals))

    tau0, _ = _search_scalar(fun, max_evals)
    if mode == "temp":
        return ScalingParams("temp", np.array([tau0]))
    tau, _ = _search_vector(fun, class_count, tau0, seed, max_evals)
    return ScalingParams("vector", tau)
