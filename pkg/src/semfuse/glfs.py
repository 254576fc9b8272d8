"""Generalized learned fusion: gated interpolation with trainable weighting.

The fused distribution of a voxel with observations ``t = 1..T`` is::

    s  =  G * geo + (1 - G) * lin
    geo ~ exp( a * sum_t w_t * ln smooth(p_t) )        (normalized)
    lin ~ sum_t w_t * p_t                              (normalized)
    a   = (1 - eps) / sum_t w_t + eps

where ``p_t = softmax(logits_t / tau)`` with a per-class temperature vector,
``w_t`` comes from a look-up table indexed by the observation's predicted
class, camera-distance bin, and incidence-angle bin, and ``G``/``eps`` are
gates in [0, 1]. Both branches are normalized before mixing so the convex
combination is a distribution. With a unit table and ``tau = 1`` the model
reduces exactly to the fixed strategies: ``(G, eps) = (1, 1)`` is the
Bayesian product, ``(1, 0)`` the geometric mean, ``(0, 0)`` the arithmetic
mean, and the histogram is the ``tau -> 0`` limit of ``(0, 0)``.

Training (gradient descent on the unconstrained parameters against
``eta * soft-binned mECE + NLL``) lives in :mod:`semfuse.glfs_train`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .cache import ObservationCache
from .errors import ConfigError, DegenerateInputError
from .fusion import DEFAULT_LAPLACE_ALPHA, laplace_smooth
from .mathutil import normalize_log_rows, normalize_rows, softmax
from .metrics import DEFAULT_BINS, PredictionSet, compute_nll

DEFAULT_DIST_BINS = 8
DEFAULT_INC_BINS = 4
DEFAULT_DIST_RANGE = 5.0  # meters; last distance bin is open-ended


def default_dist_edges(bins: int = DEFAULT_DIST_BINS, reach: float = DEFAULT_DIST_RANGE) -> np.ndarray:
    """Interior bin edges, uniform on [0, reach], last bin open."""
    return np.linspace(0.0, reach, bins + 1)[1:-1]


def default_inc_edges(bins: int = DEFAULT_INC_BINS) -> np.ndarray:
    return np.linspace(0.0, 1.0, bins + 1)[1:-1]


@dataclass
class GLFSParams:
    """Constrained parameter record: tau > 0, gates in [0, 1], table > 0."""

    tau: np.ndarray
    gate_g: float
    gate_eps: float
    table: np.ndarray  # (K, dist_bins, inc_bins)
    dist_edges: np.ndarray = field(default_factory=default_dist_edges)
    inc_edges: np.ndarray = field(default_factory=default_inc_edges)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.float64)
        self.table = np.asarray(self.table, dtype=np.float64)
        self.dist_edges = np.asarray(self.dist_edges, dtype=np.float64)
        self.inc_edges = np.asarray(self.inc_edges, dtype=np.float64)
        if np.any(self.tau <= 0) or not np.all(np.isfinite(self.tau)):
            raise ConfigError("tau entries must be finite and > 0")
        if not (0.0 <= self.gate_g <= 1.0 and 0.0 <= self.gate_eps <= 1.0):
            raise ConfigError("gates must lie in [0, 1]")
        if self.table.ndim != 3 or self.table.shape[0] != self.tau.shape[0]:
            raise ConfigError(f"table shape {self.table.shape} inconsistent with K={self.tau.shape[0]}")
        if np.any(self.table <= 0):
            raise ConfigError("table entries must be > 0")
        if self.dist_edges.shape[0] != self.table.shape[1] - 1:
            raise ConfigError("dist_edges inconsistent with table distance bins")
        if self.inc_edges.shape[0] != self.table.shape[2] - 1:
            raise ConfigError("inc_edges inconsistent with table incidence bins")

    @property
    def class_count(self) -> int:
        return self.tau.shape[0]

    @classmethod
    def strategy_equivalent(
        cls,
        strategy: str,
        class_count: int,
        dist_bins: int = DEFAULT_DIST_BINS,
        inc_bins: int = DEFAULT_INC_BINS,
        hist_tau: float = 1e-3,
    ) -> "GLFSParams":
        """Exact parameter settings reproducing a fixed strategy."""
        gates = {"rbu": (1.0, 1.0), "geomean": (1.0, 0.0), "avg": (0.0, 0.0), "hist": (0.0, 0.0)}
        if strategy not in gates:
            raise ConfigError(f"no gate equivalent for strategy {strategy!r}")
        g, eps = gates[strategy]
        tau = np.full(class_count, hist_tau if strategy == "hist" else 1.0)
        return cls(
            tau=tau,
            gate_g=g,
            gate_eps=eps,
            table=np.ones((class_count, dist_bins, inc_bins)),
            dist_edges=default_dist_edges(dist_bins),
            inc_edges=default_inc_edges(inc_bins),
        )

    @classmethod
    def trainable_init(
        cls,
        class_count: int,
        dist_bins: int = DEFAULT_DIST_BINS,
        inc_bins: int = DEFAULT_INC_BINS,
        gate: float = 0.98,
    ) -> "GLFSParams":
        """Near-product initialization with gates strictly inside (0, 1) so the
        unconstrained parameterization stays finite for training."""
        return cls(
            tau=np.ones(class_count),
            gate_g=gate,
            gate_eps=gate,
            table=np.ones((class_count, dist_bins, inc_bins)),
            dist_edges=default_dist_edges(dist_bins),
            inc_edges=default_inc_edges(inc_bins),
        )

    def save(self, path: str) -> None:
        payload = {
            "tau": self.tau.tolist(),
            "gate_g": self.gate_g,
            "gate_eps": self.gate_eps,
            "table_shape": list(self.table.shape),
            "table": self.table.reshape(-1).tolist(),
            "dist_edges": self.dist_edges.tolist(),
            "inc_edges": self.inc_edges.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str) -> "GLFSParams":
        with open(path) as fh:
            payload = json.load(fh)
        table = np.asarray(payload["table"], dtype=np.float64).reshape(payload["table_shape"])
        return cls(
            tau=np.asarray(payload["tau"], dtype=np.float64),
            gate_g=float(payload["gate_g"]),
            gate_eps=float(payload["gate_eps"]),
            table=table,
            dist_edges=np.asarray(payload["dist_edges"], dtype=np.float64),
            inc_edges=np.asarray(payload["inc_edges"], dtype=np.float64),
        )


def table_bins(params: GLFSParams, dist: np.ndarray, inc: np.ndarray):
    db = np.searchsorted(params.dist_edges, np.asarray(dist, dtype=np.float64), side="right")
    ab = np.searchsorted(params.inc_edges, np.asarray(inc, dtype=np.float64), side="right")
    ab = np.minimum(ab, params.table.shape[2] - 1)  # incidence of exactly 1.0
    return db, ab


def lookup_weights(params: GLFSParams, pred: np.ndarray, dist: np.ndarray, inc: np.ndarray) -> np.ndarray:
    """Per-observation weights from the learned table."""
    db, ab = table_bins(params, dist, inc)
    return params.table[pred, db, ab]


def glfs_fuse(
    logits: np.ndarray,
    dist: np.ndarray,
    inc: np.ndarray,
    params: GLFSParams,
    alpha: float = DEFAULT_LAPLACE_ALPHA,
) -> np.ndarray:
    """Fuse one voxel's observations (rows of ``logits``) into a distribution."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise DegenerateInputError("glfs_fuse needs a non-empty (T, K) observation stack")
    p = softmax(logits / params.tau)
    pred = np.argmax(p, axis=1)
    w = lookup_weights(params, pred, dist, inc)
    wsum = w.sum()
    gate = (1.0 - params.gate_eps) / wsum + params.gate_eps
    geo = normalize_log_rows(gate * np.sum(w[:, None] * np.log(laplace_smooth(p, alpha)), axis=0))
    lin = normalize_rows(np.sum(w[:, None] * p, axis=0))
    return params.gate_g * geo + (1.0 - params.gate_g) * lin


def glfs_fuse_batch(cache: ObservationCache, params: GLFSParams, alpha: float = DEFAULT_LAPLACE_ALPHA) -> np.ndarray:
    """Vectorized :func:`glfs_fuse` over every voxel of a cache."""
    if cache.num_voxels == 0:
        raise DegenerateInputError("empty observation cache")
    logits = cache.obs_logits.astype(np.float64)
    p = softmax(logits / params.tau)
    pred = np.argmax(p, axis=1)
    w = lookup_weights(params, pred, cache.obs_dist, cache.obs_inc)
    starts = cache.voxel_start[:-1]
    wsum = np.add.reduceat(w, starts)
    gate = (1.0 - params.gate_eps) / wsum + params.gate_eps
    log_sum = np.add.reduceat(w[:, None] * np.log(laplace_smooth(p, alpha)), starts, axis=0)
    lin_sum = np.add.reduceat(w[:, None] * p, starts, axis=0)
    geo = normalize_log_rows(gate[:, None] * log_sum)
    lin = normalize_rows(lin_sum)
    return params.gate_g * geo + (1.0 - params.gate_g) * lin


# ---------------------------------------------------------------------------
# differentiable calibration surrogate and training loss (reference values)
# ---------------------------------------------------------------------------


def soft_bin_memberships(conf: np.ndarray, bins: int, sharpness: float) -> np.ndarray:
    """Smooth bin memberships: sigmoid bumps between consecutive edges,
    normalized per sample. Converges to hard binning as sharpness -> 0."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    z0 = expit((conf[:, None] - edges[None, :-1]) / sharpness)
    z1 = expit((conf[:, None] - edges[None, 1:]) / sharpness)
    mu = z0 - z1
    return mu / (mu.sum(axis=1, keepdims=True) + 1e-12)


def compute_mdece(preds: PredictionSet, bins: int = DEFAULT_BINS, sharpness: float = 0.02) -> float:
    """Soft-binned analogue of the class-conditioned calibration error.

    Correctness is a constant per sample; only bin memberships are smoothed.
    """
    if sharpness <= 0:
        raise ConfigError(f"sharpness must be > 0, got {sharpness}")
    mu = soft_bin_memberships(preds.conf, bins, sharpness)
    per_class = []
    for k in np.unique(preds.gt):
        rows = preds.gt == k
        mu_k = mu[rows]
        cnt = mu_k.sum(axis=0)
        n_k = cnt.sum()
        conf_b = (mu_k * preds.conf[rows, None]).sum(axis=0) / (cnt + 1e-12)
        acc_b = (mu_k * preds.correct[rows, None]).sum(axis=0) / (cnt + 1e-12)
        per_class.append(np.sum(cnt / n_k * np.abs(acc_b - conf_b)))
    if not per_class:
        raise DegenerateInputError("no labeled samples for mDECE")
    return float(np.mean(per_class))


@dataclass
class TrainerConfig:
    """Knobs for GLFS training; defaults favor determinism over speed."""

    eta: float = 1.0
    bins: int = DEFAULT_BINS
    sharpness: float = 0.02
    lr: float = 0.05
    epochs: int = 200
    batch_size: int = 4096
    seed: int = 0
    max_cache_voxels: int = 500_000
    alpha: float = DEFAULT_LAPLACE_ALPHA

    def __post_init__(self):
        if self.eta < 0 or self.sharpness <= 0 or self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("trainer config values out of range")


def glfs_loss(cache: ObservationCache, params: GLFSParams, config: TrainerConfig) -> float:
    """Reference loss value: eta * mDECE + NLL of the fused predictions."""
    probs = glfs_fuse_batch(cache, params, config.alpha)
    preds = PredictionSet(probs, cache.voxel_gt.astype(np.int64))
    nll = compute_nll(preds)
    if config.eta == 0:
        return nll
    return float(config.eta * compute_mdece(preds, config.bins, config.sharpness) + nll)
