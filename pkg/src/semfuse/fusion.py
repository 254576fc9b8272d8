"""Per-voxel semantic accumulation and the fixed fusion strategies.

Five strategies share one accumulator layout of commutative running sums, so
fusion is order-invariant and constant-memory per voxel:

* ``rbu``      product of per-view likelihoods (log-space, Laplace-smoothed),
               normalized at finalize.
* ``hist``     one vote per view for the argmax class; finalize divides by
               the view count (per-view weights are ignored by design).
* ``avg``      weighted arithmetic mean of likelihoods.
* ``geomean``  weighted geometric mean (same log sum as ``rbu``, divided by
               the total weight before normalizing).
* ``glfs``     gated interpolation of the geometric and arithmetic branches;
               the gates and per-view weights come from trained parameters
               (see :mod:`semfuse.glfs`).

``SemanticAccumulator`` is the scalar reference implementation;
``GridAccumulator`` is the vectorized equivalent used by the pipeline, backed
by the kernel backends. A test pins them against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateInputError
from .mathutil import normalize_log_rows, normalize_rows

DEFAULT_LAPLACE_ALPHA = 1e-3


class FusionStrategy(str, Enum):
    RBU = "rbu"
    HISTOGRAM = "hist"
    NAIVE_AVERAGING = "avg"
    GEOMETRIC_MEAN = "geomean"
    GLFS = "glfs"


def laplace_smooth(s: np.ndarray, alpha: float) -> np.ndarray:
    """Mix a distribution with uniform mass: ``(s + alpha) / (1 + K*alpha)``.

    Keeps log-space fusion away from zeros. Accepts batched rows.
    """
    if alpha <= 0:
        raise ConfigError(f"laplace alpha must be > 0, got {alpha}")
    s = np.asarray(s, dtype=np.float64)
    k = s.shape[-1]
    return (s + alpha) / (1.0 + k * alpha)


def check_distribution(s: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Validate that rows are probability vectors (sum within ``tol`` of 1)."""
    s = np.asarray(s, dtype=np.float64)
    sums = np.sum(s, axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(s < 0):
        raise DegenerateInputError("class distribution rows must be nonnegative and sum to 1")
    return s


@dataclass
class ObservationRecord:
    """Raw per-view evidence for one voxel: segmentation logits plus the
    viewing geometry features used by weight schemes and the learned table."""

    logits: np.ndarray
    distance: float
    incidence_cos: float
    frame_index: int


@dataclass
class WeightScheme:
    """Per-view fusing weight rule; emitted weights are always in (0, 1]."""

    kind: str = "const"
    floor: float = 0.05
    d_ref: float = 1.0
    d_opt: float = 1.5
    radius: float = 2.0

    _KIND_IDS = {
        "const": kernels.SCHEME_CONSTANT,
        "normal-dist": kernels.SCHEME_NORMAL_DISTANCE,
        "quad-dist": kernels.SCHEME_QUADRATIC_DISTANCE,
    }

    def __post_init__(self):
        if self.kind not in self._KIND_IDS:
            raise ConfigError(f"unknown weight scheme {self.kind!r}; expected one of {sorted(self._KIND_IDS)}")

    @classmethod
    def constant(cls) -> "WeightScheme":
        return cls("const")

    @classmethod
    def normal_distance(cls, floor: float = 0.05, d_ref: float = 1.0) -> "WeightScheme":
        return cls("normal-dist", floor=floor, d_ref=d_ref)

    @classmethod
    def quadratic_distance(cls, floor: float = 0.05, d_opt: float = 1.5, radius: float = 2.0) -> "WeightScheme":
        return cls("quad-dist", floor=floor, d_opt=d_opt, radius=radius)

    @property
    def kind_id(self) -> int:
        return self._KIND_IDS[self.kind]

    def params_array(self) -> np.ndarray:
        if self.kind == "quad-dist":
            return np.array([self.floor, self.d_opt, self.radius], dtype=np.float64)
        return np.array([self.floor, self.d_ref, 0.0], dtype=np.float64)

    def weights(self, distance, incidence_cos) -> np.ndarray:
        """Vectorized weight evaluation on distance / incidence arrays."""
        distance = np.asarray(distance, dtype=np.float64)
        incidence_cos = np.asarray(incidence_cos, dtype=np.float64)
        if self.kind == "const":
            return np.ones_like(distance)
        if self.kind == "normal-dist":
            return np.maximum(incidence_cos, self.floor) * (self.d_ref / np.maximum(distance, self.d_ref))
        q = (distance - self.d_opt) / self.radius
        return np.maximum(self.floor, 1.0 - q * q)


def sample_weight(rec: ObservationRecord, scheme: WeightScheme) -> float:
    """Fusing weight of one observation under a scheme; always in (0, 1]."""
    return float(scheme.weights(rec.distance, rec.incidence_cos))


@dataclass
class SemanticAccumulator:
    """Scalar reference accumulator for one voxel.

    Only the running sums of the active strategy are meaningful; the raw
    observation list is kept only when ``caching`` is on.
    """

    strategy: FusionStrategy
    class_count: int
    alpha: float = DEFAULT_LAPLACE_ALPHA
    caching: bool = False
    glfs_gates: tuple[float, float] | None = None  # (G, epsilon) for finalize
    log_sum: np.ndarray = field(init=False)
    lin_sum: np.ndarray = field(init=False)
    votes: np.ndarray = field(init=False)
    weight_sum: float = field(init=False, default=0.0)
    obs_count: int = field(init=False, default=0)
    cache: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.strategy = FusionStrategy(self.strategy)
        k = self.class_count
        self.log_sum = np.zeros(k, dtype=np.float64)
        self.lin_sum = np.zeros(k, dtype=np.float64)
        self.votes = np.zeros(k, dtype=np.int64)

    def observe(self, s_t, w_t: float = 1.0, record: ObservationRecord | None = None) -> None:
        """Fold one per-view class distribution into the running sums."""
        s = check_distribution(s_t)
        if w_t <= 0:
            raise ConfigError(f"observation weight must be > 0, got {w_t}")
        strat = self.strategy
        if strat in (FusionStrategy.RBU, FusionStrategy.GEOMETRIC_MEAN, FusionStrategy.GLFS):
            self.log_sum += w_t * np.log(laplace_smooth(s, self.alpha))
        if strat in (FusionStrategy.NAIVE_AVERAGING, FusionStrategy.GLFS):
            self.lin_sum += w_t * s
        if strat is FusionStrategy.HISTOGRAM:
            self.votes[int(np.argmax(s))] += 1
        self.weight_sum += w_t
        self.obs_count += 1
        if self.caching:
            self.cache.append(record)

    def finalize(self) -> np.ndarray:
        """Normalized fused class distribution for this voxel."""
        if self.obs_count == 0:
            raise DegenerateInputError("cannot finalize an unobserved voxel")
        strat = self.strategy
        if strat is FusionStrategy.RBU:
            return normalize_log_rows(self.log_sum)
        if strat is FusionStrategy.GEOMETRIC_MEAN:
            return normalize_log_rows(self.log_sum / self.weight_sum)
        if strat is FusionStrategy.NAIVE_AVERAGING:
            return self.lin_sum / self.weight_sum
        if strat is FusionStrategy.HISTOGRAM:
            return self.votes.astype(np.float64) / self.obs_count
        g, eps = self.glfs_gates if self.glfs_gates is not None else (1.0, 1.0)
        gate = (1.0 - eps) / self.weight_sum + eps
        geo = normalize_log_rows(gate * self.log_sum)
        lin = normalize_rows(self.lin_sum)
        return g * geo + (1.0 - g) * lin


def finalize_from_sums(
    strategy: FusionStrategy,
    log_sum: np.ndarray | None = None,
    lin_sum: np.ndarray | None = None,
    votes: np.ndarray | None = None,
    weight_sum: np.ndarray | None = None,
    obs_count: np.ndarray | None = None,
    glfs_gates: tuple[float, float] | None = None,
) -> np.ndarray:
    """Fused distributions from batched running sums (rows = voxels)."""
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.RBU:
        return normalize_log_rows(log_sum)
    if strategy is FusionStrategy.GEOMETRIC_MEAN:
        return normalize_log_rows(log_sum / weight_sum[:, None])
    if strategy is FusionStrategy.NAIVE_AVERAGING:
        return lin_sum / weight_sum[:, None]
    if strategy is FusionStrategy.HISTOGRAM:
        return votes.astype(np.float64) / obs_count[:, None]
    g, eps = glfs_gates if glfs_gates is not None else (1.0, 1.0)
    gate = (1.0 - eps) / weight_sum + eps
    geo = normalize_log_rows(gate[:, None] * log_sum)
    lin = normalize_rows(lin_sum)
    return g * geo + (1.0 - g) * lin


class GridAccumulator:
    """Vectorized accumulator over every voxel of a grid."""

    def __init__(
        self,
        strategy: FusionStrategy,
        num_voxels: int,
        class_count: int,
        alpha: float = DEFAULT_LAPLACE_ALPHA,
        caching: bool = False,
        glfs_gates: tuple[float, float] | None = None,
    ):
        self.strategy = FusionStrategy(strategy)
        self.class_count = class_count
        self.alpha = alpha
        self.caching = caching
        self.glfs_gates = glfs_gates
        strat = self.strategy
        self.want_log = strat in (FusionStrategy.RBU, FusionStrategy.GEOMETRIC_MEAN, FusionStrategy.GLFS)
        self.want_lin = strat in (FusionStrategy.NAIVE_AVERAGING, FusionStrategy.GLFS)
        self.want_votes = strat is FusionStrategy.HISTOGRAM
        kshape = (num_voxels, class_count)
        self._dummy2f = np.zeros((0, 0), dtype=np.float64)
        self._dummy2i = np.zeros((0, 0), dtype=np.int32)
        self.log_sum = np.zeros(kshape, dtype=np.float64) if self.want_log else None
        self.lin_sum = np.zeros(kshape, dtype=np.float64) if self.want_lin else None
        self.votes = np.zeros(kshape, dtype=np.int32) if self.want_votes else None
        self.weight_sum = np.zeros(num_voxels, dtype=np.float64)
        self.obs_count = np.zeros(num_voxels, dtype=np.int32)
        self.cache_chunks: list[dict] = []

    def observe_frame(
        self,
        idx: np.ndarray,
        probs: np.ndarray,
        w: np.ndarray,
        cache_logits: np.ndarray | None = None,
        dist: np.ndarray | None = None,
        inc: np.ndarray | None = None,
        frame_index: int = 0,
        backend=None,
        threads: int = 0,
    ) -> None:
        """Scatter one frame's per-voxel distributions into the running sums.

        ``idx`` must not repeat within a call (one observation per voxel per
        frame), which makes the scatter parallelizable.
        """
        if idx.size == 0:
            return
        probs = np.ascontiguousarray(probs, dtype=np.float64)
        sums = probs.sum(axis=1)
        bad = np.abs(sums - 1.0) > 1e-6
        if np.any(bad):
            raise DegenerateInputError(
                f"frame {frame_index}: {int(bad.sum())} non-normalized class distributions"
            )
        if np.any(w <= 0):
            raise ConfigError("observation weights must be > 0")
        backend = backend if backend is not None else kernels.get_backend()
        backend.scatter_semantic(
            self.log_sum if self.want_log else self._dummy2f,
            self.lin_sum if self.want_lin else self._dummy2f,
            self.votes if self.want_votes else self._dummy2i,
            self.weight_sum,
            self.obs_count,
            np.ascontiguousarray(idx, dtype=np.int64),
            probs,
            np.ascontiguousarray(w, dtype=np.float64),
            self.alpha,
            self.want_log,
            self.want_lin,
            self.want_votes,
            int(threads),
        )
        if self.caching:
            if cache_logits is None:
                raise ConfigError("caching is on but no raw logits were provided")
            self.cache_chunks.append(
                {
                    "idx": np.asarray(idx, dtype=np.int64).copy(),
                    "logits": np.asarray(cache_logits, dtype=np.float32).copy(),
                    "dist": np.zeros(idx.size, dtype=np.float32) if dist is None else dist.astype(np.float32).copy(),
                    "inc": np.ones(idx.size, dtype=np.float32) if inc is None else inc.astype(np.float32).copy(),
                    "frame": np.full(idx.size, frame_index, dtype=np.int32),
                }
            )

    def finalize(self, idx: np.ndarray) -> np.ndarray:
        """Fused distributions for the requested voxels (all must be observed)."""
        idx = np.asarray(idx, dtype=np.int64)
        if np.any(self.obs_count[idx] == 0):
            raise DegenerateInputError("finalize requested for unobserved voxels")
        return finalize_from_sums(
            self.strategy,
            log_sum=None if self.log_sum is None else self.log_sum[idx],
            lin_sum=None if self.lin_sum is None else self.lin_sum[idx],
            votes=None if self.votes is None else self.votes[idx],
            weight_sum=self.weight_sum[idx],
            obs_count=self.obs_count[idx],
            glfs_gates=self.glfs_gates,
        )
