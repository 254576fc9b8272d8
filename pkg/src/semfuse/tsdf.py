"""Metric reconstruction: dense TSDF voxel grid and depth-frame integration.

The grid is a dense, preallocated structure-of-arrays over a bounded volume
(desk-scale synthetic scenes fit in memory, so no voxel hashing). Voxels are
addressed by a linear index ``(ix * dims[1] + iy) * dims[2] + iz``.

Per frame, integration runs in two passes so results never depend on voxel
ordering: a read-only projection pass computes the signed-distance update,
fusing weight and viewing geometry for every voxel, then an update pass
applies the incremental weighted average. The signed distance of an
observation is ``observed pixel depth - projected voxel depth``; observations
more than one truncation behind the surface are skipped (occluded space) and
positive distances are clamped to the truncation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, SceneFormatError, ShapeMismatchError
from .frames import Frame, Intrinsics, Scene
from .fusion import WeightScheme
from .mathutil import rigid_inverse

DEFAULT_TRUNCATION_FACTOR = 4.0


@dataclass
class Voxel:
    """Read-only snapshot of one voxel's state (testing/inspection helper)."""

    sdf: float
    weight: float
    gt_label: int
    color: np.ndarray | None = None


class VoxelGrid:
    """Dense voxel grid holding TSDF state and ground-truth labels."""

    def __init__(self, origin, dims, voxel_size: float, truncation: float | None = None):
        if voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
        truncation = DEFAULT_TRUNCATION_FACTOR * voxel_size if truncation is None else truncation
        if truncation < voxel_size:
            raise ConfigError(f"truncation {truncation} must be >= voxel_size {voxel_size}")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"grid dims must be >= 1, got {self.dims}")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        n = self.num_voxels
        self.sdf = np.zeros(n, dtype=np.float32)
        self.weight = np.zeros(n, dtype=np.float32)
        self.gt_label = np.full(n, -1, dtype=np.int32)
        self.gt_votes: np.ndarray | None = None
        self.color: np.ndarray | None = None
        self._scratch: dict[str, np.ndarray] | None = None

    @classmethod
    def from_bounds(cls, bounds_min, bounds_max, voxel_size, truncation=None) -> "VoxelGrid":
        bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        if np.any(bounds_max <= bounds_min):
            raise ConfigError(f"empty bounds {bounds_min} .. {bounds_max}")
        dims = np.maximum(np.ceil((bounds_max - bounds_min) / voxel_size - 1e-9), 1).astype(int)
        return cls(bounds_min, dims, voxel_size, truncation)

    @classmethod
    def from_scene(cls, scene: Scene, truncation_factor: float = DEFAULT_TRUNCATION_FACTOR) -> "VoxelGrid":
        if scene.bounds_min is None or scene.bounds_max is None:
            raise ConfigError("scene metadata has no bounds_min/bounds_max; pass explicit bounds")
        return cls.from_bounds(
            scene.bounds_min, scene.bounds_max, scene.voxel_size, truncation_factor * scene.voxel_size
        )

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def linear_to_ijk(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        _, dy, dz = self.dims
        return np.stack([idx // (dy * dz), (idx // dz) % dy, idx % dz], axis=-1)

    def ijk_to_linear(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        _, dy, dz = self.dims
        return (ijk[..., 0] * dy + ijk[..., 1]) * dz + ijk[..., 2]

    def voxel_centers(self, idx) -> np.ndarray:
        """World coordinates of voxel centers for linear indices."""
        return self.origin + (self.linear_to_ijk(idx) + 0.5) * self.voxel_size

    def voxel(self, idx: int) -> Voxel:
        return Voxel(
            sdf=float(self.sdf[idx]),
            weight=float(self.weight[idx]),
            gt_label=int(self.gt_label[idx]),
            color=None if self.color is None else self.color[idx].copy(),
        )

    def scratch(self) -> dict[str, np.ndarray]:
        if self._scratch is None:
            n = self.num_voxels
            self._scratch = {
                "pix": np.zeros(n, dtype=np.int64),
                "delta": np.zeros(n, dtype=np.float32),
                "wvox": np.zeros(n, dtype=np.float32),
                "dist": np.zeros(n, dtype=np.float32),
                "inc": np.ones(n, dtype=np.float32),
                "flags": np.zeros(n, dtype=np.uint8),
            }
        return self._scratch


@dataclass
class FrameObservations:
    """Scratch results of projecting one frame onto the grid.

    ``flags`` bit 0 marks voxels receiving a TSDF update; bit 1 marks voxels
    inside the truncation band (these receive semantic observations). Arrays
    are views into grid scratch space and are overwritten by the next pass.
    """

    frame: Frame
    pix: np.ndarray
    delta: np.ndarray
    wvox: np.ndarray
    dist: np.ndarray
    inc: np.ndarray
    flags: np.ndarray

    @property
    def update_mask(self) -> np.ndarray:
        return (self.flags & 1).astype(bool)

    @property
    def band_mask(self) -> np.ndarray:
        return (self.flags & 2).astype(bool)


def _check_frame(frame: Frame, intr: Intrinsics) -> None:
    if frame.depth.shape != (intr.height, intr.width):
        raise ShapeMismatchError(
            f"frame {frame.index}: depth {frame.depth.shape} does not match intrinsics "
            f"({intr.height}, {intr.width})"
        )


def frame_observations(
    grid: VoxelGrid,
    frame: Frame,
    intr: Intrinsics,
    scheme: WeightScheme | None = None,
    need_geom: bool = False,
    backend=None,
    threads: int = 0,
) -> FrameObservations:
    """Projection pass: compute per-voxel updates for one frame (grid untouched)."""
    _check_frame(frame, intr)
    scheme = scheme or WeightScheme.constant()
    backend = backend if backend is not None else kernels.get_backend()
    s = grid.scratch()
    depth = np.ascontiguousarray(frame.depth, dtype=np.float32)
    backend.frame_pass(
        grid.sdf,
        grid.weight,
        grid.dims,
        grid.origin,
        grid.voxel_size,
        grid.truncation,
        rigid_inverse(frame.pose),
        intr.fx,
        intr.fy,
        intr.cx,
        intr.cy,
        intr.width,
        intr.height,
        depth,
        scheme.kind_id,
        scheme.params_array(),
        bool(need_geom),
        int(threads),
        s["pix"],
        s["delta"],
        s["wvox"],
        s["dist"],
        s["inc"],
        s["flags"],
    )
    return FrameObservations(frame=frame, **s)


def apply_updates(grid: VoxelGrid, obs: FrameObservations, backend=None, threads: int = 0) -> int:
    """Update pass: fold one frame's observations into the grid. Returns the
    number of voxels updated."""
    backend = backend if backend is not None else kernels.get_backend()
    if obs.frame.color is not None:
        if grid.color is None:
            grid.color = np.zeros((grid.num_voxels, 3), dtype=np.float32)
        m = obs.update_mask
        w_old = grid.weight[m][:, None]
        wt = obs.wvox[m][:, None]
        cvals = obs.frame.color.reshape(-1, 3)[obs.pix[m]].astype(np.float32)
        grid.color[m] = (w_old * grid.color[m] + wt * cvals) / (w_old + wt)
    return int(backend.apply_tsdf(grid.sdf, grid.weight, obs.delta, obs.wvox, obs.flags, int(threads)))


def integrate_depth_frame(
    grid: VoxelGrid,
    frame: Frame,
    intr: Intrinsics,
    scheme: WeightScheme | None = None,
    backend=None,
    threads: int = 0,
) -> int:
    """Project one depth frame and apply the weighted-average TSDF update."""
    obs = frame_observations(grid, frame, intr, scheme, backend=backend, threads=threads)
    return apply_updates(grid, obs, backend=backend, threads=threads)


def extract_surface_voxels(grid: VoxelGrid, band: float | None = None) -> np.ndarray:
    """Linear indices of observed voxels with |sdf| inside the surface band,
    ascending (deterministic)."""
    band = grid.voxel_size if band is None else band
    return np.nonzero((grid.weight > 0) & (np.abs(grid.sdf) < band))[0].astype(np.int64)


def assign_ground_truth(
    grid: VoxelGrid,
    scene: Scene,
    surface_idx: np.ndarray | None = None,
    backend=None,
    threads: int = 0,
) -> int:
    """Label surface voxels by majority vote over projected ground-truth pixels.

    Uses the same per-frame visibility rule as integration. Ties break toward
    the smaller class id; voxels that never collect a vote stay unlabeled (-1).
    Returns the number of voxels labeled.
    """
    if not scene.has_gt:
        missing = [f.index for f in scene.frames if f.gt_labels is None]
        raise SceneFormatError(f"frames {missing} have no gt_labels; cannot assign ground truth")
    if surface_idx is None:
        surface_idx = extract_surface_voxels(grid)
    k = scene.class_count
    votes = np.zeros((grid.num_voxels, k), dtype=np.int32)
    is_surface = np.zeros(grid.num_voxels, dtype=bool)
    is_surface[surface_idx] = True
    for frame in scene.frames:
        obs = frame_observations(grid, frame, scene.intrinsics, backend=backend, threads=threads)
        visible = obs.update_mask & is_surface
        idx = np.nonzero(visible)[0]
        labels = frame.gt_labels.reshape(-1)[obs.pix[idx]].astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise SceneFormatError(f"frame {frame.index}: gt label outside [0, {k})")
        votes[idx, labels] += 1
    voted = votes.sum(axis=1) > 0
    grid.gt_label[:] = -1
    grid.gt_label[voted] = np.argmax(votes[voted], axis=1)
    grid.gt_votes = votes
    return int(np.count_nonzero(voted))


# ---------------------------------------------------------------------------
# voxel map export
# ---------------------------------------------------------------------------


def write_map_csv(
    path: str,
    grid: VoxelGrid,
    surface_idx: np.ndarray,
    pred_label: np.ndarray,
    confidence: np.ndarray,
    probs: np.ndarray | None = None,
    sidecar_extra: dict | None = None,
) -> None:
    """Write the surface-voxel export CSV plus its JSON metadata sidecar.

    Columns: ``ix,iy,iz,sdf,weight,gt_label,pred_label,confidence`` followed
    by per-class probabilities ``p0..p{K-1}`` (float32 precision) so every
    metric can be recomputed losslessly from the export.
    """
    ijk = grid.linear_to_ijk(surface_idx)
    k = 0 if probs is None else probs.shape[1]
    header = "ix,iy,iz,sdf,weight,gt_label,pred_label,confidence"
    if k:
        header += "," + ",".join(f"p{j}" for j in range(k))
    probs32 = None if probs is None else probs.astype(np.float32)
    conf32 = confidence.astype(np.float32)
    sdf32 = grid.sdf[surface_idx]
    w32 = grid.weight[surface_idx]
    gt = grid.gt_label[surface_idx]
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in range(surface_idx.size):
            cells = [
                str(ijk[row, 0]),
                str(ijk[row, 1]),
                str(ijk[row, 2]),
                f"{sdf32[row]:.9g}",
                f"{w32[row]:.9g}",
                str(int(gt[row])),
                str(int(pred_label[row])),
                f"{conf32[row]:.9g}",
            ]
            if k:
                cells.extend(f"{p:.9g}" for p in probs32[row])
            fh.write(",".join(cells) + "\n")
    meta = {
        "origin": [float(v) for v in grid.origin],
        "dims": list(grid.dims),
        "voxel_size": grid.voxel_size,
        "truncation": grid.truncation,
        "class_count": k,
        "num_rows": int(surface_idx.size),
    }
    if sidecar_extra:
        meta.update(sidecar_extra)
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def read_map_csv(path: str):
    """Load a voxel map export; returns ``(columns dict, sidecar dict)``."""
    if not os.path.exists(path):
        raise ConfigError(f"voxel map not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        raw = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
    if raw.size == 0:
        raw = np.zeros((0, len(header)))
    cols = {name: raw[:, i] for i, name in enumerate(header)}
    pcols = [name for name in header if name.startswith("p") and name[1:].isdigit()]
    if pcols:
        cols["probs"] = np.stack([cols[name] for name in pcols], axis=1).astype(np.float32)
    meta = {}
    meta_path = path + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    return cols, meta
