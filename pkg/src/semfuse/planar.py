"""Top-down projection of the labeled map and goal-mask filtering.

Voxels inside a height band are binned by their (x, y) cell under their
predicted class; a cell's confidence for class l is the mean confidence of
its class-l voxels. Goal masks are cleaned by keeping only the largest
4-connected component (ties go to the component whose top-left-most cell
comes first in row-major order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_HEIGHT_BAND = (0.1, 2.0)

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int64)


@dataclass
class PlanarMap:
    cell_size: float
    origin_xy: np.ndarray
    class_conf: np.ndarray  # (nx, ny, K) mean confidence per class
    class_count_map: np.ndarray  # (nx, ny, K) contributing voxels per class
    top_label: np.ndarray  # (nx, ny), -1 where no voxel contributed
    top_conf: np.ndarray

    @property
    def shape(self):
        return self.top_label.shape

    def known_mask(self) -> np.ndarray:
        return self.top_label >= 0

    def goal_mask(self, goal_class: int, threshold: float = 0.0) -> np.ndarray:
        return (self.top_label == goal_class) & (self.top_conf >= threshold)


def project_to_planar_map(
    positions: np.ndarray,
    pred_label: np.ndarray,
    confidence: np.ndarray,
    class_count: int,
    cell_size: float,
    height_band: tuple[float, float] = DEFAULT_HEIGHT_BAND,
    origin_xy: np.ndarray | None = None,
) -> PlanarMap:
    """Bin labeled voxel centers into a 2-D per-class confidence map."""
    positions = np.asarray(positions, dtype=np.float64)
    keep = (positions[:, 2] >= height_band[0]) & (positions[:, 2] <= height_band[1])
    xy = positions[keep, :2]
    pred = np.asarray(pred_label)[keep].astype(np.int64)
    conf = np.asarray(confidence)[keep].astype(np.float64)

    if origin_xy is None:
        origin_xy = np.floor((xy.min(axis=0) if xy.size else np.zeros(2)) / cell_size) * cell_size
    origin_xy = np.asarray(origin_xy, dtype=np.float64)
    cells = np.floor((xy - origin_xy) / cell_size).astype(np.int64) if xy.size else np.zeros((0, 2), np.int64)
    if cells.size:
        nx = int(cells[:, 0].max()) + 1
        ny = int(cells[:, 1].max()) + 1
    else:
        nx = ny = 1

    flat = (cells[:, 0] * ny + cells[:, 1]) * class_count + pred if cells.size else np.zeros(0, np.int64)
    total = nx * ny * class_count
    counts = np.bincount(flat, minlength=total).reshape(nx, ny, class_count)
    sums = np.bincount(flat, weights=conf, minlength=total).reshape(nx, ny, class_count)
    mean = np.zeros_like(sums)
    nz = counts > 0
    mean[nz] = sums[nz] / counts[nz]

    top = np.where(counts.sum(axis=2) > 0, np.argmax(mean, axis=2), -1).astype(np.int32)
    top_conf = np.take_along_axis(mean, np.maximum(top, 0)[..., None], axis=2)[..., 0]
    top_conf = np.where(top >= 0, top_conf, 0.0)
    return PlanarMap(
        cell_size=cell_size,
        origin_xy=origin_xy,
        class_conf=mean,
        class_count_map=counts,
        top_label=top,
        top_conf=top_conf,
    )


def largest_connected_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected True region of a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    labeled, n = ndimage.label(mask, structure=_CROSS)
    sizes = np.bincount(labeled.reshape(-1), minlength=n + 1)
    sizes[0] = 0
    largest = sizes.max()
    candidates = set(np.nonzero(sizes == largest)[0].tolist())
    flat = labeled.reshape(-1)
    # row-major first occurrence resolves ties toward the top-left origin
    first = next(int(lab) for lab in flat if lab in candidates)
    return labeled == first


def write_planar_csv(pm: PlanarMap, path: str) -> None:
    """Cells as ``x,y,class,confidence`` rows (cell centers, populated classes)."""
    nx, ny, k = pm.class_conf.shape
    with open(path, "w") as fh:
        fh.write("x,y,class,confidence\n")
        for ix in range(nx):
            for iy in range(ny):
                for c in range(k):
                    if pm.class_count_map[ix, iy, c] > 0:
                        x = pm.origin_xy[0] + (ix + 0.5) * pm.cell_size
                        y = pm.origin_xy[1] + (iy + 0.5) * pm.cell_size
                        fh.write(f"{x:.6g},{y:.6g},{c},{pm.class_conf[ix, iy, c]:.9g}\n")


def write_pgm(labels: np.ndarray, path: str, max_label: int | None = None) -> None:
    """Grayscale PGM of a label image (-1 renders black)."""
    labels = np.asarray(labels)
    max_label = int(labels.max()) if max_label is None else max_label
    span = max(max_label, 1)
    gray = np.where(labels >= 0, 55 + (labels.astype(np.float64) / span) * 200, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())
