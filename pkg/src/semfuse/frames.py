"""Posed-frame data model, pinhole projection, and scene directory I/O.

A scene lives in a directory::

    scene.meta                 key=value text (intrinsics, class count, ...)
    frames/NNNNNN.pose.txt     16 ASCII floats, row-major 4x4 camera-to-world
    frames/NNNNNN.depth.f32    H*W float32 meters, row-major, little-endian
    frames/NNNNNN.logits.f32   H*W*K float32, class index fastest-varying
    frames/NNNNNN.labels.u16   optional H*W uint16 ground-truth class ids
    frames/NNNNNN.color.rgb8   optional H*W*3 bytes

Poses are camera-to-world; the camera looks along +z with x right and
y down, so ``u = fx*x/z + cx`` and ``v = fy*y/z + cy``. Pixel lookup is
nearest-neighbor. Invalid depth is encoded as 0.0 (any non-finite or
non-positive value is skipped during integration).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingFileError, SceneFormatError, ShapeMismatchError
from .mathutil import rigid_inverse

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneFormatError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise SceneFormatError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )


@dataclass
class Frame:
    """One posed observation: depth, per-pixel class logits, optional extras.

    ``pose`` is the 4x4 camera-to-world transform; its rotation block must be
    orthonormal within 1e-6. ``depth`` is H x W metric meters, ``logits`` is
    H x W x K raw segmentation scores, ``gt_labels`` (optional) is H x W class
    ids in [0, K).
    """

    index: int
    pose: np.ndarray
    depth: np.ndarray
    logits: np.ndarray
    gt_labels: np.ndarray | None = None
    color: np.ndarray | None = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise SceneFormatError(f"frame {self.index}: pose must be 4x4, got {self.pose.shape}")
        r = self.pose[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise SceneFormatError(f"frame {self.index}: pose rotation is not orthonormal")
        if not np.allclose(self.pose[3], [0.0, 0.0, 0.0, 1.0], atol=_ORTHO_TOL):
            raise SceneFormatError(f"frame {self.index}: pose last row must be 0 0 0 1")
        if self.depth.ndim != 2:
            raise SceneFormatError(f"frame {self.index}: depth must be 2-D")
        if self.logits.ndim != 3 or self.logits.shape[:2] != self.depth.shape:
            raise ShapeMismatchError(
                f"frame {self.index}: logits shape {self.logits.shape} does not match depth {self.depth.shape}"
            )
        if self.logits.shape[2] < 2:
            raise SceneFormatError(f"frame {self.index}: need at least 2 classes, got {self.logits.shape[2]}")
        if self.gt_labels is not None and self.gt_labels.shape != self.depth.shape:
            raise ShapeMismatchError(
                f"frame {self.index}: gt_labels shape {self.gt_labels.shape} does not match depth {self.depth.shape}"
            )

    @property
    def class_count(self) -> int:
        return self.logits.shape[2]

    @property
    def pose_inverse(self) -> np.ndarray:
        """World-to-camera transform."""
        return rigid_inverse(self.pose)


@dataclass
class Scene:
    """An ordered list of frames plus shared intrinsics and grid metadata."""

    intrinsics: Intrinsics
    frames: list[Frame]
    class_count: int
    voxel_size: float
    class_names: list[str] | None = None
    bounds_min: np.ndarray | None = None
    bounds_max: np.ndarray | None = None

    def __post_init__(self):
        if not self.frames:
            raise SceneFormatError("scene has no frames")
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise SceneFormatError("frame indices must be strictly increasing")
        for f in self.frames:
            if f.depth.shape != (self.intrinsics.height, self.intrinsics.width):
                raise ShapeMismatchError(
                    f"frame {f.index}: depth {f.depth.shape} does not match intrinsics "
                    f"({self.intrinsics.height}, {self.intrinsics.width})"
                )
            if f.class_count != self.class_count:
                raise SceneFormatError(
                    f"frame {f.index}: class count {f.class_count} differs from scene class count {self.class_count}"
                )

    @property
    def has_gt(self) -> bool:
        return all(f.gt_labels is not None for f in self.frames)


def project_point(p, pose: np.ndarray, intr: Intrinsics):
    """Project a world point into a camera.

    Returns ``(u, v, z)`` with continuous pixel coordinates and camera-frame
    depth, or ``None`` when the point is behind the camera or its
    nearest-neighbor pixel falls outside the image.
    """
    inv = rigid_inverse(np.asarray(pose, dtype=np.float64))
    pc = inv[:3, :3] @ np.asarray(p, dtype=np.float64) + inv[:3, 3]
    x, y, z = pc
    if z <= 0:
        return None
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    ui = int(np.rint(u))
    vi = int(np.rint(v))
    if ui < 0 or ui >= intr.width or vi < 0 or vi >= intr.height:
        return None
    return (u, v, z)


def backproject_pixel(u: float, v: float, z: float, pose: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Lift pixel coordinates and camera depth back to a world point."""
    pc = np.array([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)
    return pose[:3, :3] @ pc + pose[:3, 3]


# ---------------------------------------------------------------------------
# scene directory I/O
# ---------------------------------------------------------------------------


def _frame_path(root: str, index: int, suffix: str) -> str:
    return os.path.join(root, "frames", f"{index:06d}.{suffix}")


def _read_exact(path: str, dtype, count: int, what: str) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFileError(f"missing {what} file: {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise ShapeMismatchError(f"{path}: expected {count} values, found {data.size}")
    return data


def save_scene(scene: Scene, path: str) -> None:
    """Write a scene directory (see module docstring for the layout)."""
    os.makedirs(os.path.join(path, "frames"), exist_ok=True)
    intr = scene.intrinsics
    lines = [
        f"voxel_size={scene.voxel_size!r}",
        f"class_count={scene.class_count}",
        f"width={intr.width}",
        f"height={intr.height}",
        f"fx={intr.fx!r}",
        f"fy={intr.fy!r}",
        f"cx={intr.cx!r}",
        f"cy={intr.cy!r}",
    ]
    if scene.class_names is not None:
        lines.append("class_names=" + ",".join(scene.class_names))
    if scene.bounds_min is not None and scene.bounds_max is not None:
        lines.append("bounds_min=" + " ".join(repr(float(v)) for v in scene.bounds_min))
        lines.append("bounds_max=" + " ".join(repr(float(v)) for v in scene.bounds_max))
    with open(os.path.join(path, "scene.meta"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    for f in scene.frames:
        with open(_frame_path(path, f.index, "pose.txt"), "w") as fh:
            fh.write(" ".join(f"{v:.17g}" for v in f.pose.reshape(-1)) + "\n")
        f.depth.astype("<f4").tofile(_frame_path(path, f.index, "depth.f32"))
        f.logits.astype("<f4").tofile(_frame_path(path, f.index, "logits.f32"))
        if f.gt_labels is not None:
            f.gt_labels.astype("<u2").tofile(_frame_path(path, f.index, "labels.u16"))
        if f.color is not None:
            f.color.astype(np.uint8).tofile(_frame_path(path, f.index, "color.rgb8"))


def load_scene(path: str) -> Scene:
    """Load a scene directory, validating shapes against the metadata."""
    meta_path = os.path.join(path, "scene.meta")
    if not os.path.exists(meta_path):
        raise MissingFileError(f"missing scene.meta in {path}")
    meta: dict[str, str] = {}
    with open(meta_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SceneFormatError(f"{meta_path}: bad line {line!r}")
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    try:
        intr = Intrinsics(
            fx=float(meta["fx"]),
            fy=float(meta["fy"]),
            cx=float(meta["cx"]),
            cy=float(meta["cy"]),
            width=int(meta["width"]),
            height=int(meta["height"]),
        )
        voxel_size = float(meta["voxel_size"])
        class_count = int(meta["class_count"])
    except KeyError as exc:
        raise SceneFormatError(f"{meta_path}: missing key {exc}") from None
    class_names = meta["class_names"].split(",") if "class_names" in meta else None
    bounds_min = bounds_max = None
    if "bounds_min" in meta and "bounds_max" in meta:
        bounds_min = np.array([float(v) for v in meta["bounds_min"].split()], dtype=np.float64)
        bounds_max = np.array([float(v) for v in meta["bounds_max"].split()], dtype=np.float64)

    frames_dir = os.path.join(path, "frames")
    if not os.path.isdir(frames_dir):
        raise MissingFileError(f"missing frames directory in {path}")
    indices = sorted(
        int(name.split(".")[0]) for name in os.listdir(frames_dir) if name.endswith(".pose.txt")
    )
    if not indices:
        raise SceneFormatError(f"no frames found in {frames_dir}")

    h, w, k = intr.height, intr.width, class_count
    frames = []
    for idx in indices:
        pose_path = _frame_path(path, idx, "pose.txt")
        with open(pose_path) as fh:
            vals = fh.read().split()
        if len(vals) != 16:
            raise ShapeMismatchError(f"{pose_path}: expected 16 floats, found {len(vals)}")
        pose = np.array([float(v) for v in vals], dtype=np.float64).reshape(4, 4)
        depth = _read_exact(_frame_path(path, idx, "depth.f32"), "<f4", h * w, "depth").reshape(h, w)
        logits = _read_exact(_frame_path(path, idx, "logits.f32"), "<f4", h * w * k, "logits").reshape(h, w, k)
        labels_path = _frame_path(path, idx, "labels.u16")
        gt = None
        if os.path.exists(labels_path):
            gt = _read_exact(labels_path, "<u2", h * w, "labels").reshape(h, w)
        color_path = _frame_path(path, idx, "color.rgb8")
        color = None
        if os.path.exists(color_path):
            color = _read_exact(color_path, np.uint8, h * w * 3, "color").reshape(h, w, 3)
        frames.append(Frame(index=idx, pose=pose, depth=depth, logits=logits, gt_labels=gt, color=color))

    return Scene(
        intrinsics=intr,
        frames=frames,
        class_count=class_count,
        voxel_size=voxel_size,
        class_names=class_names,
        bounds_min=bounds_min,
        bounds_max=bounds_max,
    )
