"""Synthetic labeled scenes with a controllable, miscalibrated segmenter.

Geometry is a rectangular room (interior faces are floor / wall / ceiling
surfaces) plus axis-aligned boxes, so depth images come from exact
ray-slab intersections and voxel ground truth is analytic. The emulated
segmentation model produces, per pixel, logits whose softmax is a Bayes
posterior consistent with a confusion matrix and the scene's class priors, so
it is calibrated by construction; miscalibration is then injected by exactly
the mechanisms under study:

* ``tau_star``      logits are divided by an evidence temperature
                    (< 1 sharpens, i.e. overconfident),
* ``outlier_rate``  occasional near-one-hot predictions for a random class,
* ``persistence``   the fraction of favored-class draws tied to the surface
                    location rather than redrawn per frame, creating the
                    cross-view error correlation that makes product fusion
                    double-count evidence,
* ``view_bias``     deterministic favored-class overrides when the camera
                    sits in a region or the viewing angle is grazing.

Everything is seeded; per-frame RNG streams derive from (seed, frame index)
so rendering order cannot change outputs.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .frames import Frame, Intrinsics, Scene, save_scene

GRID_PAD_VOXELS = 2  # breathing room so wall surface bands stay inside the grid


@dataclass
class Box:
    class_id: int
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        self.min_corner = np.asarray(self.min_corner, dtype=np.float64)
        self.max_corner = np.asarray(self.max_corner, dtype=np.float64)
        if np.any(self.max_corner <= self.min_corner):
            raise ConfigError(f"box has empty extent: {self.min_corner} .. {self.max_corner}")


@dataclass
class TrajectorySpec:
    kind: str = "orbit"  # orbit | random-walk
    radius: float = 1.4
    height: float = 1.9
    look_height: float = 0.7
    dwell: list = field(default_factory=list)  # (deg_start, deg_end, multiplier)
    walk_margin: float = 1.0


@dataclass
class SceneSpec:
    seed: int
    room_min: np.ndarray
    room_max: np.ndarray
    objects: list
    voxel_size: float
    intrinsics: Intrinsics
    frame_count: int
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    floor_class: int = 0
    wall_class: int = 1
    class_names: list | None = None

    def __post_init__(self):
        self.room_min = np.asarray(self.room_min, dtype=np.float64)
        self.room_max = np.asarray(self.room_max, dtype=np.float64)
        if self.frame_count < 1:
            raise ConfigError("frame_count must be >= 1")
        for box in self.objects:
            if np.any(box.min_corner < self.room_min) or np.any(box.max_corner > self.room_max):
                raise ConfigError("object extends outside the room")
        if self.class_count < 2:
            raise ConfigError("need at least 2 distinct classes")

    @property
    def class_count(self) -> int:
        ids = [self.floor_class, self.wall_class] + [b.class_id for b in self.objects]
        return max(ids) + 1

    @property
    def bounds_min(self) -> np.ndarray:
        return self.room_min - GRID_PAD_VOXELS * self.voxel_size

    @property
    def bounds_max(self) -> np.ndarray:
        return self.room_max + GRID_PAD_VOXELS * self.voxel_size


@dataclass
class ViewBias:
    """Deterministic favored-class override for matching viewpoints."""

    target_class: int
    camera_region_min: np.ndarray | None = None
    camera_region_max: np.ndarray | None = None
    incidence_below: float | None = None
    apply_to_class: int | None = None


@dataclass
class SegmenterSpec:
    """Emulated segmentation model.

    ``confusion`` rows give P(favored class = j | true class = i). When it is
    None, a prior-proportional matrix with diagonal ``diag`` is built from the
    scene's rendered class priors (off-diagonal mass lands on class j in
    proportion to its pixel frequency, the way discriminative models actually
    err), which keeps the Bayes-posterior output construction calibrated
    without starving rare classes.
    """

    confusion: np.ndarray | None = None
    diag: float = 0.8
    tau_star: float = 1.0
    outlier_rate: float = 0.0
    outlier_conf: float = 0.99
    noise_scale: float = 0.0
    persistence: float = 0.0
    persistence_cell: float = 0.15
    view_bias: ViewBias | None = None

    def __post_init__(self):
        if self.confusion is not None:
            self.confusion = np.asarray(self.confusion, dtype=np.float64)
            if self.confusion.ndim != 2 or self.confusion.shape[0] != self.confusion.shape[1]:
                raise ConfigError("confusion matrix must be square")
            if np.any(np.abs(self.confusion.sum(axis=1) - 1.0) > 1e-9) or np.any(self.confusion < 0):
                raise ConfigError("confusion rows must be nonnegative and sum to 1")
        if not (0.0 < self.diag <= 1.0):
            raise ConfigError("diag must lie in (0, 1]")
        if self.tau_star <= 0:
            raise ConfigError("tau_star must be > 0")
        if not (0.0 <= self.outlier_rate <= 1.0 and 0.0 <= self.persistence <= 1.0):
            raise ConfigError("outlier_rate and persistence must lie in [0, 1]")

    def resolve_confusion(self, priors: np.ndarray) -> np.ndarray:
        if self.confusion is not None:
            return self.confusion
        k = priors.shape[0]
        conf = np.zeros((k, k))
        for i in range(k):
            off = priors.copy()
            off[i] = 0.0
            conf[i] = (1.0 - self.diag) * off / off.sum()
            conf[i, i] = self.diag
        return conf


# ---------------------------------------------------------------------------
# camera poses
# ---------------------------------------------------------------------------


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``position`` toward ``target``
    (camera x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ConfigError("camera position and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = position
    return pose


def _orbit_angles(count: int, dwell) -> np.ndarray:
    """Frame angles on [0, 2pi); dwell regions get proportionally more frames."""
    grid = np.linspace(0.0, 2.0 * math.pi, 3600, endpoint=False)
    density = np.ones_like(grid)
    for deg0, deg1, mult in dwell or []:
        a0, a1 = math.radians(deg0), math.radians(deg1)
        in_region = (grid >= a0) & (grid < a1) if a0 <= a1 else (grid >= a0) | (grid < a1)
        density[in_region] *= mult
    cdf = np.cumsum(density)
    cdf /= cdf[-1]
    targets = (np.arange(count) + 0.5) / count
    return grid[np.searchsorted(cdf, targets)]


def trajectory_poses(spec: SceneSpec) -> list[np.ndarray]:
    traj = spec.trajectory
    center = (spec.room_min + spec.room_max) / 2.0
    target = np.array([center[0], center[1], traj.look_height])
    if traj.kind == "orbit":
        angles = _orbit_angles(spec.frame_count, traj.dwell)
        poses = []
        for a in angles:
            pos = np.array(
                [center[0] + traj.radius * math.cos(a), center[1] + traj.radius * math.sin(a), traj.height]
            )
            poses.append(look_at_pose(pos, target))
        return poses
    if traj.kind == "random-walk":
        rng = np.random.default_rng([spec.seed, 779])
        lo = spec.room_min[:2] + traj.walk_margin
        hi = spec.room_max[:2] - traj.walk_margin
        poses = []
        for _ in range(spec.frame_count):
            xy = rng.uniform(lo, hi)
            poses.append(look_at_pose(np.array([xy[0], xy[1], traj.height]), target))
        return poses
    raise ConfigError(f"unknown trajectory kind {traj.kind!r}")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderedFrame:
    depth: np.ndarray  # (H, W) float64 camera-z depth
    gt: np.ndarray  # (H, W) int32 class ids
    points: np.ndarray  # (H, W, 3) float32 surface hit points
    incidence_cos: np.ndarray  # (H, W) float64 |cos| of ray vs face normal


def render_frame(spec: SceneSpec, pose: np.ndarray, intr: Intrinsics | None = None) -> RenderedFrame:
    """Exact depth/label image via ray-slab intersection.

    Rays are parameterized so the parameter equals camera-frame z, which is
    the stored depth convention.
    """
    intr = intr or spec.intrinsics
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1)
    r = pose[:3, :3]
    origin = pose[:3, 3]
    dirs = dirs_cam @ r.T  # (H, W, 3) world directions

    eps = 1e-12
    safe = np.where(np.abs(dirs) < eps, eps, dirs)

    # room interior: the exit point of each ray is the visible surface
    t_hi = (spec.room_max - origin) / safe
    t_lo = (spec.room_min - origin) / safe
    t_face = np.where(dirs > 0, t_hi, t_lo)  # per-axis exit parameter
    exit_axis = np.argmin(t_face, axis=-1)
    t_best = np.take_along_axis(t_face, exit_axis[..., None], axis=-1)[..., 0]
    going_up = np.take_along_axis(dirs, exit_axis[..., None], axis=-1)[..., 0] > 0
    cls = np.full((h, w), spec.wall_class, dtype=np.int32)
    cls[(exit_axis == 2) & ~going_up] = spec.floor_class  # bottom face
    normal_axis = exit_axis.copy()

    # boxes: nearest entry intersection wins over the room shell
    for box in spec.objects:
        t1 = (box.min_corner - origin) / safe
        t2 = (box.max_corner - origin) / safe
        t_near_ax = np.minimum(t1, t2)
        t_far_ax = np.maximum(t1, t2)
        t_near = np.max(t_near_ax, axis=-1)
        t_far = np.min(t_far_ax, axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < t_best)
        if not np.any(hit):
            continue
        ax = np.argmax(t_near_ax, axis=-1)
        t_best = np.where(hit, t_near, t_best)
        cls = np.where(hit, np.int32(box.class_id), cls)
        normal_axis = np.where(hit, ax, normal_axis)

    points = origin + dirs * t_best[..., None]
    dir_norm = np.linalg.norm(dirs, axis=-1)
    n_comp = np.take_along_axis(np.abs(dirs), normal_axis[..., None], axis=-1)[..., 0]
    incidence = np.clip(n_comp / dir_norm, 0.0, 1.0)
    return RenderedFrame(
        depth=t_best,
        gt=cls,
        points=points.astype(np.float32),
        incidence_cos=incidence,
    )


# ---------------------------------------------------------------------------
# segmentation emulation
# ---------------------------------------------------------------------------


def _hash01(cells: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform(0,1) stream keyed by integer 3-D cells."""
    c = cells.astype(np.int64).astype(np.uint64)
    h = (
        c[..., 0] * np.uint64(73856093)
        ^ c[..., 1] * np.uint64(19349663)
        ^ c[..., 2] * np.uint64(83492791)
        ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(2654435761)
    )
    z = h + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def posterior_targets(confusion: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Row j: the Bayes posterior over true classes given the model favored
    class j, which is the calibrated output distribution for that draw."""
    post = confusion.T * priors[None, :]
    sums = post.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ConfigError("confusion/prior combination leaves a favored class with zero mass")
    return post / sums


def emulate_segmentation(
    rendered: RenderedFrame,
    seg: SegmenterSpec,
    confusion: np.ndarray,
    targets: np.ndarray,
    camera_pos: np.ndarray,
    rng: np.random.Generator,
    scene_seed: int = 0,
) -> np.ndarray:
    """Per-pixel logits for one frame (see module docstring for the knobs)."""
    gt = rendered.gt
    h, w = gt.shape
    k = confusion.shape[0]
    cum = np.cumsum(confusion, axis=1)

    u_sel = rng.random((h, w))
    u_fresh = rng.random((h, w))
    if seg.persistence > 0:
        cells = np.floor(rendered.points / seg.persistence_cell).astype(np.int64)
        u_persist = _hash01(cells, scene_seed)
        u = np.where(u_sel < seg.persistence, u_persist, u_fresh)
    else:
        u = u_fresh
    favored = np.argmax(u[..., None] < cum[gt], axis=-1)

    vb = seg.view_bias
    if vb is not None:
        mask = np.ones((h, w), dtype=bool)
        if vb.camera_region_min is not None:
            inside = bool(
                np.all(camera_pos >= np.asarray(vb.camera_region_min))
                and np.all(camera_pos <= np.asarray(vb.camera_region_max))
            )
            mask &= inside
        if vb.incidence_below is not None:
            mask &= rendered.incidence_cos < vb.incidence_below
        if vb.apply_to_class is not None:
            mask &= gt == vb.apply_to_class
        favored = np.where(mask, np.int64(vb.target_class), favored)

    logits = np.log(targets[favored])
    if seg.noise_scale > 0:
        logits = logits + seg.noise_scale * rng.standard_normal((h, w, k))
    logits = logits / seg.tau_star

    if seg.outlier_rate > 0:
        out_mask = rng.random((h, w)) < seg.outlier_rate
        out_class = rng.integers(0, k, size=(h, w))
        out_dist = np.full((h, w, k), (1.0 - seg.outlier_conf) / (k - 1))
        np.put_along_axis(out_dist, out_class[..., None], seg.outlier_conf, axis=-1)
        logits = np.where(out_mask[..., None], np.log(out_dist), logits)
    return logits.astype(np.float32)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def class_priors(rendered: list[RenderedFrame], class_count: int) -> np.ndarray:
    counts = np.zeros(class_count, dtype=np.int64)
    for rf in rendered:
        counts += np.bincount(rf.gt.reshape(-1), minlength=class_count)
    total = counts.sum()
    # unseen classes keep a tiny floor so posteriors remain defined
    priors = np.maximum(counts.astype(np.float64), 1.0)
    return priors / max(total, 1)


def generate_scene(spec: SceneSpec, seg: SegmenterSpec, out: str | None = None) -> Scene:
    """Render, emulate segmentation, and optionally write the scene directory
    plus the analytic ``gt_voxels.csv`` oracle."""
    if seg.confusion is not None and seg.confusion.shape[0] != spec.class_count:
        raise ConfigError(
            f"confusion is {seg.confusion.shape[0]}x{seg.confusion.shape[0]} but the scene has "
            f"{spec.class_count} classes"
        )
    poses = trajectory_poses(spec)
    rendered = [render_frame(spec, pose) for pose in poses]
    priors = class_priors(rendered, spec.class_count)
    confusion = seg.resolve_confusion(priors)
    targets = posterior_targets(confusion, priors)

    frames = []
    for t, (pose, rf) in enumerate(zip(poses, rendered)):
        rng = np.random.default_rng([spec.seed, t])
        logits = emulate_segmentation(rf, seg, confusion, targets, pose[:3, 3], rng, scene_seed=spec.seed)
        frames.append(
            Frame(
                index=t,
                pose=pose,
                depth=rf.depth.astype(np.float32),
                logits=logits,
                gt_labels=rf.gt.astype(np.uint16),
            )
        )
    scene = Scene(
        intrinsics=spec.intrinsics,
        frames=frames,
        class_count=spec.class_count,
        voxel_size=spec.voxel_size,
        class_names=spec.class_names,
        bounds_min=spec.bounds_min,
        bounds_max=spec.bounds_max,
    )
    if out is not None:
        save_scene(scene, out)
        write_exact_voxel_gt(spec, os.path.join(out, "gt_voxels.csv"))
    return scene


def room_surface_distance(spec: SceneSpec, points: np.ndarray):
    """Distance to the nearest room interior face and that face's class."""
    lo = points - spec.room_min
    hi = spec.room_max - points
    faces = np.concatenate([lo, hi], axis=-1)  # xlo ylo zlo xhi yhi zhi
    idx = np.argmin(np.abs(faces), axis=-1)
    dist = np.take_along_axis(np.abs(faces), idx[..., None], axis=-1)[..., 0]
    cls = np.full(points.shape[:-1], spec.wall_class, dtype=np.int32)
    cls[idx == 2] = spec.floor_class
    return dist, cls


def box_surface_distance(box: Box, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from points to the box surface."""
    center = (box.min_corner + box.max_corner) / 2.0
    half = (box.max_corner - box.min_corner) / 2.0
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return np.abs(outside + inside)


def exact_voxel_gt(spec: SceneSpec, band: float | None = None):
    """Analytic voxel labels: centers within ``band`` of a surface, labeled by
    the nearest surface (ties toward the smaller class id)."""
    band = spec.voxel_size if band is None else band
    origin = spec.bounds_min
    dims = np.maximum(np.ceil((spec.bounds_max - origin) / spec.voxel_size - 1e-9), 1).astype(int)
    axes = [origin[a] + (np.arange(dims[a]) + 0.5) * spec.voxel_size for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    dist, cls = room_surface_distance(spec, pts)
    # centers outside the room belong to the shell; distance to the room
    # boundary still applies (faces[..] negative -> abs handles it)
    for box in spec.objects:
        bd = box_surface_distance(box, pts)
        closer = bd < dist
        tie = (bd == dist) & (box.class_id < cls)
        take = closer | tie
        dist = np.where(take, bd, dist)
        cls = np.where(take, np.int32(box.class_id), cls)
        # interior voxels of a solid box are not surface band
        inside = np.all((pts > box.min_corner) & (pts < box.max_corner), axis=-1)
        interior = inside & (bd > band)
        dist = np.where(interior, np.inf, dist)
    keep = dist <= band
    idx = np.nonzero(keep)[0].astype(np.int64)
    ijk = np.stack(np.unravel_index(idx, dims), axis=1)
    return ijk, cls[keep], dims


def write_exact_voxel_gt(spec: SceneSpec, path: str) -> None:
    ijk, cls, _ = exact_voxel_gt(spec)
    with open(path, "w") as fh:
        fh.write("ix,iy,iz,class\n")
        for row in range(ijk.shape[0]):
            fh.write(f"{ijk[row, 0]},{ijk[row, 1]},{ijk[row, 2]},{cls[row]}\n")


# ---------------------------------------------------------------------------
# the standard fixture every acceptance test references
# ---------------------------------------------------------------------------


def standard_intrinsics() -> Intrinsics:
    return Intrinsics(fx=160.0, fy=160.0, cx=160.0, cy=120.0, width=320, height=240)


def standard_scene_spec(seed: int = 7, frame_count: int = 60, voxel_size: float = 0.05, dwell=None) -> SceneSpec:
    """6x4x3 m room, four classes (floor, wall, box-a, box-b), orbit camera."""
    return SceneSpec(
        seed=seed,
        room_min=[0.0, 0.0, 0.0],
        room_max=[6.0, 4.0, 3.0],
        objects=[
            Box(2, [0.8, 0.6, 0.0], [1.6, 1.4, 0.9]),
            Box(3, [4.4, 2.6, 0.0], [5.2, 3.4, 0.7]),
        ],
        voxel_size=voxel_size,
        intrinsics=standard_intrinsics(),
        frame_count=frame_count,
        trajectory=TrajectorySpec(kind="orbit", radius=1.4, height=1.9, look_height=0.7, dwell=dwell or []),
        class_names=["floor", "wall", "box-a", "box-b"],
    )


def standard_segmenter_spec(
    tau_star: float = 1.0,
    outlier_rate: float = 0.0,
    diag: float = 0.8,
    noise_scale: float = 0.35,
    persistence: float = 0.75,
    view_bias: ViewBias | None = None,
) -> SegmenterSpec:
    return SegmenterSpec(
        confusion=None,  # prior-proportional, built from the rendered priors
        diag=diag,
        tau_star=tau_star,
        outlier_rate=outlier_rate,
        outlier_conf=0.99,
        noise_scale=noise_scale,
        persistence=persistence,
        persistence_cell=0.15,
        view_bias=view_bias,
    )
