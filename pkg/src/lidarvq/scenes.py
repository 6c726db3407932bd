"""Procedural driving scenes and a simulated spinning multi-beam LiDAR.

A scene is a tilted ground plane plus a handful of car-sized oriented boxes.
Rays are cast analytically (ray/plane and slab ray/box tests) from a sensor at
the origin. Dense scans interleave extra beams between the sparse ones so the
sparse scan is an exact subset of the dense one.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class OrientedBox:
    center: tuple
    half_extents: tuple
    yaw: float

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise SceneError("box half extents must be positive")
        if not 0.0 <= self.yaw < 2 * math.pi:
            raise SceneError("yaw must lie in [0, 2*pi)")

    @property
    def half_diagonal_xy(self):
        return math.hypot(self.half_extents[0], self.half_extents[1])


@dataclass(frozen=True)
class Scene:
    ground_slope: float
    ground_z0: float
    boxes: tuple
    seed: int

    def ground_height(self, x):
        return self.ground_z0 + self.ground_slope * x


@dataclass(frozen=True)
class SceneConfig:
    roi: tuple = (0.0, 51.2, -25.6, 25.6)
    n_boxes: tuple = (3, 8)
    slope_range: tuple = (-0.05, 0.05)
    z0_range: tuple = (-1.9, -1.7)
    half_x: tuple = (0.8, 1.2)
    half_y: tuple = (1.8, 2.6)
    half_z: tuple = (0.6, 0.9)
    min_sensor_clearance: float = 2.0
    retry_budget: int = 1000

    def __post_init__(self):
        lo, hi = self.n_boxes
        if lo < 0 or hi < lo:
            raise SceneError("box-count range is empty")
        x0, x1, y0, y1 = self.roi
        if not (x1 > x0 and y1 > y0):
            raise SceneError("region of interest is degenerate")


@dataclass(frozen=True)
class BeamConfig:
    """Beam layout of a spinning LiDAR.

    Elevations are linearly spaced from ``elevation_max`` (beam 0) down to
    ``elevation_min`` unless an explicit ``elevations`` tuple (degrees) is given.
    """

    n_beams: int = 8
    elevation_min: float = -30.0
    elevation_max: float = -2.0
    azimuth_steps: int = 256
    max_range: float = 60.0
    elevations: tuple = field(default=None, compare=True)

    def __post_init__(self):
        if self.n_beams < 2:
            raise SceneError("need at least two beams")
        if not self.elevation_min < self.elevation_max:
            raise SceneError("elevation_min must be below elevation_max")
        if self.azimuth_steps < 4:
            raise SceneError("need at least four azimuth steps")
        if not self.max_range > 0:
            raise SceneError("max_range must be positive")
        if self.elevations is not None and len(self.elevations) != self.n_beams:
            raise SceneError("explicit elevations must match n_beams")

    def elevation_angles(self):
        if self.elevations is not None:
            return np.asarray(self.elevations, dtype=np.float64)
        step = (self.elevation_max - self.elevation_min) / (self.n_beams - 1)
        return np.array([self.elevation_max - i * step for i in range(self.n_beams)])


@dataclass(frozen=True)
class PairedSample:
    sparse: np.ndarray
    dense: np.ndarray


def derive_seed(master_seed, index):
    """Independent per-item seed from a master seed (stable across platforms)."""
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def random_scene(seed, cfg=SceneConfig()):
    rng = np.random.default_rng(seed)
    slope = float(rng.uniform(*cfg.slope_range))
    z0 = float(rng.uniform(*cfg.z0_range))
    n_boxes = int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    x0, x1, y0, y1 = cfg.roi

    boxes = []
    attempts = 0
    while len(boxes) < n_boxes:
        attempts += 1
        if attempts > cfg.retry_budget:
            raise SceneError("scene too dense")
        half = (
            float(rng.uniform(*cfg.half_x)),
            float(rng.uniform(*cfg.half_y)),
            float(rng.uniform(*cfg.half_z)),
        )
        cx = float(rng.uniform(x0, x1))
        cy = float(rng.uniform(y0, y1))
        yaw = float(rng.uniform(0.0, 2 * math.pi)) % (2 * math.pi)
        diag = math.hypot(half[0], half[1])
        if math.hypot(cx, cy) <= diag + cfg.min_sensor_clearance:
            continue
        if any(math.hypot(cx - b.center[0], cy - b.center[1]) <= diag + b.half_diagonal_xy for b in boxes):
            continue
        cz = z0 + slope * cx + half[2]
        boxes.append(OrientedBox((cx, cy, cz), half, yaw))
    return Scene(slope, z0, tuple(boxes), int(seed))


def _ray_directions(elevations_deg, azimuth_steps):
    # scalar libm calls keep each direction independent of the batch it is computed in
    ce = np.array([math.cos(math.radians(e)) for e in elevations_deg])
    se = np.array([math.sin(math.radians(e)) for e in elevations_deg])
    ca = np.array([math.cos(2 * math.pi * k / azimuth_steps) for k in range(azimuth_steps)])
    sa = np.array([math.sin(2 * math.pi * k / azimuth_steps) for k in range(azimuth_steps)])
    dirs = np.empty((len(ce), azimuth_steps, 3))
    dirs[:, :, 0] = ce[:, None] * ca[None, :]
    dirs[:, :, 1] = ce[:, None] * sa[None, :]
    dirs[:, :, 2] = se[:, None] * np.ones(azimuth_steps)[None, :]
    return dirs.reshape(-1, 3)


def _cast(scene, beams):
    dirs = _ray_directions(beams.elevation_angles(), beams.azimuth_steps)
    if scene.boxes:
        centers = np.array([b.center for b in scene.boxes])
        half = np.array([b.half_extents for b in scene.boxes])
        yaw = np.array([b.yaw for b in scene.boxes])
    else:
        centers = half = np.zeros((0, 3))
        yaw = np.zeros(0)
    ranges = kernels.raycast_ranges(dirs, scene.ground_z0, scene.ground_slope, centers, half, yaw, beams.max_range)
    hit = np.isfinite(ranges)
    points = ranges[hit, None] * dirs[hit]
    beam_index = np.repeat(np.arange(beams.n_beams), beams.azimuth_steps)[hit]
    return points, beam_index


def raycast(scene, beams=BeamConfig()):
    """Point cloud (N, 3) of nearest hits, ordered by beam then azimuth."""
    return _cast(scene, beams)[0]


def densify_beams(sparse_beams, densify_factor):
    """Dense beam layout whose every ``densify_factor``-th beam is a sparse beam, bit for bit."""
    if densify_factor < 2:
        raise SceneError("densify_factor must be at least 2")
    sparse = sparse_beams.elevation_angles()
    step = (sparse[0] - sparse[-1]) / (len(sparse) - 1)
    fine = step / densify_factor
    dense = [float(sparse[j // densify_factor]) - (j % densify_factor) * fine
             for j in range(len(sparse) * densify_factor)]
    return BeamConfig(
        n_beams=len(dense),
        elevation_min=min(dense),
        elevation_max=max(dense),
        azimuth_steps=sparse_beams.azimuth_steps,
        max_range=sparse_beams.max_range,
        elevations=tuple(dense),
    )


def make_pair(scene, sparse_beams=BeamConfig(), densify_factor=4):
    dense_beams = densify_beams(sparse_beams, densify_factor)
    points, beam_index = _cast(scene, dense_beams)
    sparse = points[beam_index % densify_factor == 0]
    return PairedSample(sparse=sparse, dense=points)
