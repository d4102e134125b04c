# ==============================================================================
# Synthetic watertight shapes with exact inside-outside oracles, occupancy
# probe sampling, DCP-protocol registration pairs and the three noise
# injectors (data incompleteness, point drift, data outliers).
# All randomness flows from explicit integer seeds.
# ==============================================================================

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from app.services import rigid
from app.services.cloud import KdTree, PointCloud, load_cloud, nearest_k
from app.services.errors import NoiseError, OccupancyError, ShapeSpecError

SHAPE_KINDS = ("sphere", "box", "cylinder", "torus", "union")
NOISE_KINDS = ("di", "pd", "do")
CLEAN = "clean"

UNIT_RADIUS = 0.5            # shapes are scaled into the unit cube centred at the origin
SURFACE_JITTER = 0.05        # sigma of the near-surface occupancy probes
MIN_MINORITY = 0.1
OCCUPANCY_RETRIES = 20
UNION_ROUNDS = 100


def child_seed(seed, stream):
    """Independent, reproducible seed for sub-stream `stream` of `seed`."""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


def _round_half_up(x):
    return int(np.floor(x + 0.5))


# --- solids ---

class Sphere:
    def __init__(self, radius):
        self.radius = radius

    @property
    def area(self):
        return 4.0 * np.pi * self.radius ** 2

    def bounds(self):
        return np.zeros(3), self.radius

    def sample(self, rng, n):
        v = rng.normal(size=(n, 3))
        return self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)

    def contains(self, p):
        return np.sum(p ** 2, axis=1) <= self.radius ** 2


class Box:
    def __init__(self, half_extents):
        self.half = np.asarray(half_extents, dtype=float)

    @property
    def area(self):
        a, b, c = self.half
        return 8.0 * (a * b + b * c + c * a)

    def bounds(self):
        return np.zeros(3), float(np.linalg.norm(self.half))

    def sample(self, rng, n):
        a, b, c = self.half
        face_areas = np.array([b * c, a * c, a * b])
        axes = rng.choice(3, size=n, p=face_areas / face_areas.sum())
        points = rng.uniform(-1.0, 1.0, size=(n, 3)) * self.half
        signs = rng.choice([-1.0, 1.0], size=n)
        points[np.arange(n), axes] = signs * self.half[axes]
        return points

    def contains(self, p):
        return np.all(np.abs(p) <= self.half, axis=1)


class Cylinder:
    """Axis along z, caps at z = +-half_height."""

    def __init__(self, radius, half_height):
        self.radius = radius
        self.half_height = half_height

    @property
    def area(self):
        return 4.0 * np.pi * self.radius * self.half_height + 2.0 * np.pi * self.radius ** 2

    def bounds(self):
        return np.zeros(3), float(np.hypot(self.radius, self.half_height))

    def sample(self, rng, n):
        r, h = self.radius, self.half_height
        side = rng.uniform(size=n) < (4.0 * np.pi * r * h) / self.area
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        rho = np.where(side, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(side, rng.uniform(-h, h, size=n), rng.choice([-h, h], size=n))
        return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])

    def contains(self, p):
        return (p[:, 0] ** 2 + p[:, 1] ** 2 <= self.radius ** 2) & (np.abs(p[:, 2]) <= self.half_height)


class Torus:
    """Ring in the xy-plane with major radius R and tube radius r < R."""

    def __init__(self, major, minor):
        self.major = major
        self.minor = minor

    @property
    def area(self):
        return 4.0 * np.pi ** 2 * self.major * self.minor

    def bounds(self):
        return np.zeros(3), self.major + self.minor

    def sample(self, rng, n):
        R, r = self.major, self.minor
        chunks, found = [], 0
        while found < n:
            u = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
            v = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
            # area element is proportional to R + r cos v
            keep = rng.uniform(size=2 * n) < (R + r * np.cos(v)) / (R + r)
            u, v = u[keep], v[keep]
            chunks.append(np.column_stack([(R + r * np.cos(v)) * np.cos(u),
                                           (R + r * np.cos(v)) * np.sin(u),
                                           r * np.sin(v)]))
            found += len(u)
        return np.concatenate(chunks)[:n]

    def contains(self, p):
        ring = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - self.major
        return ring ** 2 + p[:, 2] ** 2 <= self.minor ** 2


class Posed:
    """A solid rotated then translated by `offset`."""

    def __init__(self, solid, rotation, offset):
        self.solid = solid
        self.rotation = rotation
        self.offset = np.asarray(offset, dtype=float)

    @property
    def area(self):
        return self.solid.area

    def bounds(self):
        center, radius = self.solid.bounds()
        return self.rotation.apply(center) + self.offset, radius

    def sample(self, rng, n):
        return self.rotation.apply(self.solid.sample(rng, n)) + self.offset

    def contains(self, p):
        return self.solid.contains(self.rotation.inv().apply(p - self.offset))


class Union:
    def __init__(self, parts):
        self.parts = list(parts)

    @property
    def area(self):
        return sum(part.area for part in self.parts)

    def bounds(self):
        found = [part.bounds() for part in self.parts]
        center = np.mean([c for c, _ in found], axis=0)
        return center, max(float(np.linalg.norm(c - center)) + r for c, r in found)

    def sample(self, rng, n):
        areas = np.array([part.area for part in self.parts])
        kept, total = [], 0
        for _ in range(UNION_ROUNDS):
            counts = rng.multinomial(n, areas / areas.sum())
            for i, (part, count) in enumerate(zip(self.parts, counts)):
                if count == 0:
                    continue
                points = part.sample(rng, count)
                # surface points buried inside another part are not on the union's surface
                buried = np.zeros(count, dtype=bool)
                for j, other in enumerate(self.parts):
                    if j != i:
                        buried |= other.contains(points)
                kept.append(points[~buried])
                total += int(np.sum(~buried))
            if total >= n:
                merged = np.concatenate(kept)[:n]
                return merged[rng.permutation(n)]
        raise ShapeSpecError(f"union surface sampling yielded {total} of {n} points")

    def contains(self, p):
        inside = np.zeros(len(p), dtype=bool)
        for part in self.parts:
            inside |= part.contains(p)
        return inside


class Shape:
    """A solid normalised into the unit cube; calling it is the containment oracle."""

    def __init__(self, solid):
        self.solid = solid
        self.center, radius = solid.bounds()
        self.scale = UNIT_RADIUS / radius

    def sample(self, rng, n):
        return (self.solid.sample(rng, n) - self.center) * self.scale

    def contains(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self.solid.contains(points / self.scale + self.center)

    __call__ = contains


# --- shape specs ---

@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    size: tuple = (0.5,)
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    offset: tuple = (0.0, 0.0, 0.0)
    n_points: int = 256
    parts: tuple = field(default=())  # ShapeSpecs, union only


_SIZE_ARITY = {"sphere": 1, "box": 3, "cylinder": 2, "torus": 2}


def _primitive(spec):
    arity = _SIZE_ARITY.get(spec.kind)
    if arity is None:
        raise ShapeSpecError(f"unknown primitive kind {spec.kind!r}; expected one of {SHAPE_KINDS}")
    size = np.asarray(spec.size, dtype=float)
    if size.shape != (arity,) or not np.all(np.isfinite(size)) or np.any(size <= 0):
        raise ShapeSpecError(f"{spec.kind} needs {arity} positive size values, got {spec.size}")
    if spec.kind == "sphere":
        return Sphere(size[0])
    if spec.kind == "box":
        return Box(size)
    if spec.kind == "cylinder":
        return Cylinder(size[0], size[1])
    if size[1] >= size[0]:
        raise ShapeSpecError(f"torus tube radius {size[1]} must be below its major radius {size[0]}")
    return Torus(size[0], size[1])


def build_solid(spec):
    if spec.kind == "union":
        if len(spec.parts) < 2:
            raise ShapeSpecError(f"union needs at least two parts, got {len(spec.parts)}")
        if any(part.kind == "union" for part in spec.parts):
            raise ShapeSpecError("nested unions are not supported")
        inner = Union([build_solid(part) for part in spec.parts])
    else:
        inner = _primitive(spec)
    rotation = Rotation.from_euler(rigid.EULER_ORDER, np.asarray(spec.rotation_deg, dtype=float), degrees=True)
    return Posed(inner, rotation, spec.offset)


def generate_shape(spec, seed):
    """N surface points of the normalised solid plus its containment oracle."""
    if spec.n_points < 1:
        raise ShapeSpecError(f"point budget must be positive, got {spec.n_points}")
    shape = Shape(build_solid(spec))
    points = shape.sample(np.random.default_rng(seed), spec.n_points)
    return PointCloud(points), shape


def random_shape_spec(rng, kind, n_points=256):
    angles = tuple(rng.uniform(0.0, 360.0, size=3))
    if kind == "sphere":
        size = (rng.uniform(0.3, 0.6),)
    elif kind == "box":
        size = tuple(rng.uniform(0.15, 0.5, size=3))
    elif kind == "cylinder":
        size = (rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.5))
    elif kind == "torus":
        major = rng.uniform(0.3, 0.5)
        size = (major, rng.uniform(0.1, 0.6) * major)
    elif kind == "union":
        parts = tuple(
            replace(random_shape_spec(rng, str(rng.choice(["sphere", "box", "cylinder"])), n_points),
                    offset=tuple(rng.uniform(-0.3, 0.3, size=3)))
            for _ in range(2)
        )
        return ShapeSpec("union", size=(), rotation_deg=angles, n_points=n_points, parts=parts)
    else:
        raise ShapeSpecError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    return ShapeSpec(kind, size=size, rotation_deg=angles, n_points=n_points)


# --- occupancy probes ---

def sample_occupancy_points(oracle, surface, count, seed):
    """Half near-surface jitter, half uniform in the unit cube; both classes at >= 10%."""
    if count < 2:
        raise OccupancyError(f"need at least 2 occupancy probes, got {count}")
    rng = np.random.default_rng(seed)
    near_count = count // 2
    for attempt in range(OCCUPANCY_RETRIES):
        picks = rng.integers(0, len(surface), size=near_count)
        near = surface.points[picks] + rng.normal(0.0, SURFACE_JITTER, size=(near_count, 3))
        uniform = rng.uniform(-UNIT_RADIUS, UNIT_RADIUS, size=(count - near_count, 3))
        points = np.vstack([near, uniform])
        labels = np.asarray(oracle(points), dtype=bool)
        inside = labels.mean()
        if min(inside, 1.0 - inside) >= MIN_MINORITY:
            return PointCloud(points, labels)
        logging.debug(f"[Occupancy] attempt {attempt}: inside fraction {inside:.3f}, resampling")
    raise OccupancyError(f"oracle produced one-class sample after {OCCUPANCY_RETRIES} attempts")


# --- pairs ---

@dataclass(frozen=True)
class TrainingPair:
    """What the optimizer sees: clouds and probes, never a ground-truth transform."""
    source: PointCloud
    target: PointCloud
    sampled_source: PointCloud = None
    sampled_target: PointCloud = None


@dataclass(frozen=True)
class PairSample:
    source: PointCloud
    target: PointCloud
    gt_transform: rigid.RigidTransform
    sampled_source: PointCloud = None
    sampled_target: PointCloud = None
    noise_tag: str = CLEAN

    def training_view(self):
        return TrainingPair(self.source, self.target, self.sampled_source, self.sampled_target)


def make_pair(P, seed, oracle=None, transform=None, target_base=None, negative_samples=256,
              max_rotation_deg=45.0, max_translation=0.5):
    """G = T_gt(P) with shuffled point order.

    `target_base` replaces P as the cloud that gets transformed (independent
    resampling of the same solid); `transform` overrides the random draw.
    """
    rng = np.random.default_rng(seed)
    T = transform if transform is not None else rigid.random_transform(rng, max_rotation_deg, max_translation)
    base = P if target_base is None else target_base
    target = rigid.apply(T, base).subset(rng.permutation(len(base)))
    sampled_source = sampled_target = None
    if oracle is not None:
        sampled_source = sample_occupancy_points(oracle, P, negative_samples, child_seed(seed, 1))
        # inside/outside status is invariant under the rigid motion
        sampled_target = rigid.apply(T, sample_occupancy_points(oracle, base, negative_samples, child_seed(seed, 2)))
    return PairSample(P, target, T, sampled_source, sampled_target)


def make_shape_pair(spec, seed, independent_sampling=False, **pair_options):
    cloud, oracle = generate_shape(spec, seed)
    target_base = generate_shape(spec, child_seed(seed, 3))[0] if independent_sampling else None
    return make_pair(cloud, child_seed(seed, 4), oracle=oracle, target_base=target_base, **pair_options)


def pairs_from_files(paths, seed, max_rotation_deg=45.0, max_translation=0.5):
    """DCP pairs from user clouds; without an oracle they carry no occupancy probes."""
    return [
        make_pair(load_cloud(path), child_seed(seed, i),
                  max_rotation_deg=max_rotation_deg, max_translation=max_translation)
        for i, path in enumerate(paths)
    ]


def build_dataset(count, seed, kinds=SHAPE_KINDS, points_per_shape=256, negative_samples=256,
                  independent_sampling=False, max_rotation_deg=45.0, max_translation=0.5):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        spec = random_shape_spec(rng, kinds[i % len(kinds)], points_per_shape)
        samples.append(make_shape_pair(spec, child_seed(seed, 100 + i), independent_sampling,
                                       negative_samples=negative_samples,
                                       max_rotation_deg=max_rotation_deg, max_translation=max_translation))
    logging.info(f"Built {count} pairs from {list(kinds)} (seed {seed}, {points_per_shape} points each)")
    return samples


# --- noise ---

@dataclass(frozen=True)
class NoiseConfig:
    di_keep_ratio: float = 0.75
    pd_sigma: float = 0.1
    pd_clip: float = 0.05
    do_fraction: float = 0.1
    do_sigma: float = 0.5


def _incomplete(cloud, rng, keep_ratio):
    # anchor in the unit cube; keep its k nearest points in their original order
    k = min(len(cloud), max(1, _round_half_up(keep_ratio * len(cloud))))
    anchor = rng.uniform(-UNIT_RADIUS, UNIT_RADIUS, size=3)
    return cloud.subset(np.sort(nearest_k(KdTree(cloud), anchor, k)))


def _drift(cloud, rng, sigma, clip):
    noise = np.clip(rng.normal(0.0, sigma, size=cloud.points.shape), -clip, clip)
    return PointCloud(cloud.points + noise)


def _outliers(cloud, rng, fraction, sigma):
    n = len(cloud)
    m = min(n, _round_half_up(fraction * n))
    removed = rng.choice(n, size=m, replace=False)
    kept = np.delete(cloud.points, removed, axis=0)
    return PointCloud(np.vstack([kept, rng.normal(0.0, sigma, size=(m, 3))]))


def inject_noise(sample, kind, seed, config=NoiseConfig()):
    """Returns a copy of a clean pair with noise `kind` applied; `clean` passes it through."""
    if kind == CLEAN:
        return sample
    if kind not in NOISE_KINDS:
        raise NoiseError(f"unknown noise kind {kind!r}; expected one of {(CLEAN,) + NOISE_KINDS}")
    if sample.noise_tag != CLEAN:
        raise NoiseError(f"noise can only be injected into a clean pair, got {sample.noise_tag!r}")
    rng = np.random.default_rng(seed)
    source, target = sample.source, sample.target
    if kind == "di":
        source = _incomplete(source, rng, config.di_keep_ratio)
        target = _incomplete(target, rng, config.di_keep_ratio)
    elif kind == "pd":
        source = _drift(source, rng, config.pd_sigma, config.pd_clip)
    else:
        source = _outliers(source, rng, config.do_fraction, config.do_sigma)
        target = _outliers(target, rng, config.do_fraction, config.do_sigma)
    return replace(sample, source=source, target=target, noise_tag=kind)
