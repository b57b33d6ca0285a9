"""Synthetic shape benchmark, dataset splitting, and the cloud file formats.

The benchmark draws labeled point clouds from five parametric surface
families. Every generated instance gets per-axis aspect jitter, an overall
scale jitter, a uniform yaw rotation about z, and unit-ball normalization.
Clouds are stored one per text file (header "n label", then n lines "x y z")
under a directory per class, indexed by a manifest of relative paths.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    KIND_DROPPING,
    KIND_OCCLUSION,
    PointCloud,
    TransformSpec,
    apply_transform,
    normalize_unit_ball,
)

logger = logging.getLogger(__name__)

SURFACE_KINDS = ("cone", "cube", "cylinder", "sphere", "torus")

TORUS_MINOR = 0.35
MANIFEST_NAME = "manifest.txt"

# Validation share of a 5:1 train/val split.
VAL_FRACTION = 1.0 / 6.0


class DatasetFormatError(ValueError):
    """A cloud file or manifest failed to parse; message carries file:line."""


@dataclass
class ShapeFamily:
    """One synthetic class: a surface kind plus its instance jitter ranges."""

    name: str
    points: int = 1024
    scale_jitter: tuple = (0.8, 1.2)
    aspect_jitter: tuple = (0.8, 1.25)

    def __post_init__(self):
        if self.name not in SURFACE_KINDS:
            raise ValueError(f"unknown surface kind {self.name!r}")
        if self.points < 64:
            raise ValueError(f"points per cloud must be >= 64, got {self.points}")
        for lo, hi in (self.scale_jitter, self.aspect_jitter):
            if not (0.0 < lo <= hi):
                raise ValueError("jitter ranges must be positive with lo <= hi")


@dataclass
class Dataset:
    """Labeled clouds plus the class-name table indexing their labels."""

    items: list
    class_names: list
    split: str = "full"

    def points_and_labels(self):
        clouds = [item.points for item in self.items]
        labels = np.array([item.label for item in self.items])
        return clouds, labels

    def by_class(self):
        buckets = {i: [] for i in range(len(self.class_names))}
        for idx, item in enumerate(self.items):
            buckets[item.label].append(idx)
        return buckets


def default_families(points=1024):
    """The five stock families in alphabetical (= label) order."""
    return [ShapeFamily(name, points=points) for name in SURFACE_KINDS]


def sample_surface(kind, count, rng):
    """Sample `count` points uniformly on the canonical unit-scale surface.

    Canonical surfaces are centered at the origin: sphere of radius 1, cube
    side 2, capped cylinder radius 1 height 2, cone apex (0, 0, 1) over a
    base disk of radius 1 at z = -1, torus with major radius 1 and minor
    radius TORUS_MINOR. Sampling is area weighted on each surface.
    """
    if kind == "sphere":
        v = rng.standard_normal((count, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(6, size=count)
        uv = rng.uniform(-1.0, 1.0, size=(count, 2))
        pts = np.empty((count, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for ax in range(3):
            mask = axis == ax
            others = [a for a in range(3) if a != ax]
            pts[mask, ax] = sign[mask]
            pts[mask, others[0]] = uv[mask, 0]
            pts[mask, others[1]] = uv[mask, 1]
        return pts
    if kind == "cylinder":
        # Lateral area 4*pi vs two caps of pi each.
        lateral = rng.random(count) < 2.0 / 3.0
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        h = rng.uniform(-1.0, 1.0, size=count)
        r = np.sqrt(rng.random(count))
        pts = np.empty((count, 3))
        rad = np.where(lateral, 1.0, r)
        pts[:, 0] = rad * np.cos(theta)
        pts[:, 1] = rad * np.sin(theta)
        pts[:, 2] = np.where(lateral, h, np.where(h >= 0.0, 1.0, -1.0))
        return pts
    if kind == "cone":
        # Lateral area pi*sqrt(5) vs base disk pi.
        slant = np.sqrt(5.0)
        lateral = rng.random(count) < slant / (slant + 1.0)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        t = np.sqrt(rng.random(count))  # radius fraction, density grows with t
        pts = np.empty((count, 3))
        pts[:, 0] = t * np.cos(theta)
        pts[:, 1] = t * np.sin(theta)
        pts[:, 2] = np.where(lateral, 1.0 - 2.0 * t, -1.0)
        return pts
    if kind == "torus":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        phi = np.empty(count)
        filled = 0
        ratio = TORUS_MINOR  # relative to major radius 1
        while filled < count:
            cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (count - filled))
            accept = rng.random(len(cand)) < (1.0 + ratio * np.cos(cand)) / (1.0 + ratio)
            picked = cand[accept][: count - filled]
            phi[filled : filled + len(picked)] = picked
            filled += len(picked)
        ring = 1.0 + TORUS_MINOR * np.cos(phi)
        return np.stack(
            (ring * np.cos(theta), ring * np.sin(theta), TORUS_MINOR * np.sin(phi)),
            axis=1,
        )
    raise ValueError(f"unknown surface kind {kind!r}")


def _yaw_matrix(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_synthetic_dataset(families, per_class, seed, points=None):
    """Generate per_class instances of each family under one seed.

    Labels follow the order of `families`; instances are drawn class major,
    instance minor, so a given (families, per_class, seed, points) tuple
    always yields the identical dataset. `points` overrides every family's
    own point count when given.
    """
    if not families:
        raise ValueError("need at least one shape family")
    names = [fam.name for fam in families]
    if len(set(names)) != len(names):
        raise ValueError("family names must be unique")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if points is not None and points < 64:
        raise ValueError(f"points per cloud must be >= 64, got {points}")
    rng = np.random.default_rng(seed)
    items = []
    for label, fam in enumerate(families):
        m = points if points is not None else fam.points
        for _ in range(per_class):
            pts = sample_surface(fam.name, m, rng)
            aspect = rng.uniform(fam.aspect_jitter[0], fam.aspect_jitter[1], size=3)
            scale = rng.uniform(fam.scale_jitter[0], fam.scale_jitter[1])
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            pts = (pts * aspect * scale) @ _yaw_matrix(yaw).T
            items.append(PointCloud(normalize_unit_ball(pts), label))
    return Dataset(items=items, class_names=names, split="full")


def split_train_val(dataset, seed):
    """Stratified 5:1 train/val split of a dataset.

    Per class the validation share is floor(n_c / 6); remaining validation
    slots up to round(total / 6) go to the classes with the largest
    fractional remainders (ties toward the lower class index), keeping every
    class within one item of an exact 5:1 ratio. Classes with fewer than 6
    items trigger a warning and still contribute one validation item.
    """
    total = len(dataset.items)
    if total < 6:
        raise ValueError(f"need at least 6 items to split 5:1, got {total}")
    buckets = dataset.by_class()
    counts = {label: len(idx) for label, idx in buckets.items()}
    val_share = {}
    for label in sorted(buckets):
        n_c = counts[label]
        if n_c == 0:
            val_share[label] = 0
        elif n_c < 6:
            logger.warning(
                "class %s has only %d items; forcing one validation item",
                dataset.class_names[label],
                n_c,
            )
            val_share[label] = 1
        else:
            val_share[label] = n_c // 6
    target = int(np.floor(total * VAL_FRACTION + 0.5))
    deficit = target - sum(val_share.values())
    if deficit > 0:
        remainders = sorted(
            (label for label in buckets if counts[label] >= 6),
            key=lambda lb: (-(counts[lb] * VAL_FRACTION - val_share[lb]), lb),
        )
        for label in remainders:
            if deficit == 0:
                break
            if val_share[label] + 1 < counts[label]:
                val_share[label] += 1
                deficit -= 1

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label in sorted(buckets):
        perm = rng.permutation(buckets[label])
        k = val_share[label]
        val_idx.extend(sorted(perm[:k]))
        train_idx.extend(sorted(perm[k:]))
    train = Dataset(
        items=[dataset.items[i] for i in sorted(train_idx)],
        class_names=list(dataset.class_names),
        split="train",
    )
    val = Dataset(
        items=[dataset.items[i] for i in sorted(val_idx)],
        class_names=list(dataset.class_names),
        split="val",
    )
    return train, val


def build_target_domain(dataset, cell_size, drop_percent, seed, forbid=()):
    """Corrupt fresh copies of a dataset into a held-out evaluation domain.

    Applies occlusion with `cell_size` and then dropping with
    `drop_percent`, fresh dynamic draws per cloud (view direction, then
    anchor index). Either parameter may be None to skip that stage; both
    None yields an untouched copy. `forbid` lists TransformSpecs whose
    static values the target must not reuse.
    """
    for spec in forbid:
        if spec.kind == KIND_OCCLUSION and cell_size == spec.value:
            raise ValueError(f"target cell size {cell_size} collides with a training task")
        if spec.kind == KIND_DROPPING and drop_percent == spec.value:
            raise ValueError(f"target drop percent {drop_percent} collides with a training task")
    rng = np.random.default_rng(seed)
    stages = []
    if cell_size is not None:
        stages.append(TransformSpec(KIND_OCCLUSION, cell_size))
    if drop_percent is not None:
        stages.append(TransformSpec(KIND_DROPPING, drop_percent))
    items = []
    for item in dataset.items:
        pts = item.points
        for spec in stages:
            pts = apply_transform(spec, pts, rng)
        items.append(PointCloud(pts, item.label))
    return Dataset(items=items, class_names=list(dataset.class_names), split="target")


def save_cloud(path, cloud):
    """Write one cloud file: header "n label", then one "x y z" line per point.

    Coordinates are written with repr so reading restores the exact float64
    bits; identical clouds produce identical bytes.
    """
    pts = cloud.points
    lines = [f"{len(pts)} {cloud.label}"]
    for x, y, z in pts:
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path):
    """Read one cloud file, validating the header count against the body."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"{path}:1: empty cloud file")
    head = lines[0].split()
    if len(head) != 2:
        raise DatasetFormatError(f"{path}:1: header must be 'n label'")
    try:
        n, label = int(head[0]), int(head[1])
    except ValueError:
        raise DatasetFormatError(f"{path}:1: header must hold two integers") from None
    if n < 1 or label < 0:
        raise DatasetFormatError(f"{path}:1: need n >= 1 and label >= 0")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise DatasetFormatError(
            f"{path}:{len(lines)}: header says {n} points, file holds {len(body)}"
        )
    pts = np.empty((n, 3))
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != 3:
            raise DatasetFormatError(f"{path}:{i + 2}: expected 3 coordinates")
        try:
            pts[i] = [float(f) for f in fields]
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 2}: bad float") from None
    return PointCloud(pts, label)


def save_dataset(dataset, out_dir):
    """Write one file per cloud under a directory per class, plus a manifest.

    Returns the manifest path. Manifest rows are "relative/path class_name"
    in item order; file numbering is sequential within each class.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters = {}
    manifest_rows = []
    for item in dataset.items:
        name = dataset.class_names[item.label]
        cls_dir = out / name
        cls_dir.mkdir(exist_ok=True)
        idx = counters.get(name, 0)
        counters[name] = idx + 1
        rel = f"{name}/{name}_{idx:04d}.txt"
        save_cloud(out / rel, item)
        manifest_rows.append(f"{rel} {name}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(manifest_rows) + "\n")
    return manifest


def load_dataset(path):
    """Load a dataset from a manifest file or a directory-per-class tree.

    Directories are resolved through their manifest when one exists;
    otherwise class subdirectories are scanned. Class names map to label
    indices alphabetically, overriding per-file header labels.
    """
    path = Path(path)
    if path.is_dir() and (path / MANIFEST_NAME).is_file():
        path = path / MANIFEST_NAME
    if path.is_file():
        base = path.parent
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 2:
                raise DatasetFormatError(f"{path}:{lineno}: manifest rows are 'path name'")
            rows.append((fields[0], fields[1]))
        if not rows:
            raise DatasetFormatError(f"{path}:1: empty manifest")
    elif path.is_dir():
        rows = []
        for cls_dir in sorted(p for p in path.iterdir() if p.is_dir()):
            for f in sorted(cls_dir.glob("*.txt")):
                rows.append((f"{cls_dir.name}/{f.name}", cls_dir.name))
        if not rows:
            raise DatasetFormatError(f"{path}: no class directories with .txt files")
        base = path
    else:
        raise FileNotFoundError(f"no dataset at {path}")
    class_names = sorted({name for _, name in rows})
    label_of = {name: i for i, name in enumerate(class_names)}
    items = []
    for rel, name in rows:
        cloud = load_cloud(base / rel)
        items.append(PointCloud(cloud.points, label_of[name]))
    return Dataset(items=items, class_names=class_names, split="full")
