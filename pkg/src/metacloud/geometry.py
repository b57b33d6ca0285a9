"""Point cloud normalization and stochastic corruption transforms.

All functions operate on (n, 3) float64 arrays of xyz coordinates and never
mutate their inputs. Transformed clouds are always row subsets of the input
cloud, in the original relative order.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Transform kinds understood by TransformSpec / apply_transform.
KIND_DENSITY = "density"
KIND_DROPPING = "dropping"
KIND_OCCLUSION = "occlusion"
KIND_IDENTITY = "identity"
TRANSFORM_KINDS = (KIND_DENSITY, KIND_DROPPING, KIND_OCCLUSION, KIND_IDENTITY)

# Bounded retry count for transforms that can signal an empty result.
RESAMPLE_LIMIT = 8


class DegenerateCloudError(ValueError):
    """Cloud has no spatial extent (all points coincide) or is empty."""


class ResampleRequired(RuntimeError):
    """A stochastic transform produced an empty cloud; retry with fresh draws."""


@dataclass
class PointCloud:
    """A labeled point set: points is an (n, 3) float64 array."""

    points: np.ndarray
    label: int


def _check_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array, got shape {points.shape}")
    if points.shape[0] == 0:
        raise DegenerateCloudError("empty point cloud")
    return points


def normalize_unit_ball(points):
    """Center a cloud on its centroid and scale the farthest point to norm 1.

    Args:
        points: (n, 3) array, n >= 1.

    Returns:
        New (n, 3) float64 array with zero centroid and max norm 1 (to within
        float rounding; no point exceeds 1 by more than a few ulp).

    Raises:
        DegenerateCloudError: empty cloud or all points coincide.
    """
    points = _check_points(points)
    centered = points - points.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale < 1e-12:
        raise DegenerateCloudError("cloud has no spatial extent")
    return centered / scale


def random_unit_vector(rng):
    """Draw a uniformly distributed point on the unit sphere."""
    while True:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def distance_thin(points, anchor, gate, rng):
    """Drop points with probability growing with distance from an anchor.

    Distances to the anchor are min-max normalized to basic rates in [0, 1];
    each point is dropped independently with probability min(1, gate * rate).
    The point nearest the anchor has rate 0 and always survives; any point
    with gate * rate >= 1 is always dropped.

    Args:
        points: (n, 3) array.
        anchor: (3,) position the thinning is centered on (on the unit
            sphere when driven by apply_transform).
        gate: rate multiplier, must be > 1.
        rng: numpy Generator for the per-point survival draws.

    Returns:
        Surviving rows of points, original order.

    Raises:
        ResampleRequired: no point survived (defensive; cannot occur with
            min-max rates since the nearest point always survives).
    """
    points = _check_points(points)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    if not gate > 1.0:
        raise ValueError(f"gate must be > 1, got {gate}")
    d = np.linalg.norm(points - anchor, axis=1)
    span = d.max() - d.min()
    if span < 1e-12:
        rate = np.zeros(len(points))
    else:
        rate = (d - d.min()) / span
    drop_prob = np.minimum(1.0, gate * rate)
    keep = rng.random(len(points)) >= drop_prob
    if not keep.any():
        raise ResampleRequired("distance thinning removed every point")
    return points[keep]


def drop_count(n, percent):
    """Number of points removed by drop_nearest: round-half-up of n*percent/100."""
    return int(np.floor(n * percent / 100.0 + 0.5))


def drop_nearest(points, anchor_index, percent):
    """Remove the m points nearest to an existing anchor point.

    m is the round-half-up of n * percent / 100. Distance ties are broken
    toward the lower point index. The anchor itself is at distance 0, so it
    is always among the removed points (m >= 1 whenever percent >= 50/n).

    Args:
        points: (n, 3) array with n >= 2.
        anchor_index: index of the anchor point within the cloud.
        percent: drop percentage, 0 < percent < 100.

    Returns:
        The n - m surviving rows, original order.

    Raises:
        ValueError: bad percent, bad anchor index, n < 2, or m >= n.
    """
    points = _check_points(points)
    n = len(points)
    if n < 2:
        raise ValueError("dropping needs at least 2 points")
    if not 0.0 < percent < 100.0:
        raise ValueError(f"percent must be in (0, 100), got {percent}")
    if not 0 <= anchor_index < n:
        raise ValueError(f"anchor index {anchor_index} out of range for {n} points")
    m = drop_count(n, percent)
    if m >= n:
        raise ValueError(f"would drop all {n} points (m={m})")
    d = np.linalg.norm(points - points[anchor_index], axis=1)
    # Stable sort keeps equal distances in index order.
    nearest = np.argsort(d, kind="stable")[:m]
    keep = np.ones(n, dtype=bool)
    keep[nearest] = False
    return points[keep]


def viewing_frame(direction):
    """Build a deterministic orthonormal frame (u, w, v) from a view direction.

    v is the normalized direction; u is the normalized cross product of the
    coordinate axis least aligned with v (lowest index on ties) and v; w
    completes the right-handed frame as v x u.

    Returns:
        (u, w, v) unit vectors, each (3,).
    """
    v = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("view direction must be nonzero")
    v = v / norm
    axis = np.zeros(3)
    axis[np.argmin(np.abs(v))] = 1.0
    u = np.cross(axis, v)
    u = u / np.linalg.norm(u)
    w = np.cross(v, u)
    return u, w, v


def self_occlude(points, direction, cell_size):
    """Keep only the point nearest the viewer in each in-plane grid cell.

    Points are expressed in the viewing frame of `direction`: in-plane
    coordinates (a, b) = (p.u, p.w) and depth c = p.v. The plane is tiled
    with square cells of side cell_size anchored at the in-plane bounding
    box minimum; within each occupied cell only the point with minimal depth
    survives, ties broken toward the lower point index.

    Args:
        points: (n, 3) array.
        direction: (3,) view direction (normalized defensively).
        cell_size: grid cell side W > 0.

    Returns:
        One surviving row per occupied cell, original order.
    """
    points = _check_points(points)
    if not cell_size > 0.0:
        raise ValueError(f"cell size must be > 0, got {cell_size}")
    u, w, v = viewing_frame(direction)
    a = points @ u
    b = points @ w
    c = points @ v
    col = np.floor((a - a.min()) / cell_size).astype(np.int64)
    row = np.floor((b - b.min()) / cell_size).astype(np.int64)
    # Stable lexsort: within a cell, equal depths stay in index order.
    order = np.lexsort((c, row, col))
    col_s, row_s = col[order], row[order]
    first = np.ones(len(points), dtype=bool)
    first[1:] = (col_s[1:] != col_s[:-1]) | (row_s[1:] != row_s[:-1])
    winners = np.sort(order[first])
    return points[winners]


@dataclass(frozen=True)
class TransformSpec:
    """One corruption task: a transform kind plus its static parameter.

    value holds the gate for density, the drop percent for dropping, the
    grid cell size for occlusion, and None for identity.
    """

    kind: str
    value: float | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == KIND_IDENTITY:
            if self.value is not None:
                raise ValueError("identity takes no parameter")
            return
        if self.value is None:
            raise ValueError(f"{self.kind} needs a parameter value")
        if self.kind == KIND_DENSITY and not self.value > 1.0:
            raise ValueError(f"density gate must be > 1, got {self.value}")
        if self.kind == KIND_DROPPING and not 0.0 < self.value < 100.0:
            raise ValueError(f"drop percent must be in (0, 100), got {self.value}")
        if self.kind == KIND_OCCLUSION and not self.value > 0.0:
            raise ValueError(f"occlusion cell size must be > 0, got {self.value}")


def apply_transform(spec, points, rng):
    """Apply one transform with fresh dynamic parameters drawn from rng.

    Dynamic draws per kind: density draws an anchor on the unit sphere,
    dropping draws the anchor point index, occlusion draws the view
    direction; identity draws nothing. A density result that comes back
    empty is retried with fresh draws up to RESAMPLE_LIMIT times, then the
    cloud is returned unchanged with a warning.

    Args:
        spec: TransformSpec naming the kind and its static parameter.
        points: (n, 3) array, assumed normalized to the unit ball.
        rng: numpy Generator for the dynamic draws.

    Returns:
        The transformed cloud (a row subset; identity returns the input
        array itself).
    """
    if spec.kind == KIND_IDENTITY:
        return points
    if spec.kind == KIND_DENSITY:
        for _ in range(RESAMPLE_LIMIT):
            anchor = random_unit_vector(rng)
            try:
                return distance_thin(points, anchor, spec.value, rng)
            except ResampleRequired:
                continue
        logger.warning(
            "density transform empty after %d retries; passing cloud through",
            RESAMPLE_LIMIT,
        )
        return points
    if spec.kind == KIND_DROPPING:
        anchor_index = int(rng.integers(len(points)))
        return drop_nearest(points, anchor_index, spec.value)
    if spec.kind == KIND_OCCLUSION:
        direction = random_unit_vector(rng)
        return self_occlude(points, direction, spec.value)
    raise ValueError(f"unknown transform kind {spec.kind!r}")
