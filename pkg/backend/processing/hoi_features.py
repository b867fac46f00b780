"""
hoi_features.py
---------------
Human-object interaction descriptors and similarity helpers:
- 3D: histogram of proposal points in 15 cylinder bins around each body part
- 2D: 6x6 grid histogram of proposal pixels inside the person box
- max-pooling over humans, Gaussian similarity and bandwidth estimation

Cylinder bins are indexed vertical-third-major: bin = third * 5 + ring,
third 0 nearest the part's start joint, ring 0 nearest the axis.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from backend.config import Config
from backend.core.errors import ConfigError, DimensionMismatchError, InvalidSkeletonError
from backend.core.models import BoundingBox, HumanSkeleton, SkeletonTopology
from backend.evaluation.regions import Region

logger = logging.getLogger(__name__)

GRID_2D = 6


@dataclass(frozen=True)
class CylinderBinning:
    vertical_segments: int = 3
    radial_rings: int = 5
    inner_exclusion_fraction: float = Config.INNER_FRACTION
    max_radius: float = Config.CYLINDER_RADIUS

    def __post_init__(self):
        if self.vertical_segments * self.radial_rings != 15:
            raise ConfigError('cylinder binning must have 15 bins (3 thirds x 5 rings)')
        if not self.max_radius > 0:
            raise ConfigError(f'max_radius must be positive, got {self.max_radius}')
        if not 0 < self.inner_exclusion_fraction < 1:
            raise ConfigError('inner_exclusion_fraction must lie in (0, 1)')

    @property
    def n_bins(self) -> int:
        return self.vertical_segments * self.radial_rings

    @property
    def inner_radius(self) -> float:
        return self.inner_exclusion_fraction * self.max_radius

    @property
    def ring_width(self) -> float:
        return (self.max_radius - self.inner_radius) / self.radial_rings

    @property
    def ring_edges(self) -> np.ndarray:
        """Outer radius of each ring; the last is exactly max_radius."""
        edges = self.inner_radius + self.ring_width * np.arange(1, self.radial_rings + 1)
        edges[-1] = self.max_radius
        return edges

    def to_dict(self) -> dict:
        return {
            'inner_exclusion_fraction': self.inner_exclusion_fraction,
            'max_radius': self.max_radius,
        }


class InteractionFeature(NamedTuple):
    values: np.ndarray
    missing_points: bool


def cylinder_coordinates(points, part_start, part_end):
    """Axial position t (0 at start, L at end), radial distance rho, and L."""
    start = np.asarray(part_start, dtype=np.float64)
    axis = np.asarray(part_end, dtype=np.float64) - start
    length = float(np.linalg.norm(axis))
    if not length > 0:
        raise InvalidSkeletonError('body part has zero length')
    unit = axis / length
    rel = np.asarray(points, dtype=np.float64).reshape(-1, 3) - start
    t = rel @ unit
    radial = rel - np.outer(t, unit)
    rho = np.linalg.norm(radial, axis=1)
    return t, rho, length


def cylinder_bin_index(t, rho, length, binning: CylinderBinning) -> np.ndarray:
    """Flat bin index per point, -1 for points outside the counted shell."""
    r_in, r_max = binning.inner_radius, binning.max_radius
    inside = (t >= 0) & (t <= length) & (rho > r_in) & (rho <= r_max)

    third = np.floor(binning.vertical_segments * t / length).astype(int)
    third = np.clip(third, 0, binning.vertical_segments - 1)
    # upper-inclusive rings: rho on a ring's outer radius stays in that ring
    ring = np.searchsorted(binning.ring_edges, rho, side='left')
    ring = np.clip(ring, 0, binning.radial_rings - 1)

    index = third * binning.radial_rings + ring
    return np.where(inside, index, -1)


def hoi_histogram_3d(points, part_start, part_end,
                     binning: CylinderBinning = CylinderBinning()) -> np.ndarray:
    """
    Count proposal points in the 15 cylinder bins around one body part.

    Args:
        points: M x 3 array in meters
        part_start, part_end: Joint positions defining the part axis
        binning: Cylinder geometry

    Returns:
        np.ndarray: 15 counts (as floats); sums to at most M
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t, rho, length = cylinder_coordinates(pts, part_start, part_end)
    index = cylinder_bin_index(t, rho, length, binning)
    counted = index[index >= 0]
    return np.bincount(counted, minlength=binning.n_bins).astype(np.float64)


def hoi_feature_3d(points, skeleton: HumanSkeleton, topology: SkeletonTopology,
                   binning: CylinderBinning = CylinderBinning()) -> InteractionFeature:
    """
    Interaction feature of one proposal against one skeleton: per-part
    histograms in topology order, normalized by the proposal's point count.

    Returns:
        InteractionFeature: (P*15 vector, missing_points flag)
    """
    pts = np.asarray(points if points is not None else [], dtype=np.float64).reshape(-1, 3)
    size = topology.P * binning.n_bins
    if len(pts) == 0:
        return InteractionFeature(np.zeros(size), True)

    blocks = []
    for start_name, end_name in topology.parts:
        try:
            start = skeleton.joints[start_name]
            end = skeleton.joints[end_name]
        except KeyError as e:
            raise InvalidSkeletonError(f'skeleton is missing joint {e.args[0]!r}')
        blocks.append(hoi_histogram_3d(pts, start, end, binning))
    return InteractionFeature(np.concatenate(blocks) / len(pts), False)


def grid_cell_edges(start: int, length: int, cells: int = GRID_2D) -> np.ndarray:
    """Cell boundaries; the remainder pixels join the last cell."""
    step = length // cells
    edges = start + step * np.arange(cells + 1)
    edges[-1] = start + length
    return edges


def hoi_feature_2d(proposal: Region, human_box: BoundingBox) -> np.ndarray:
    """
    6x6 histogram of proposal pixels over a person box, normalized by the
    proposal's total pixel count. Pixels outside the person box are not binned.

    Returns:
        np.ndarray: 36 values, row-major over the grid
    """
    if human_box.area <= 0:
        raise InvalidSkeletonError(f'human box {human_box.to_list()} has no area')
    total = proposal.area
    if total == 0:
        raise DimensionMismatchError('proposal has zero area')

    xs = grid_cell_edges(human_box.x, human_box.width)
    ys = grid_cell_edges(human_box.y, human_box.height)
    # clip cell edges to the frame; cells outside the image simply stay empty
    xs = np.clip(xs, 0, proposal.width)
    ys = np.clip(ys, 0, proposal.height)

    integral = np.zeros((proposal.height + 1, proposal.width + 1))
    integral[1:, 1:] = np.cumsum(np.cumsum(proposal.mask, axis=0), axis=1)
    counts = (integral[ys[1:]][:, xs[1:]] - integral[ys[:-1]][:, xs[1:]]
              - integral[ys[1:]][:, xs[:-1]] + integral[ys[:-1]][:, xs[:-1]])
    return counts.ravel() / total


def pool_humans(histograms: Sequence[np.ndarray], dim: int) -> np.ndarray:
    """Entrywise max over humans; no humans gives the zero vector."""
    if not histograms:
        return np.zeros(dim)
    stacked = [np.asarray(h, dtype=np.float64) for h in histograms]
    if any(h.shape != (dim,) for h in stacked):
        raise DimensionMismatchError(f'all histograms must have length {dim}')
    return np.max(np.vstack(stacked), axis=0)


def gaussian_similarity(a, b, delta: float) -> float:
    """S(a, b) = exp(-||a - b||^2 / delta)."""
    if not delta > 0:
        raise ConfigError(f'delta must be positive, got {delta}')
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f'shapes differ: {a.shape} vs {b.shape}')
    return float(np.exp(-np.sum((a - b) ** 2) / delta))


def similarity_matrix(X, delta: float) -> np.ndarray:
    """N x N symmetric similarity table with exactly unit diagonal."""
    if not delta > 0:
        raise ConfigError(f'delta must be positive, got {delta}')
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        return np.eye(n)
    if X.shape[1] == 0:
        return np.ones((n, n))
    S = squareform(np.exp(-pdist(X, 'sqeuclidean') / delta))
    np.fill_diagonal(S, 1.0)
    return S


def estimate_bandwidth(features) -> float:
    """Median pairwise squared distance over distinct pairs; 1.0 if that is 0."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DimensionMismatchError('bandwidth estimation needs at least 2 vectors')
    median = float(np.median(pdist(X, 'sqeuclidean')))
    if median == 0:
        logger.warning('All feature vectors coincide; using bandwidth 1.0')
        return 1.0
    return median
