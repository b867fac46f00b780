"""
raw_ingest.py
-------------
Turns a raw manifest (proposals with precomputed appearance vectors, human
skeletons or person boxes, optional depth maps) into a featurized one by
filling in every proposal's interaction histogram h.

- 3D mode: cylinder-bin histograms of the proposal's points around each
  body part, max-pooled over humans. Points come from the proposal record
  or are back-projected from the image's depth map.
- 2D mode: 6x6 grid histograms over each person box, max-pooled over humans.

Images without humans get zero interaction vectors.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from backend.core.errors import ConfigError, DimensionMismatchError
from backend.core.models import DEFAULT_TOPOLOGY, ImageRecord, SkeletonTopology
from backend.core.proposals import make_grid_proposals
from backend.evaluation.regions import Region
from backend.processing.hoi_features import (
    GRID_2D, CylinderBinning, hoi_feature_2d, hoi_feature_3d, pool_humans,
)

logger = logging.getLogger(__name__)

MODES = ('3d', '2d')


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels, meters per depth unit."""

    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f'focal lengths must be positive, got fx={self.fx}, fy={self.fy}')
        if not self.depth_scale > 0:
            raise ConfigError(f'depth_scale must be positive, got {self.depth_scale}')

    def to_dict(self) -> dict:
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'depth_scale': self.depth_scale}

    @classmethod
    def from_dict(cls, data: dict) -> 'CameraIntrinsics':
        return cls(**{k: float(data[k]) for k in ('fx', 'fy', 'cx', 'cy', 'depth_scale') if k in data})


def depth_to_points(depth, mask, intrinsics: CameraIntrinsics) -> np.ndarray:
    """
    Back-project masked pixels with positive depth to camera-frame points.

        z = d * depth_scale,  x = (u - cx) * z / fx,  y = (v - cy) * z / fy

    u is the column, v the row. Pixels are visited in row-major order.

    Returns:
        np.ndarray: M x 3 points in meters
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape or depth.ndim != 2:
        raise DimensionMismatchError(f'depth {depth.shape} and mask {mask.shape} must be equal 2-d shapes')

    v, u = np.nonzero(mask & (depth > 0))
    z = depth[v, u] * intrinsics.depth_scale
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return np.column_stack([x, y, z])


def load_depth(path: str) -> np.ndarray:
    """Depth maps are stored as 2-d .npy arrays in raw depth units."""
    depth = np.load(path, allow_pickle=False)
    if depth.ndim != 2:
        raise DimensionMismatchError(f'depth map {path} is not 2-d (shape {depth.shape})')
    return depth


@dataclass(frozen=True)
class FeaturizeSettings:
    mode: str = '3d'
    topology: SkeletonTopology = DEFAULT_TOPOLOGY
    binning: CylinderBinning = field(default_factory=CylinderBinning)
    intrinsics: Optional[CameraIntrinsics] = None
    grid: Optional[Tuple[int, int]] = None
    depth_root: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f'mode must be one of {MODES}, got {self.mode!r}')

    @property
    def d_h(self) -> int:
        return self.topology.P * self.binning.n_bins if self.mode == '3d' else GRID_2D * GRID_2D

    def to_dict(self) -> dict:
        out = {'mode': self.mode, 'd_h': self.d_h}
        if self.mode == '3d':
            out['topology'] = self.topology.to_list()
            out['binning'] = self.binning.to_dict()
        if self.intrinsics is not None:
            out['intrinsics'] = self.intrinsics.to_dict()
        if self.grid is not None:
            out['grid'] = list(self.grid)
        return out


@dataclass
class FeaturizeReport:
    images: int = 0
    proposals: int = 0
    images_with_humans: int = 0
    proposals_missing_points: int = 0
    grid_fallbacks: int = 0

    def to_dict(self) -> dict:
        return {
            'images': self.images,
            'proposals': self.proposals,
            'images_with_humans': self.images_with_humans,
            'proposals_missing_points': self.proposals_missing_points,
            'grid_fallbacks': self.grid_fallbacks,
        }


def _proposal_points(proposal, image: ImageRecord, depth, settings: FeaturizeSettings):
    if proposal.points is not None:
        return proposal.points
    if depth is None or settings.intrinsics is None:
        return None
    region = Region.from_proposal(proposal, image.width, image.height)
    if depth.shape != region.mask.shape:
        raise DimensionMismatchError(
            f'depth map of image {image.image_id} is {depth.shape}, image is {image.height}x{image.width}'
        )
    return depth_to_points(depth, region.mask, settings.intrinsics)


def featurize_image(image: ImageRecord, settings: FeaturizeSettings) -> Tuple[ImageRecord, FeaturizeReport]:
    """Interaction features for every proposal of one image."""
    report = FeaturizeReport(images=1)
    proposals = list(image.proposals)
    if not proposals and settings.grid is not None:
        rows, cols = settings.grid
        proposals = make_grid_proposals(image.image_id, image.width, image.height, rows, cols)
        report.grid_fallbacks = 1

    depth = None
    if settings.mode == '3d' and image.humans and image.depth_path and settings.intrinsics is not None:
        depth = load_depth(os.path.join(settings.depth_root or '', image.depth_path))

    has_humans = bool(image.humans) if settings.mode == '3d' else bool(image.human_boxes)
    report.images_with_humans = int(has_humans)

    featurized = []
    for proposal in proposals:
        if settings.mode == '3d':
            histograms = []
            if image.humans:
                points = _proposal_points(proposal, image, depth, settings)
                features = [hoi_feature_3d(points, skeleton, settings.topology, settings.binning)
                            for skeleton in image.humans]
                if features[0].missing_points:
                    report.proposals_missing_points += 1
                    logger.warning(f'Proposal {image.image_id}/{proposal.proposal_id} has no 3D points')
                else:
                    histograms = [f.values for f in features]
        else:
            region = Region.from_proposal(proposal, image.width, image.height)
            histograms = [hoi_feature_2d(region, box) for box in image.human_boxes]
        h = pool_humans(histograms, settings.d_h)
        featurized.append(proposal.with_features(interaction=h))
        report.proposals += 1

    return image.with_proposals(featurized), report


def featurize_dataset(dataset: Sequence[ImageRecord], settings: FeaturizeSettings,
                      threads: int = 1, silent: bool = True) -> Tuple[List[ImageRecord], FeaturizeReport]:
    """
    Featurize every image. Images are processed by up to `threads` workers;
    output order and values do not depend on the worker count.

    Returns:
        tuple: (featurized dataset, FeaturizeReport)
    """
    if threads < 1:
        raise ConfigError(f'threads must be >= 1, got {threads}')

    if not silent:
        print("\n" + "=" * 60)
        print(f"INTERACTION FEATURIZER ({settings.mode.upper()})")
        print("=" * 60)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda image: featurize_image(image, settings), dataset))

    total = FeaturizeReport()
    out = []
    for image, report in results:
        out.append(image)
        total.images += report.images
        total.proposals += report.proposals
        total.images_with_humans += report.images_with_humans
        total.proposals_missing_points += report.proposals_missing_points
        total.grid_fallbacks += report.grid_fallbacks

    logger.info(
        f'Featurized {total.proposals} proposals in {total.images} images '
        f'({total.images_with_humans} with humans, {total.proposals_missing_points} without points)'
    )
    if not silent:
        print(f"Images: {total.images} ({total.images_with_humans} with human evidence)")
        print(f"Proposals: {total.proposals}")
        if total.proposals_missing_points:
            print(f"⚠️  {total.proposals_missing_points} proposals had no 3D points")
        print("=" * 60)
    return out, total
