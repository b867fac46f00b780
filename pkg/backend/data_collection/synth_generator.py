"""
synth_generator.py
------------------
Deterministic synthetic co-segmentation datasets with planted clusters.

Appearance features come from K_true isotropic Gaussians whose centers sit
on a scaled regular simplex (all pairwise center distances equal to
separation * sigma). Interaction features carry one disjoint 15-bin block
per cluster; the first round(signal_strength * K_true) clusters put a
template pattern in their own block, the rest carry noise only.

Proposals are shuffled and dealt round-robin into images, laid out as grid
boxes. Ground truth of an image is the union of its proposals from the
planted foreground cluster.

Usage:
    from backend.data_collection.synth_generator import SynthSpec, generate
    planted = generate(SynthSpec(seed=3))
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from backend.core.errors import ConfigError
from backend.core.models import GroundTruth, ImageRecord
from backend.core.proposals import make_grid_proposals
from backend.evaluation.regions import Region, union_all

logger = logging.getLogger(__name__)

BLOCK = 15
TEMPLATE_BINS = slice(5, 10)      # middle third, all five rings
TEMPLATE_AMPLITUDE = 0.8
FOREGROUND_CLASS = 'foreground'
BAYES_DRAWS = 100_000


@dataclass(frozen=True)
class SynthSpec:
    K_true: int = 3
    proposals_per_cluster: int = 67
    d_f: int = 8
    separation: float = 6.0
    sigma: float = 1.0
    signal_strength: float = 1.0
    interaction_noise: float = 0.02
    n_images: int = 20
    proposals_per_image: int = 12
    image_width: int = 120
    image_height: int = 120
    foreground_cluster: int = 0
    seed: int = 0

    @property
    def n_proposals(self) -> int:
        return self.K_true * self.proposals_per_cluster

    @property
    def d_h(self) -> int:
        return BLOCK * self.K_true

    def validate(self) -> 'SynthSpec':
        for name in ('K_true', 'proposals_per_cluster', 'd_f', 'n_images', 'proposals_per_image',
                     'image_width', 'image_height'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be >= 1, got {getattr(self, name)}')
        if not self.sigma > 0:
            raise ConfigError(f'sigma must be positive, got {self.sigma}')
        if self.separation < 0 or self.interaction_noise < 0:
            raise ConfigError('separation and interaction_noise must be >= 0')
        if not 0 <= self.signal_strength <= 1:
            raise ConfigError(f'signal_strength must lie in [0, 1], got {self.signal_strength}')
        if self.d_f < self.K_true - 1:
            raise ConfigError(f'd_f={self.d_f} cannot hold {self.K_true} equidistant centers')
        if not 0 <= self.foreground_cluster < self.K_true:
            raise ConfigError(f'foreground_cluster must lie in [0, {self.K_true})')
        if math.ceil(self.n_proposals / self.n_images) > self.proposals_per_image:
            raise ConfigError(
                f'{self.n_proposals} proposals do not fit {self.n_images} images '
                f'of {self.proposals_per_image} proposals'
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'SynthSpec':
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True, eq=False)
class PlantedDataset:
    dataset: List[ImageRecord]
    labels: np.ndarray                  # per proposal, dataset order
    foreground: Dict[str, Region]       # image_id -> planted foreground region
    centers: np.ndarray                 # K_true x d_f
    spec: SynthSpec

    def to_truth_dict(self) -> dict:
        keys = [(img.image_id, p.proposal_id) for img in self.dataset for p in img.proposals]
        return {
            'class_name': FOREGROUND_CLASS,
            'labels': [
                {'image_id': img, 'proposal_id': pid, 'label': int(label)}
                for (img, pid), label in zip(keys, self.labels)
            ],
            'foreground': {image_id: region.to_dict() for image_id, region in self.foreground.items()},
            'centers': self.centers.tolist(),
        }


def simplex_centers(K: int, d_f: int, distance: float) -> np.ndarray:
    """K points in R^d_f, centered at the origin, all pairwise distances equal."""
    if K == 1:
        return np.zeros((1, d_f))
    vertices = np.eye(K) - 1.0 / K
    u, s, _ = np.linalg.svd(vertices)
    coords = u[:, :K - 1] * s[:K - 1]                  # pairwise distance sqrt(2)
    centers = np.zeros((K, d_f))
    centers[:, :K - 1] = coords * (distance / np.sqrt(2.0))
    return centers


def interaction_templates(spec: SynthSpec) -> np.ndarray:
    """K_true x d_h template patterns; clusters past the signal cut get zeros."""
    templates = np.zeros((spec.K_true, spec.d_h))
    n_signal = int(round(spec.signal_strength * spec.K_true))
    width = TEMPLATE_BINS.stop - TEMPLATE_BINS.start
    for k in range(n_signal):
        block = slice(k * BLOCK + TEMPLATE_BINS.start, k * BLOCK + TEMPLATE_BINS.stop)
        templates[k, block] = TEMPLATE_AMPLITUDE / width
    return templates


def _cap_blocks(h: np.ndarray) -> np.ndarray:
    blocks = h.reshape(h.shape[0], -1, BLOCK)
    sums = blocks.sum(axis=2, keepdims=True)
    scale = np.where(sums > 1.0, 1.0 / np.maximum(sums, 1e-300), 1.0)
    return (blocks * scale).reshape(h.shape)


def _grid_shape(per_image: int):
    rows = math.ceil(math.sqrt(per_image))
    return rows, math.ceil(per_image / rows)


def generate(spec: SynthSpec) -> PlantedDataset:
    """
    Build a planted dataset. Fully determined by spec (including its seed).

    Returns:
        PlantedDataset: images, per-proposal planted labels in dataset order,
        per-image planted foreground regions and the appearance centers
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_proposals

    centers = simplex_centers(spec.K_true, spec.d_f, spec.separation * spec.sigma)
    templates = interaction_templates(spec)

    labels = rng.permutation(np.repeat(np.arange(spec.K_true), spec.proposals_per_cluster))
    F = centers[labels] + spec.sigma * rng.standard_normal((n, spec.d_f))
    noise = spec.interaction_noise * rng.random((n, spec.d_h))
    H = _cap_blocks(np.clip(templates[labels] + noise, 0.0, 1.0))

    rows, cols = _grid_shape(spec.proposals_per_image)
    dataset, planted_labels, foreground = [], [], {}
    for m in range(spec.n_images):
        members = np.arange(m, n, spec.n_images)
        if members.size == 0:
            continue
        image_id = f'synth_{m:04d}'
        boxes = make_grid_proposals(image_id, spec.image_width, spec.image_height, rows, cols)
        proposals = [
            box.with_features(appearance=F[j], interaction=H[j])
            for box, j in zip(boxes, members)
        ]
        fg = [Region.from_box(p.bbox, spec.image_width, spec.image_height)
              for p, j in zip(proposals, members) if labels[j] == spec.foreground_cluster]
        ground_truth = {}
        if fg:
            region = union_all(fg, spec.image_width, spec.image_height)
            foreground[image_id] = region
            ground_truth[FOREGROUND_CLASS] = GroundTruth(mask=tuple(region.to_rle()))
        dataset.append(ImageRecord(
            image_id=image_id,
            width=spec.image_width,
            height=spec.image_height,
            proposals=tuple(proposals),
            ground_truth=ground_truth,
        ))
        planted_labels.extend(int(labels[j]) for j in members)

    logger.info(f'Generated {n} proposals in {len(dataset)} images (K_true={spec.K_true}, seed={spec.seed})')
    return PlantedDataset(
        dataset=dataset,
        labels=np.array(planted_labels, dtype=int),
        foreground=foreground,
        centers=centers,
        spec=spec,
    )


def bayes_accuracy(spec: SynthSpec, draws: int = BAYES_DRAWS, seed: int = 0) -> float:
    """
    Monte-Carlo accuracy of the optimal classifier for the planted appearance
    mixture. With equal weights and a shared isotropic covariance that is
    the nearest-center rule (lowest index on ties).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    centers = simplex_centers(spec.K_true, spec.d_f, spec.separation * spec.sigma)
    truth = rng.integers(spec.K_true, size=draws)
    X = centers[truth] + spec.sigma * rng.standard_normal((draws, spec.d_f))
    dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(dist, axis=1) == truth))
