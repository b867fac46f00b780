"""
coseg_metric.py
---------------
Co-segmentation scoring:
- iou: exact pixel intersection-over-union of two regions
- coseg_score: for each cluster k, mean IoU between ground truth and the
  cluster's selected region over all images; the best cluster wins
- adjusted_rand: partition agreement against planted labels
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import adjusted_rand_score

from backend.core.errors import DatasetValidationError
from backend.core.models import ImageRecord
from backend.evaluation.regions import Region

logger = logging.getLogger(__name__)


def iou(a: Region, b: Region) -> float:
    """|a & b| / |a | b|; 0 when both regions are empty."""
    union = a.union_area(b)
    if union == 0:
        return 0.0
    return a.intersection_area(b) / union


@dataclass
class ScoreReport:
    score: float
    best_k: int
    per_cluster: List[float]
    per_image: Dict[str, List[float]] = field(default_factory=dict)
    class_name: Optional[str] = None
    ari: Optional[float] = None

    def to_dict(self) -> dict:
        out = {
            'score': self.score,
            'best_k': self.best_k,
            'per_cluster': list(self.per_cluster),
            'per_image': {image_id: list(v) for image_id, v in self.per_image.items()},
            'per_image_best': {image_id: v[self.best_k] for image_id, v in self.per_image.items()},
        }
        if self.class_name is not None:
            out['class_name'] = self.class_name
        if self.ari is not None:
            out['ari'] = self.ari
        return out

    def to_frame(self) -> pd.DataFrame:
        """One row per image, one IoU column per cluster."""
        frame = pd.DataFrame.from_dict(self.per_image, orient='index',
                                       columns=[f'iou_k{k}' for k in range(len(self.per_cluster))])
        frame.index.name = 'image_id'
        return frame


def coseg_score(selections: Mapping[str, Mapping[int, Region]],
                ground_truth: Mapping[str, Region], K: int) -> ScoreReport:
    """
    max_k of the mean over images of IoU(GT_i, R_i^k).

    Args:
        selections: image_id -> {cluster: region}; a missing cluster counts as empty
        ground_truth: image_id -> ground-truth region (defines the image set)
        K: Number of clusters

    Returns:
        ScoreReport: best score, its cluster (lowest k on ties), per-cluster
        means and per-image IoUs
    """
    if not ground_truth:
        raise DatasetValidationError('cannot score an empty image set')

    per_image = {}
    for image_id in sorted(ground_truth):
        gt = ground_truth[image_id]
        chosen = selections.get(image_id, {})
        row = []
        for k in range(K):
            region = chosen.get(k)
            if region is None:
                region = Region.empty(gt.width, gt.height)
            row.append(iou(gt, region))
        per_image[image_id] = row

    table = np.array(list(per_image.values()), dtype=np.float64).reshape(len(per_image), K)
    per_cluster = table.mean(axis=0) if K > 0 else np.zeros(0)
    best_k = int(np.argmax(per_cluster)) if K > 0 else 0
    score = float(per_cluster[best_k]) if K > 0 else 0.0

    logger.info(f'Co-segmentation score {score:.4f} (cluster {best_k}) over {len(per_image)} images')
    return ScoreReport(score=score, best_k=best_k,
                       per_cluster=[float(v) for v in per_cluster], per_image=per_image)


def ground_truth_regions(dataset: Sequence[ImageRecord], class_name: Optional[str] = None):
    """
    image_id -> ground-truth region for one class.

    With class_name None the first class named in the dataset is used.
    Images without that class are left out.

    Returns:
        tuple: (class_name, {image_id: Region})
    """
    if class_name is None:
        for image in dataset:
            if image.ground_truth:
                class_name = sorted(image.ground_truth)[0]
                break
    regions = {}
    for image in dataset:
        gt = image.ground_truth.get(class_name) if class_name is not None else None
        if gt is not None:
            regions[image.image_id] = Region.from_ground_truth(gt, image.width, image.height)
    return class_name, regions


def adjusted_rand(labels_true, labels_pred) -> float:
    return float(adjusted_rand_score(np.asarray(labels_true), np.asarray(labels_pred)))
