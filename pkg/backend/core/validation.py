"""
validation.py
-------------
Checks a dataset against the domain invariants and reports every violation.

Violations are data, not failures: validate_dataset never raises on
parseable input. Callers that need a clean dataset turn a non-empty report
into DatasetValidationError (see require_valid).
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from backend.core.errors import DatasetValidationError
from backend.core.models import ImageRecord, SkeletonTopology
from backend.evaluation.regions import rle_area

logger = logging.getLogger(__name__)

BLOCK_SUM_TOLERANCE = 1e-9
HISTOGRAM_3D_BLOCK = 15
HISTOGRAM_2D_SIZE = 36


@dataclass(frozen=True)
class Violation:
    image_id: str
    proposal_id: Optional[str]
    rule: str
    detail: str

    def to_dict(self) -> dict:
        return {
            'image_id': self.image_id,
            'proposal_id': self.proposal_id,
            'rule': self.rule,
            'detail': self.detail,
        }

    def __str__(self):
        where = self.image_id if self.proposal_id is None else f'{self.image_id}/{self.proposal_id}'
        return f'{where}: {self.rule} ({self.detail})'


def infer_block_size(d_h: int) -> int:
    """Histogram block length of an interaction vector of length d_h."""
    if d_h == HISTOGRAM_2D_SIZE:
        return HISTOGRAM_2D_SIZE
    if d_h > 0 and d_h % HISTOGRAM_3D_BLOCK == 0:
        return HISTOGRAM_3D_BLOCK
    return max(d_h, 1)


def _most_common(values):
    counts = Counter(values)
    if not counts:
        return None
    # ties -> smallest value
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def _check_image(image: ImageRecord, d_f, d_h, block,
                 topology: Optional[SkeletonTopology] = None) -> List[Violation]:
    found = []

    def flag(proposal_id, rule, detail):
        found.append(Violation(image.image_id, proposal_id, rule, detail))

    if image.width <= 0 or image.height <= 0:
        flag(None, 'image-dimensions', f'{image.width}x{image.height}')
    if not image.proposals:
        flag(None, 'no-proposals', 'image has no proposals')

    for p in image.proposals:
        pid = p.proposal_id
        if p.image_id != image.image_id:
            flag(pid, 'image-id-mismatch', f'proposal says {p.image_id!r}')
        if p.bbox.area <= 0:
            flag(pid, 'bbox-area', f'bbox {p.bbox.to_list()} has no area')
        elif not p.bbox.inside(image.width, image.height):
            flag(pid, 'bbox-bounds', f'bbox {p.bbox.to_list()} leaves the image')
        if p.mask is not None:
            if any(c < 0 for c in p.mask):
                flag(pid, 'mask-counts', 'negative run length')
            elif sum(p.mask) > image.width * image.height:
                flag(pid, 'mask-bounds', 'run-length mask exceeds the image frame')
            elif rle_area(p.mask) == 0:
                flag(pid, 'mask-area', 'mask is empty')

        if p.appearance is None:
            flag(pid, 'missing-appearance', 'no appearance vector')
        else:
            if len(p.appearance) != d_f:
                flag(pid, 'appearance-dimension', f'D_f={len(p.appearance)}, dataset uses {d_f}')
            if not np.all(np.isfinite(p.appearance)):
                flag(pid, 'appearance-finite', 'non-finite appearance entry')

        if p.interaction is None:
            flag(pid, 'missing-interaction', 'no interaction vector')
            continue
        h = p.interaction
        if len(h) != d_h:
            flag(pid, 'interaction-dimension', f'D_h={len(h)}, dataset uses {d_h}')
            continue
        if not np.all(np.isfinite(h)):
            flag(pid, 'interaction-finite', 'non-finite interaction entry')
            continue
        if np.any(h < 0):
            flag(pid, 'interaction-nonnegative', f'min entry {float(h.min())}')
        if np.any(h > 1):
            flag(pid, 'interaction-range', f'max entry {float(h.max())}')
        for start in range(0, d_h, block):
            total = float(h[start:start + block].sum())
            if total > 1 + BLOCK_SUM_TOLERANCE:
                flag(pid, 'interaction-block-sum', f'block at {start} sums to {total}')

    for human_box in image.human_boxes:
        if human_box.area <= 0:
            flag(None, 'human-box-area', f'human box {human_box.to_list()} has no area')
    for n, human in enumerate(image.humans):
        for name, pos in human.joints.items():
            if pos.shape != (3,) or not np.all(np.isfinite(pos)):
                flag(None, 'skeleton-joint', f'human {n} joint {name!r} is not a finite 3D point')
        if topology is not None:
            missing = [name for name in topology.joints if name not in human.joints]
            if missing:
                flag(None, 'skeleton-missing-joint', f'human {n} lacks {", ".join(missing)}')
    return found


def validate_dataset(dataset: Sequence[ImageRecord], threads: int = 1,
                     topology: Optional[SkeletonTopology] = None) -> List[Violation]:
    """
    Check every type invariant of a dataset.

    The reference dimensions D_f and D_h are the most common ones in the
    dataset; proposals that disagree are reported.

    Args:
        dataset: Image records
        threads: Worker cap; the report does not depend on it
        topology: When given, every skeleton must carry each joint its parts name

    Returns:
        list: Violation entries in dataset order (empty when the dataset is clean)
    """
    proposals = [p for image in dataset for p in image.proposals]
    d_f = _most_common([len(p.appearance) for p in proposals if p.appearance is not None])
    d_h = _most_common([len(p.interaction) for p in proposals if p.interaction is not None])
    block = infer_block_size(d_h or 0)

    violations = []
    seen = Counter(image.image_id for image in dataset)
    for image_id, count in seen.items():
        if count > 1:
            violations.append(Violation(image_id, None, 'duplicate-image', f'{count} records'))

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for found in pool.map(lambda im: _check_image(im, d_f, d_h, block, topology), dataset):
            violations.extend(found)

    logger.info(f'Validated {len(dataset)} images / {len(proposals)} proposals: '
                f'{len(violations)} violations')
    return violations


def require_valid(dataset: Sequence[ImageRecord], threads: int = 1,
                  topology: Optional[SkeletonTopology] = None) -> None:
    """Raise DatasetValidationError when validate_dataset reports anything."""
    violations = validate_dataset(dataset, threads=threads, topology=topology)
    if violations:
        head = '; '.join(str(v) for v in violations[:3])
        more = f' (+{len(violations) - 3} more)' if len(violations) > 3 else ''
        raise DatasetValidationError(f'{len(violations)} violations: {head}{more}', violations)
