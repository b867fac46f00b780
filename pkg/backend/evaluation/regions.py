"""
regions.py
----------
Pixel regions inside an image frame: filled boxes and run-length masks.

Run-length masks are lists of alternating (skip, run) pixel counts in
row-major order, starting with a skip (which may be 0). Pixels after the
last run are background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from backend.core.errors import DimensionMismatchError
from backend.core.models import BoundingBox, GroundTruth, ProposalRecord


def rle_encode(mask: np.ndarray) -> List[int]:
    """Encode a boolean H x W mask as alternating (skip, run) counts."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0 or not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = changes[0::2], changes[1::2]
    counts = []
    cursor = 0
    for start, end in zip(starts, ends):
        counts.append(int(start - cursor))
        counts.append(int(end - start))
        cursor = end
    return counts


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Decode (skip, run) counts into a boolean height x width mask."""
    total = height * width
    flat = np.zeros(total, dtype=bool)
    cursor = 0
    for i, count in enumerate(counts):
        count = int(count)
        if count < 0:
            raise DimensionMismatchError(f'negative run length at position {i}')
        if cursor + count > total:
            raise DimensionMismatchError(
                f'run-length mask covers {cursor + count} pixels, frame has {total}'
            )
        if i % 2 == 1:
            flat[cursor:cursor + count] = True
        cursor += count
    return flat.reshape(height, width)


def rle_area(counts: Sequence[int]) -> int:
    return int(sum(int(c) for c in counts[1::2]))


@dataclass(frozen=True, eq=False)
class Region:
    """Boolean pixel set inside a width x height frame."""

    width: int
    height: int
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.shape != (self.height, self.width):
            raise DimensionMismatchError(
                f'mask shape {mask.shape} does not match frame {self.height}x{self.width}'
            )
        mask.setflags(write=False)
        object.__setattr__(self, 'mask', mask)

    @classmethod
    def empty(cls, width: int, height: int) -> 'Region':
        return cls(width, height, np.zeros((height, width), dtype=bool))

    @classmethod
    def from_box(cls, box: BoundingBox, width: int, height: int) -> 'Region':
        """Filled rectangle, clipped to the frame."""
        mask = np.zeros((height, width), dtype=bool)
        x0, y0 = max(box.x, 0), max(box.y, 0)
        x1, y1 = min(box.x_end, width), min(box.y_end, height)
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = True
        return cls(width, height, mask)

    @classmethod
    def from_rle(cls, counts: Sequence[int], width: int, height: int) -> 'Region':
        return cls(width, height, rle_decode(counts, height, width))

    @classmethod
    def from_proposal(cls, proposal: ProposalRecord, width: int, height: int) -> 'Region':
        """Proposal mask when present, otherwise its filled bbox."""
        if proposal.mask is not None:
            return cls.from_rle(proposal.mask, width, height)
        return cls.from_box(proposal.bbox, width, height)

    @classmethod
    def from_ground_truth(cls, gt: GroundTruth, width: int, height: int) -> 'Region':
        if gt.mask is not None:
            return cls.from_rle(gt.mask, width, height)
        if gt.bbox is not None:
            return cls.from_box(gt.bbox, width, height)
        return cls.empty(width, height)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def same_frame(self, other: 'Region') -> bool:
        return self.width == other.width and self.height == other.height

    def _check_frame(self, other: 'Region'):
        if not self.same_frame(other):
            raise DimensionMismatchError(
                f'frame mismatch: {self.width}x{self.height} vs {other.width}x{other.height}'
            )

    def union(self, other: 'Region') -> 'Region':
        self._check_frame(other)
        return Region(self.width, self.height, self.mask | other.mask)

    def intersection_area(self, other: 'Region') -> int:
        self._check_frame(other)
        return int(np.count_nonzero(self.mask & other.mask))

    def union_area(self, other: 'Region') -> int:
        self._check_frame(other)
        return int(np.count_nonzero(self.mask | other.mask))

    def to_rle(self) -> List[int]:
        return rle_encode(self.mask)

    def to_dict(self) -> dict:
        return {'width': self.width, 'height': self.height, 'mask': self.to_rle()}

    @classmethod
    def from_dict(cls, data: dict) -> 'Region':
        return cls.from_rle(data['mask'], int(data['width']), int(data['height']))


def union_all(regions: Iterable[Region], width: int, height: int) -> Region:
    """Pixel union of any number of regions; empty input gives the empty region."""
    out: Optional[np.ndarray] = None
    for region in regions:
        out = region.mask.copy() if out is None else (out | region.mask)
    if out is None:
        return Region.empty(width, height)
    return Region(width, height, out)
