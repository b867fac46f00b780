"""
proposals.py
------------
Fallback proposal generator: tiles an image into a rows x cols grid of
boxes when no precomputed proposals are available. Features are left
unset for the featurizer or manifest ingestion to fill in.
"""

from typing import List

import numpy as np

from backend.core.errors import ConfigError
from backend.core.models import BoundingBox, ProposalRecord


def grid_edges(length: int, parts: int) -> np.ndarray:
    """parts+1 integer cut points; cell sizes differ by at most one pixel."""
    return (np.arange(parts + 1) * length) // parts


def make_grid_proposals(image_id: str, width: int, height: int,
                        rows: int, cols: int) -> List[ProposalRecord]:
    """
    Partition a width x height image into rows x cols non-overlapping boxes.

    Args:
        image_id: Owning image
        width, height: Image dimensions in pixels
        rows, cols: Grid shape (>= 1)

    Returns:
        list: ProposalRecord skeletons in row-major order, bbox only
    """
    if width <= 0 or height <= 0:
        raise ConfigError(f'image {image_id} has zero dimension ({width}x{height})')
    if rows < 1 or cols < 1:
        raise ConfigError(f'grid must be at least 1x1, got {rows}x{cols}')
    if rows > height or cols > width:
        raise ConfigError(f'{rows}x{cols} grid does not fit a {width}x{height} image')

    xs = grid_edges(width, cols)
    ys = grid_edges(height, rows)

    proposals = []
    for r in range(rows):
        for c in range(cols):
            box = BoundingBox(int(xs[c]), int(ys[r]), int(xs[c + 1] - xs[c]), int(ys[r + 1] - ys[r]))
            proposals.append(ProposalRecord(
                image_id=image_id,
                proposal_id=f'grid_{r}_{c}',
                bbox=box,
            ))
    return proposals
