import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from backend.core.models import BoundingBox, ImageRecord, ProposalRecord  # noqa: E402
from backend.data_collection.synth_generator import SynthSpec, generate  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_image():
    """Image whose proposals are 10x10 boxes laid left to right, one per feature row."""

    def build(image_id, appearances, interactions=None, width=None, height=20, **extra):
        appearances = np.atleast_2d(np.asarray(appearances, dtype=np.float64))
        n = len(appearances)
        width = width or 10 * n
        proposals = []
        for i in range(n):
            proposals.append(ProposalRecord(
                image_id=image_id,
                proposal_id=f'p{i}',
                bbox=BoundingBox(10 * i, 0, 10, 10),
                appearance=appearances[i],
                interaction=None if interactions is None else interactions[i],
            ))
        return ImageRecord(image_id=image_id, width=width, height=height, proposals=proposals, **extra)

    return build


@pytest.fixture(scope='session')
def small_planted():
    """Two well separated clusters, 40 proposals in 8 images."""
    return generate(SynthSpec(K_true=2, proposals_per_cluster=20, d_f=4, separation=8.0,
                              n_images=8, proposals_per_image=6, seed=7))


@pytest.fixture(scope='session')
def benchmark_spec():
    return SynthSpec(K_true=3, proposals_per_cluster=67, d_f=8, separation=6.0, sigma=1.0)
