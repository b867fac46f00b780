"""
adagrad.py
----------
Projected Adagrad ascent on the encoder weights lambda, with an L2 penalty
-(reg_lambda / 2) * ||lambda||^2.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from backend.core.errors import DimensionMismatchError
from backend.core.models import EncoderParams
from backend.processing.crf_encoder import CouplingLimit

ADAGRAD_EPS = 1e-8


@dataclass
class AdagradState:
    """Per-coordinate accumulated squared gradients (flat, EncoderParams order)."""

    learning_rate: float
    accumulator: Optional[np.ndarray] = None
    eps: float = ADAGRAD_EPS
    steps: int = 0

    def ensure(self, size: int) -> np.ndarray:
        if self.accumulator is None:
            self.accumulator = np.zeros(size)
        elif self.accumulator.size != size:
            raise DimensionMismatchError(
                f'accumulator has {self.accumulator.size} entries, gradient has {size}'
            )
        return self.accumulator


def adagrad_step(params: EncoderParams, grads: EncoderParams, reg_lambda: float,
                 state: AdagradState, epsilon_p: float,
                 limit: Optional[CouplingLimit] = None) -> EncoderParams:
    """
    One projected Adagrad ascent step.

        g   = grad - reg_lambda * lambda
        acc = acc + g^2
        lambda = project(lambda + lr * g / sqrt(acc + eps))

    The projection keeps interaction weights >= 0, pairwise weights
    >= epsilon_p and every bias >= 0. With a coupling limit the pairwise
    blocks are also projected, in the step's own per-coordinate metric,
    onto the set where mean field contracts. state is updated in place.
    """
    current = params.to_vector()
    g = grads.to_vector()
    if g.shape != current.shape:
        raise DimensionMismatchError(f'gradient has {g.size} coordinates, params have {current.size}')

    g = g - reg_lambda * current
    acc = state.ensure(g.size)
    acc += g ** 2
    rates = state.learning_rate / np.sqrt(acc + state.eps)
    stepped = current + rates * g
    state.steps += 1
    projected = params.from_vector(stepped).project(epsilon_p)
    if limit is None:
        return projected

    stepped_params = params.from_vector(stepped)
    rate_params = params.from_vector(rates)
    blocks = limit.project(
        np.hstack([stepped_params.lambda_p_obj, stepped_params.lambda_p_int]),
        np.hstack([rate_params.lambda_p_obj, rate_params.lambda_p_int]),
        np.array([epsilon_p, 0.0, epsilon_p, 0.0]),
    )
    return EncoderParams(projected.lambda_uo, projected.lambda_uh, blocks[:, :2], blocks[:, 2:])
