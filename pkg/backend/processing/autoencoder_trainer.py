"""
autoencoder_trainer.py
----------------------
Learning and inference for the fully connected CRF auto-encoder:
- train: block-coordinate ascent (mean field -> Adagrad on lambda -> EM on theta)
- infer: per-proposal cluster distributions under frozen parameters
- select_foregrounds: per image and cluster, the region to report
- sweep_clusters: retrain and score over several cluster counts

Usage:
    from backend.processing.autoencoder_trainer import train, infer
"""

import hashlib
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pythonjsonlogger import jsonlogger
from tqdm import tqdm

from backend.core.errors import ConfigError, DatasetValidationError, DimensionMismatchError
from backend.core.models import (
    FORMAT_VERSION, EncoderParams, ImageRecord, MeanFieldState, ProposalFeatures,
    ReconstructionParams, TrainConfig,
)
from backend.evaluation.coseg_metric import coseg_score, ground_truth_regions
from backend.evaluation.regions import Region, union_all
from backend.processing.adagrad import AdagradState, adagrad_step
from backend.processing.crf_encoder import coupling_limit, free_energy, gradients, mean_field
from backend.processing.hoi_features import estimate_bandwidth, similarity_matrix
from backend.processing.reconstruction import em_update, farthest_point_init

logger = logging.getLogger(__name__)
progress_logger = logging.getLogger('backend.progress')
progress_logger.propagate = False

IterationCallback = Callable[[int, MeanFieldState, EncoderParams, ReconstructionParams], None]


# ============================================
# MODEL CONTAINERS
# ============================================

@dataclass
class TrainedModel:
    encoder: EncoderParams
    reconstruction: ReconstructionParams
    config: TrainConfig
    bandwidths: Dict[str, float]
    trace: List[dict] = field(default_factory=list)
    state: Optional[MeanFieldState] = None
    keys: Tuple[Tuple[str, str], ...] = ()
    feature_digest: Optional[str] = None

    @property
    def K(self) -> int:
        return self.encoder.K

    @property
    def objective_trace(self) -> List[float]:
        return [row['objective'] for row in self.trace]

    def to_dict(self) -> dict:
        return {
            'format_version': FORMAT_VERSION,
            'encoder': self.encoder.to_dict(),
            'reconstruction': self.reconstruction.to_dict(),
            'config': self.config.to_dict(),
            'bandwidths': dict(self.bandwidths),
            'trace': [dict(row) for row in self.trace],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainedModel':
        """Model from a saved document; the mean-field state is not stored."""
        return cls(
            encoder=EncoderParams.from_dict(data['encoder']),
            reconstruction=ReconstructionParams.from_dict(data['reconstruction']),
            config=TrainConfig.from_dict(data['config']),
            bandwidths={k: float(v) for k, v in data['bandwidths'].items()},
            trace=list(data.get('trace', [])),
        )


@dataclass
class ProposalDistributions:
    """Row i holds p(y_i = k | X, X_hat) for the proposal keys[i]."""

    keys: Tuple[Tuple[str, str], ...]
    Q: np.ndarray

    def argmax(self) -> np.ndarray:
        return np.argmax(self.Q, axis=1)

    def rows_for(self, image_id: str) -> List[int]:
        return [i for i, (img, _) in enumerate(self.keys) if img == image_id]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.Q, columns=[f'q_k{k}' for k in range(self.Q.shape[1])])
        frame.insert(0, 'proposal_id', [pid for _, pid in self.keys])
        frame.insert(0, 'image_id', [img for img, _ in self.keys])
        frame['cluster'] = self.argmax()
        return frame

    def to_dict(self) -> dict:
        return {
            'rows': [
                {'image_id': img, 'proposal_id': pid, 'q': self.Q[i].tolist()}
                for i, (img, pid) in enumerate(self.keys)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ProposalDistributions':
        rows = data['rows']
        keys = tuple((r['image_id'], r['proposal_id']) for r in rows)
        Q = np.array([r['q'] for r in rows], dtype=np.float64)
        return cls(keys=keys, Q=Q)


@dataclass
class ForegroundSelection:
    cluster: int
    proposal_ids: List[str]
    confidence: List[float]
    region: Region

    def to_dict(self) -> dict:
        return {
            'cluster': self.cluster,
            'proposal_ids': list(self.proposal_ids),
            'confidence': list(self.confidence),
            'region': self.region.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ForegroundSelection':
        return cls(
            cluster=int(data['cluster']),
            proposal_ids=list(data['proposal_ids']),
            confidence=[float(c) for c in data['confidence']],
            region=Region.from_dict(data['region']),
        )


# ============================================
# HELPERS
# ============================================

def feature_digest(features: ProposalFeatures) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(features.F).tobytes())
    digest.update(np.ascontiguousarray(features.H).tobytes())
    return digest.hexdigest()


def resolve_bandwidths(features: ProposalFeatures, config: TrainConfig) -> Dict[str, float]:
    def resolve(value, X):
        if value != 'auto':
            return float(value)
        if X.shape[0] < 2 or X.shape[1] == 0:
            return 1.0
        return estimate_bandwidth(X)

    return {
        'delta_f': resolve(config.delta_f, features.F),
        'delta_h': resolve(config.delta_h, features.H),
    }


def similarity_tables(features: ProposalFeatures, config: TrainConfig,
                      bandwidths: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    """Appearance and interaction similarity channels (identity when disabled)."""
    n = features.N
    if not config.use_pairwise:
        return np.eye(n), np.eye(n)
    S_obj = similarity_matrix(features.F, bandwidths['delta_f'])
    if config.use_interaction and features.d_h > 0:
        S_int = similarity_matrix(features.H, bandwidths['delta_h'])
    else:
        S_int = np.eye(n)
    return S_obj, S_int


@contextmanager
def progress_log(path: Optional[str]):
    """Attach a JSON-lines file handler to the progress logger for one run."""
    if path is None:
        yield progress_logger
        return
    handler = logging.FileHandler(path, mode='w', encoding='utf-8')
    handler.setFormatter(jsonlogger.JsonFormatter('%(message)s'))
    progress_logger.addHandler(handler)
    progress_logger.setLevel(logging.INFO)
    try:
        yield progress_logger
    finally:
        progress_logger.removeHandler(handler)
        handler.close()


def dataset_features(dataset: Sequence[ImageRecord], config: TrainConfig) -> ProposalFeatures:
    features = ProposalFeatures.from_dataset(dataset, use_interaction=config.use_interaction)
    if not (np.all(np.isfinite(features.F)) and np.all(np.isfinite(features.H))):
        raise DatasetValidationError('dataset contains non-finite features')
    return features


# ============================================
# TRAINING
# ============================================

def train(dataset: Sequence[ImageRecord], config: TrainConfig,
          progress_path: Optional[str] = None,
          callback: Optional[IterationCallback] = None,
          silent: bool = True) -> TrainedModel:
    """
    Learn lambda and theta by alternating mean field, one projected Adagrad
    step on lambda and one EM step on theta per outer iteration.

    Stops after outer_iters iterations, or earlier once the free-energy
    objective changes by less than rel_tol relative to its magnitude.

    Args:
        dataset: Validated image records
        config: Training settings
        progress_path: Optional JSON-lines progress log, one record per iteration
        callback: Called after mean field in every iteration with
                  (iteration, state, encoder, reconstruction)
        silent: Hide the progress bar

    Returns:
        TrainedModel
    """
    config.validate()
    features = dataset_features(dataset, config)
    n, K = features.N, config.K
    if n < K:
        raise ConfigError(f'K={K} exceeds the number of proposals N={n} (need N >= K)')

    start_time = time.perf_counter()
    logger.info(f'Training on {n} proposals, K={K}, D_f={features.d_f}, D_h={features.d_h}')

    bandwidths = resolve_bandwidths(features, config)
    S_obj, S_int = similarity_tables(features, config, bandwidths)
    limit = coupling_limit(S_obj, S_int, config.mf_contraction)
    logger.debug(f'Coupling limit: row sums {limit.obj_row_sum:.3f} / {limit.int_row_sum:.3f}, '
                 f'contraction {limit.contraction}')
    xhat = features.xhat

    encoder = EncoderParams.initial(K, features.d_f, features.d_h, config.epsilon_p)
    theta = farthest_point_init(xhat, K, config.variance_floor, config.seed)
    optimizer = AdagradState(learning_rate=config.learning_rate)

    trace = []
    previous = None
    with progress_log(progress_path) as progress:
        for iteration in tqdm(range(config.outer_iters), desc='Training', disable=silent):
            state = mean_field(encoder, theta, features, S_obj, S_int,
                               config.mf_max_sweeps, config.mf_tol)
            log_z, log_z_prime = free_energy(state, encoder, theta, features)
            objective = (log_z - log_z_prime
                         - 0.5 * config.reg_lambda * float(np.sum(encoder.to_vector() ** 2)))
            record = {
                'iteration': iteration,
                'log_z': log_z,
                'log_z_prime': log_z_prime,
                'objective': objective,
                'max_delta_q': state.max_delta,
                'sweeps': state.sweeps,
            }
            trace.append(record)
            progress.info('outer_iteration', extra={
                **record, 'wall_time': time.perf_counter() - start_time,
            })
            if callback is not None:
                callback(iteration, state, encoder, theta)

            if config.learn_encoder:
                grads = gradients(state, features)
                encoder = adagrad_step(encoder, grads, config.reg_lambda, optimizer, config.epsilon_p,
                                       limit=limit)
            theta = em_update(state.Q, xhat, config.variance_floor)

            if previous is not None and abs(objective - previous) < config.rel_tol * abs(objective):
                logger.info(f'Objective converged after {iteration + 1} iterations')
                break
            previous = objective

    final_state = mean_field(encoder, theta, features, S_obj, S_int,
                             config.mf_max_sweeps, config.mf_tol)
    elapsed = time.perf_counter() - start_time
    logger.info(f'Training finished in {elapsed:.2f}s ({len(trace)} iterations)')

    return TrainedModel(
        encoder=encoder,
        reconstruction=theta,
        config=config,
        bandwidths=bandwidths,
        trace=trace,
        state=final_state,
        keys=features.keys,
        feature_digest=feature_digest(features),
    )


# ============================================
# INFERENCE
# ============================================

def infer(model: TrainedModel, dataset: Sequence[ImageRecord]) -> ProposalDistributions:
    """
    Cluster distributions Q_i for every proposal under the model's frozen
    parameters. On the training set this is the model's final Q; any other
    dataset gets its own mean-field run.
    """
    features = dataset_features(dataset, model.config)
    if features.d_f != model.encoder.d_f or features.d_h != model.encoder.d_h:
        raise DimensionMismatchError(
            f'dataset has D_f={features.d_f}, D_h={features.d_h}; '
            f'model expects D_f={model.encoder.d_f}, D_h={model.encoder.d_h}'
        )

    if (model.state is not None and features.keys == model.keys
            and feature_digest(features) == model.feature_digest):
        return ProposalDistributions(keys=features.keys, Q=np.array(model.state.Q))

    S_obj, S_int = similarity_tables(features, model.config, model.bandwidths)
    state = mean_field(model.encoder, model.reconstruction, features, S_obj, S_int,
                       model.config.mf_max_sweeps, model.config.mf_tol)
    logger.info(f'Inferred {features.N} proposals in {state.sweeps} sweeps')
    return ProposalDistributions(keys=features.keys, Q=np.array(state.Q))


def select_foregrounds(distributions: ProposalDistributions, dataset: Sequence[ImageRecord],
                       mode: str = 'top1') -> Dict[str, List[ForegroundSelection]]:
    """
    Foreground region per image and cluster.

    top1:  the proposal with the highest Q_i(k) in the image (lowest index on ties)
    union: pixel union of the image's proposals whose argmax cluster is k

    Returns:
        dict: image_id -> one ForegroundSelection per cluster
    """
    if mode not in ('top1', 'union'):
        raise ConfigError(f'unknown foreground mode {mode!r}')
    row_of = {key: i for i, key in enumerate(distributions.keys)}
    K = distributions.Q.shape[1]
    labels = distributions.argmax()

    selections = {}
    for image in dataset:
        rows = []
        for p in image.proposals:
            key = (image.image_id, p.proposal_id)
            if key not in row_of:
                raise DimensionMismatchError(f'no distribution for proposal {key[0]}/{key[1]}')
            rows.append(row_of[key])
        regions = [Region.from_proposal(p, image.width, image.height) for p in image.proposals]
        per_cluster = []
        for k in range(K):
            if mode == 'top1':
                scores = distributions.Q[rows, k]
                best = int(np.argmax(scores))
                per_cluster.append(ForegroundSelection(
                    cluster=k,
                    proposal_ids=[image.proposals[best].proposal_id],
                    confidence=[float(scores[best])],
                    region=regions[best],
                ))
            else:
                members = [j for j, r in enumerate(rows) if labels[r] == k]
                per_cluster.append(ForegroundSelection(
                    cluster=k,
                    proposal_ids=[image.proposals[j].proposal_id for j in members],
                    confidence=[float(distributions.Q[rows[j], k]) for j in members],
                    region=union_all([regions[j] for j in members], image.width, image.height),
                ))
        selections[image.image_id] = per_cluster
    return selections


def selection_regions(selections: Dict[str, List[ForegroundSelection]]) -> Dict[str, Dict[int, Region]]:
    return {image_id: {s.cluster: s.region for s in chosen} for image_id, chosen in selections.items()}


# ============================================
# CLUSTER-COUNT SWEEP
# ============================================

def sweep_clusters(dataset: Sequence[ImageRecord], config: TrainConfig, ks: Sequence[int],
                   class_name: Optional[str] = None, silent: bool = True) -> pd.DataFrame:
    """
    Retrain for every K in ks and score each run against the dataset's
    ground truth.

    Returns:
        pd.DataFrame: columns K, score, best_k, objective, iterations
    """
    class_name, truth = ground_truth_regions(dataset, class_name)
    if not truth:
        raise DatasetValidationError('K sweep needs ground truth in the dataset')

    rows = []
    for K in ks:
        model = train(dataset, config.replace(K=int(K)), silent=silent)
        chosen = select_foregrounds(infer(model, dataset), dataset, config.foreground_mode)
        report = coseg_score(selection_regions(chosen), truth, int(K))
        rows.append({
            'K': int(K),
            'score': report.score,
            'best_k': report.best_k,
            'objective': model.objective_trace[-1],
            'iterations': len(model.trace),
        })
        logger.info(f'K={K}: score {report.score:.4f} ({class_name})')
    return pd.DataFrame(rows, columns=['K', 'score', 'best_k', 'objective', 'iterations'])
