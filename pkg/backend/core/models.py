"""
models.py
---------
Domain types shared by every stage of the co-segmentation pipeline:
proposals, skeletons, images, model parameters, configuration and the
mean-field state.

All types are immutable once built. Array fields are stored read-only so
they can be shared between workers without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.config import Config
from backend.core.errors import ConfigError, DimensionMismatchError

FOREGROUND_MODES = ('top1', 'union')
FORMAT_VERSION = 1


def _frozen(values, dtype=np.float64, ndim=None):
    if values is None:
        return None
    arr = np.array(values, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        if arr.size == 0:
            arr = arr.reshape((0,) * (ndim - 1) + (0,)) if ndim > 1 else arr.reshape(0)
        else:
            raise DimensionMismatchError(f'expected a {ndim}-d array, got shape {arr.shape}')
    arr.setflags(write=False)
    return arr


def augment(v) -> np.ndarray:
    """[v, -1] along the last axis: lets the linear weights carry a bias."""
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([v, -np.ones(v.shape[:-1] + (1,))], axis=-1)


# ============================================
# GEOMETRY
# ============================================

@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel rectangle; covers columns [x, x+width) and rows [y, y+height)."""

    x: int
    y: int
    width: int
    height: int

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    @property
    def x_end(self) -> int:
        return self.x + self.width

    @property
    def y_end(self) -> int:
        return self.y + self.height

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x_end <= width and self.y_end <= height

    def to_list(self) -> List[int]:
        return [int(self.x), int(self.y), int(self.width), int(self.height)]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> 'BoundingBox':
        x, y, w, h = (int(v) for v in values)
        return cls(x, y, w, h)


@dataclass(frozen=True)
class GroundTruth:
    """Ground-truth foreground for one named class: a filled box or an RLE mask."""

    bbox: Optional[BoundingBox] = None
    mask: Optional[Tuple[int, ...]] = None

    def to_dict(self) -> dict:
        out = {}
        if self.bbox is not None:
            out['bbox'] = self.bbox.to_list()
        if self.mask is not None:
            out['mask'] = list(self.mask)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> 'GroundTruth':
        bbox = BoundingBox.from_list(data['bbox']) if data.get('bbox') is not None else None
        mask = tuple(int(c) for c in data['mask']) if data.get('mask') is not None else None
        return cls(bbox=bbox, mask=mask)


# ============================================
# PROPOSALS, HUMANS, IMAGES
# ============================================

@dataclass(frozen=True, eq=False)
class ProposalRecord:
    """One object proposal.

    appearance is the precomputed visual vector f, interaction the
    human-object interaction histogram h. Either may be None until the
    proposal has been featurized.
    """

    image_id: str
    proposal_id: str
    bbox: BoundingBox
    mask: Optional[Tuple[int, ...]] = None
    appearance: Optional[np.ndarray] = None
    interaction: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, 'appearance', _frozen(self.appearance, ndim=1))
        object.__setattr__(self, 'interaction', _frozen(self.interaction, ndim=1))
        if self.points is not None:
            pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
            pts.setflags(write=False)
            object.__setattr__(self, 'points', pts)
        if self.mask is not None:
            object.__setattr__(self, 'mask', tuple(int(c) for c in self.mask))

    def with_features(self, appearance=None, interaction=None) -> 'ProposalRecord':
        return replace(
            self,
            appearance=self.appearance if appearance is None else appearance,
            interaction=self.interaction if interaction is None else interaction,
        )

    def to_dict(self) -> dict:
        out = {
            'image_id': self.image_id,
            'proposal_id': self.proposal_id,
            'bbox': self.bbox.to_list(),
        }
        if self.mask is not None:
            out['mask'] = list(self.mask)
        if self.appearance is not None:
            out['appearance'] = self.appearance.tolist()
        if self.interaction is not None:
            out['interaction'] = self.interaction.tolist()
        if self.points is not None:
            out['points'] = self.points.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> 'ProposalRecord':
        return cls(
            image_id=str(data['image_id']),
            proposal_id=str(data['proposal_id']),
            bbox=BoundingBox.from_list(data['bbox']),
            mask=data.get('mask'),
            appearance=data.get('appearance'),
            interaction=data.get('interaction'),
            points=data.get('points'),
        )


@dataclass(frozen=True, eq=False)
class HumanSkeleton:
    """Tracked human: joint name -> 3D position in meters (camera frame)."""

    joints: Dict[str, np.ndarray]
    confidence: Optional[Dict[str, float]] = None

    def __post_init__(self):
        joints = {name: _frozen(pos, ndim=1) for name, pos in self.joints.items()}
        object.__setattr__(self, 'joints', joints)

    def to_dict(self) -> dict:
        out = {'joints': {name: pos.tolist() for name, pos in self.joints.items()}}
        if self.confidence is not None:
            out['confidence'] = dict(self.confidence)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> 'HumanSkeleton':
        return cls(joints=data['joints'], confidence=data.get('confidence'))


@dataclass(frozen=True)
class SkeletonTopology:
    """Ordered body parts; the order fixes the block layout of h."""

    parts: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        parts = tuple((str(a), str(b)) for a, b in self.parts)
        if len(set(parts)) != len(parts):
            raise ConfigError('skeleton topology has repeated parts')
        object.__setattr__(self, 'parts', parts)

    @property
    def P(self) -> int:
        return len(self.parts)

    @property
    def joints(self) -> Tuple[str, ...]:
        """Every joint the parts mention, in first-use order."""
        return tuple(dict.fromkeys(name for part in self.parts for name in part))

    def to_list(self) -> List[List[str]]:
        return [list(p) for p in self.parts]

    @classmethod
    def from_list(cls, parts) -> 'SkeletonTopology':
        return cls(tuple(tuple(p) for p in parts))


# Kinect v2 body tree, 18 parts
DEFAULT_TOPOLOGY = SkeletonTopology((
    ('head', 'neck'),
    ('neck', 'spine_shoulder'),
    ('spine_shoulder', 'spine_mid'),
    ('spine_mid', 'spine_base'),
    ('spine_shoulder', 'shoulder_right'),
    ('shoulder_right', 'elbow_right'),
    ('elbow_right', 'wrist_right'),
    ('wrist_right', 'hand_right'),
    ('spine_shoulder', 'shoulder_left'),
    ('shoulder_left', 'elbow_left'),
    ('elbow_left', 'wrist_left'),
    ('wrist_left', 'hand_left'),
    ('spine_base', 'hip_right'),
    ('hip_right', 'knee_right'),
    ('knee_right', 'ankle_right'),
    ('spine_base', 'hip_left'),
    ('hip_left', 'knee_left'),
    ('knee_left', 'ankle_left'),
))


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image with its proposals, humans and optional ground truth.

    humans holds HumanSkeleton entries (3D data) and human_boxes holds
    person-detector rectangles (RGB-only data).
    """

    image_id: str
    width: int
    height: int
    proposals: Tuple[ProposalRecord, ...]
    humans: Tuple[HumanSkeleton, ...] = ()
    human_boxes: Tuple[BoundingBox, ...] = ()
    ground_truth: Dict[str, GroundTruth] = field(default_factory=dict)
    depth_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'proposals', tuple(self.proposals))
        object.__setattr__(self, 'humans', tuple(self.humans))
        object.__setattr__(self, 'human_boxes', tuple(self.human_boxes))

    def with_proposals(self, proposals) -> 'ImageRecord':
        return replace(self, proposals=tuple(proposals))

    def to_dict(self) -> dict:
        out = {
            'image_id': self.image_id,
            'width': int(self.width),
            'height': int(self.height),
            'proposals': [p.to_dict() for p in self.proposals],
        }
        if self.humans:
            out['humans'] = [h.to_dict() for h in self.humans]
        if self.human_boxes:
            out['human_boxes'] = [b.to_list() for b in self.human_boxes]
        if self.ground_truth:
            out['ground_truth'] = {name: gt.to_dict() for name, gt in self.ground_truth.items()}
        if self.depth_path is not None:
            out['depth_path'] = self.depth_path
        return out

    @classmethod
    def from_dict(cls, data: dict) -> 'ImageRecord':
        return cls(
            image_id=str(data['image_id']),
            width=int(data['width']),
            height=int(data['height']),
            proposals=tuple(ProposalRecord.from_dict(p) for p in data.get('proposals', [])),
            humans=tuple(HumanSkeleton.from_dict(h) for h in data.get('humans', [])),
            human_boxes=tuple(BoundingBox.from_list(b) for b in data.get('human_boxes', [])),
            ground_truth={
                name: GroundTruth.from_dict(gt)
                for name, gt in (data.get('ground_truth') or {}).items()
            },
            depth_path=data.get('depth_path'),
        )


# ============================================
# FEATURE TABLES
# ============================================

@dataclass(frozen=True, eq=False)
class ProposalFeatures:
    """Row-stacked proposal features for one dataset (N rows, dataset order)."""

    F: np.ndarray
    H: np.ndarray
    keys: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        F = _frozen(self.F, ndim=2)
        H = _frozen(self.H, ndim=2)
        if H.shape[0] == 0 and F.shape[0] > 0 and H.size == 0:
            H = _frozen(np.zeros((F.shape[0], 0)), ndim=2)
        if F.shape[0] != H.shape[0]:
            raise DimensionMismatchError(
                f'appearance has {F.shape[0]} rows but interaction has {H.shape[0]}'
            )
        object.__setattr__(self, 'F', F)
        object.__setattr__(self, 'H', H)
        object.__setattr__(self, 'keys', tuple(self.keys))

    @property
    def N(self) -> int:
        return self.F.shape[0]

    @property
    def d_f(self) -> int:
        return self.F.shape[1]

    @property
    def d_h(self) -> int:
        return self.H.shape[1]

    @property
    def F_aug(self) -> np.ndarray:
        return augment(self.F)

    @property
    def H_aug(self) -> np.ndarray:
        return augment(self.H)

    @property
    def xhat(self) -> np.ndarray:
        """Reconstruction target: un-augmented [f; h]."""
        return np.hstack([self.F, self.H])

    @classmethod
    def from_dataset(cls, dataset: Sequence[ImageRecord], use_interaction: bool = True):
        rows_f, rows_h, keys = [], [], []
        for image in dataset:
            for p in image.proposals:
                if p.appearance is None:
                    raise DimensionMismatchError(
                        f'proposal {image.image_id}/{p.proposal_id} has no appearance features'
                    )
                rows_f.append(p.appearance)
                if use_interaction:
                    if p.interaction is None:
                        raise DimensionMismatchError(
                            f'proposal {image.image_id}/{p.proposal_id} has no interaction features'
                        )
                    rows_h.append(p.interaction)
                keys.append((image.image_id, p.proposal_id))
        if len({len(r) for r in rows_f}) > 1 or len({len(r) for r in rows_h}) > 1:
            raise DimensionMismatchError('proposals do not share feature dimensions')
        F = np.vstack(rows_f) if rows_f else np.zeros((0, 0))
        if use_interaction and rows_h:
            H = np.vstack(rows_h)
        else:
            H = np.zeros((F.shape[0], 0))
        return cls(F=F, H=H, keys=tuple(keys))


# ============================================
# MODEL PARAMETERS
# ============================================

@dataclass(frozen=True, eq=False)
class EncoderParams:
    """CRF weights lambda.

    lambda_uo: K x (D_f + 1), appearance weights with the bias in the last column.
    lambda_uh: K x (D_h + 1), interaction weights with the bias in the last column.
    lambda_p_obj, lambda_p_int: K x 2, per-cluster (omega, b) of each similarity channel.
    Off-diagonal pairwise weights are identically zero and not stored.
    """

    lambda_uo: np.ndarray
    lambda_uh: np.ndarray
    lambda_p_obj: np.ndarray
    lambda_p_int: np.ndarray

    def __post_init__(self):
        for name in ('lambda_uo', 'lambda_uh', 'lambda_p_obj', 'lambda_p_int'):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim=2))
        K = self.lambda_uo.shape[0]
        if not (self.lambda_uh.shape[0] == self.lambda_p_obj.shape[0] == self.lambda_p_int.shape[0] == K):
            raise DimensionMismatchError('encoder blocks disagree on K')
        if self.lambda_p_obj.shape[1] != 2 or self.lambda_p_int.shape[1] != 2:
            raise DimensionMismatchError('pairwise blocks must be K x 2 (omega, bias)')

    @property
    def K(self) -> int:
        return self.lambda_uo.shape[0]

    @property
    def d_f(self) -> int:
        return self.lambda_uo.shape[1] - 1

    @property
    def d_h(self) -> int:
        return self.lambda_uh.shape[1] - 1

    @classmethod
    def initial(cls, K: int, d_f: int, d_h: int, epsilon_p: float) -> 'EncoderParams':
        """lambda = 0, with pairwise weights sitting on their lower bound."""
        pairwise = np.zeros((K, 2))
        pairwise[:, 0] = epsilon_p
        return cls(
            lambda_uo=np.zeros((K, d_f + 1)),
            lambda_uh=np.zeros((K, d_h + 1)),
            lambda_p_obj=pairwise,
            lambda_p_int=pairwise.copy(),
        )

    def unary(self, features: ProposalFeatures) -> np.ndarray:
        """N x K unary scores lambda_u(k)^T x_i over augmented features."""
        return features.F_aug @ self.lambda_uo.T + features.H_aug @ self.lambda_uh.T

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            self.lambda_uo.ravel(), self.lambda_uh.ravel(),
            self.lambda_p_obj.ravel(), self.lambda_p_int.ravel(),
        ])

    def from_vector(self, vector) -> 'EncoderParams':
        """New params with this instance's shapes filled from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64)
        blocks, offset = [], 0
        for arr in (self.lambda_uo, self.lambda_uh, self.lambda_p_obj, self.lambda_p_int):
            blocks.append(vector[offset:offset + arr.size].reshape(arr.shape))
            offset += arr.size
        if offset != vector.size:
            raise DimensionMismatchError(f'vector has {vector.size} entries, expected {offset}')
        return EncoderParams(*blocks)

    def coordinate_names(self) -> List[str]:
        names = []
        for k in range(self.K):
            names += [f'uo[{k}][{d}]' for d in range(self.d_f)] + [f'uo[{k}][bias]']
        for k in range(self.K):
            names += [f'uh[{k}][{d}]' for d in range(self.d_h)] + [f'uh[{k}][bias]']
        for k in range(self.K):
            names += [f'po[{k}][omega]', f'po[{k}][bias]']
        for k in range(self.K):
            names += [f'ph[{k}][omega]', f'ph[{k}][bias]']
        return names

    def project(self, epsilon_p: float) -> 'EncoderParams':
        """Clamp onto the feasible set."""
        uo = np.array(self.lambda_uo)
        uo[:, -1] = np.maximum(uo[:, -1], 0.0)
        uh = np.maximum(self.lambda_uh, 0.0)
        p_obj = np.array(self.lambda_p_obj)
        p_int = np.array(self.lambda_p_int)
        for block in (p_obj, p_int):
            block[:, 0] = np.maximum(block[:, 0], epsilon_p)
            block[:, 1] = np.maximum(block[:, 1], 0.0)
        return EncoderParams(uo, uh, p_obj, p_int)

    def constraint_violations(self, epsilon_p: float) -> List[str]:
        problems = []
        if np.any(self.lambda_uh[:, :-1] < 0):
            problems.append('interaction weights below 0')
        if np.any(self.lambda_p_obj[:, 0] < epsilon_p) or np.any(self.lambda_p_int[:, 0] < epsilon_p):
            problems.append('pairwise weights below epsilon_p')
        biases = np.concatenate([
            self.lambda_uo[:, -1], self.lambda_uh[:, -1],
            self.lambda_p_obj[:, 1], self.lambda_p_int[:, 1],
        ])
        if np.any(biases < 0):
            problems.append('negative bias')
        return problems

    def to_dict(self) -> dict:
        return {
            'K': self.K,
            'lambda_uo': self.lambda_uo.tolist(),
            'lambda_uh': self.lambda_uh.tolist(),
            'lambda_p_obj': self.lambda_p_obj.tolist(),
            'lambda_p_int': self.lambda_p_int.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'EncoderParams':
        K = int(data['K'])
        return cls(
            lambda_uo=np.array(data['lambda_uo'], dtype=np.float64).reshape(K, -1),
            lambda_uh=np.array(data['lambda_uh'], dtype=np.float64).reshape(K, -1),
            lambda_p_obj=np.array(data['lambda_p_obj'], dtype=np.float64).reshape(K, 2),
            lambda_p_int=np.array(data['lambda_p_int'], dtype=np.float64).reshape(K, 2),
        )


@dataclass(frozen=True, eq=False)
class ReconstructionParams:
    """Per-cluster Gaussian mean and diagonal variance theta (K x D_x each)."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'means', _frozen(self.means, ndim=2))
        object.__setattr__(self, 'variances', _frozen(self.variances, ndim=2))
        if self.means.shape != self.variances.shape:
            raise DimensionMismatchError('means and variances differ in shape')

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d_x(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            'K': self.K,
            'means': self.means.tolist(),
            'variances': self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ReconstructionParams':
        K = int(data['K'])
        return cls(
            means=np.array(data['means'], dtype=np.float64).reshape(K, -1),
            variances=np.array(data['variances'], dtype=np.float64).reshape(K, -1),
        )


# ============================================
# CONFIGURATION
# ============================================

def _parse_bandwidth(value):
    if value is None or (isinstance(value, str) and value.strip().lower() == 'auto'):
        return 'auto'
    try:
        delta = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f'bandwidth must be a positive number or "auto", got {value!r}')
    if not delta > 0:
        raise ConfigError(f'bandwidth must be positive, got {delta}')
    return delta


@dataclass(frozen=True)
class TrainConfig:
    """Training and inference settings; defaults come from backend.config.Config."""

    K: int = Config.K
    delta_f: object = Config.DELTA_F
    delta_h: object = Config.DELTA_H
    reg_lambda: float = Config.REG_LAMBDA
    learning_rate: float = Config.LEARNING_RATE
    outer_iters: int = Config.OUTER_ITERS
    mf_max_sweeps: int = Config.MF_MAX_SWEEPS
    mf_tol: float = Config.MF_TOL
    mf_contraction: float = Config.MF_CONTRACTION
    epsilon_p: float = Config.EPSILON_P
    variance_floor: float = Config.VARIANCE_FLOOR
    seed: int = Config.SEED
    foreground_mode: str = Config.FOREGROUND_MODE
    rel_tol: float = Config.REL_TOL
    learn_encoder: bool = True
    use_pairwise: bool = True
    use_interaction: bool = True
    threads: int = Config.THREADS

    def __post_init__(self):
        object.__setattr__(self, 'delta_f', _parse_bandwidth(self.delta_f))
        object.__setattr__(self, 'delta_h', _parse_bandwidth(self.delta_h))

    @classmethod
    def from_env(cls) -> 'TrainConfig':
        return cls()

    def replace(self, **overrides) -> 'TrainConfig':
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **overrides)

    def validate(self) -> 'TrainConfig':
        if self.K < 1:
            raise ConfigError(f'K must be >= 1, got {self.K}')
        if self.outer_iters < 1 or self.mf_max_sweeps < 1 or self.threads < 1:
            raise ConfigError('outer_iters, mf_max_sweeps and threads must be >= 1')
        for name in ('learning_rate', 'mf_tol', 'epsilon_p', 'variance_floor'):
            if not getattr(self, name) > 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        for name in ('reg_lambda', 'rel_tol'):
            if getattr(self, name) < 0:
                raise ConfigError(f'{name} must be >= 0, got {getattr(self, name)}')
        if not 0 < self.mf_contraction < 1:
            raise ConfigError(f'mf_contraction must lie in (0, 1), got {self.mf_contraction}')
        if self.foreground_mode not in FOREGROUND_MODES:
            raise ConfigError(
                f'foreground_mode must be one of {FOREGROUND_MODES}, got {self.foreground_mode!r}'
            )
        return self

    def to_dict(self) -> dict:
        """Every setting that affects results; the worker count does not."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'threads'}

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# ============================================
# MEAN-FIELD STATE
# ============================================

@dataclass(frozen=True, eq=False)
class MeanFieldState:
    """Marginal tables Q (with reconstruction) and Qp (encoder only), plus
    the similarity channels they were computed against."""

    Q: np.ndarray
    Qp: np.ndarray
    S_obj: np.ndarray
    S_int: np.ndarray
    sweeps: int = 0
    max_delta: float = 0.0
    delta_history: Tuple[float, ...] = ()

    def __post_init__(self):
        for name in ('Q', 'Qp', 'S_obj', 'S_int'):
            object.__setattr__(self, name, _frozen(getattr(self, name), ndim=2))
        object.__setattr__(self, 'delta_history', tuple(self.delta_history))

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    @property
    def K(self) -> int:
        return self.Q.shape[1]
