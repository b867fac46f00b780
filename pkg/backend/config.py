import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    """Co-segmentation defaults, overridable from the environment or a .env file."""

    # Model
    K = int(os.getenv('COSEG_K', 4))
    DELTA_F = os.getenv('COSEG_DELTA_F', 'auto')
    DELTA_H = os.getenv('COSEG_DELTA_H', 'auto')

    # Learning
    REG_LAMBDA = float(os.getenv('COSEG_REG_LAMBDA', 1e-3))
    LEARNING_RATE = float(os.getenv('COSEG_LEARNING_RATE', 0.05))
    OUTER_ITERS = int(os.getenv('COSEG_OUTER_ITERS', 30))
    REL_TOL = float(os.getenv('COSEG_REL_TOL', 1e-5))

    # Mean field
    MF_MAX_SWEEPS = int(os.getenv('COSEG_MF_MAX_SWEEPS', 20))
    MF_TOL = float(os.getenv('COSEG_MF_TOL', 1e-4))
    # Cap on the per-sweep contraction factor; pairwise weights are limited to keep it
    MF_CONTRACTION = float(os.getenv('COSEG_MF_CONTRACTION', 0.25))

    # Constraints
    EPSILON_P = float(os.getenv('COSEG_EPSILON_P', 1e-6))
    VARIANCE_FLOOR = float(os.getenv('COSEG_VARIANCE_FLOOR', 1e-6))

    # Reproducibility
    SEED = int(os.getenv('COSEG_SEED', 0))
    THREADS = int(os.getenv('COSEG_THREADS', 1))

    # Foreground selection: 'top1' or 'union'
    FOREGROUND_MODE = os.getenv('COSEG_FOREGROUND_MODE', 'top1')

    # Interaction featurizer (3D cylinder bins)
    CYLINDER_RADIUS = float(os.getenv('COSEG_CYLINDER_RADIUS', 0.5))
    INNER_FRACTION = float(os.getenv('COSEG_INNER_FRACTION', 1 / 6))

    # Logging
    LOG_FILE = os.getenv('COSEG_LOG_FILE', 'coseg.log')
    LOG_LEVEL = os.getenv('COSEG_LOG_LEVEL', 'INFO')
