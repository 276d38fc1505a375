"""SVD-based analysis and DeepONet-family operator surrogates in numpy."""

from .decomposition import (
    Decomposition,
    Preprocessing,
    SnapshotKind,
    SnapshotMatrix,
    SnapshotScaler,
    SnapshotSVD,
    center_scale,
    cumulative_energy,
    energy_curve,
    principal_components,
    principal_directions,
    rank_for_energy,
    reconstruct,
    svd,
    truncate,
)
from .nn import DenseNet, TrainConfig, train
from .operators import (
    FlexDeepONet,
    PODDeepONet,
    SVDDeepONet,
    VanillaDeepONet,
    alignment_diagnostics,
)
from .persistence import load_model, save_model

__version__ = "0.1.0"
