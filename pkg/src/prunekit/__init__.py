"""prunekit: search-based per-layer pruning for small convolutional networks."""

__version__ = "0.1.0"

from .model_store import (  # noqa: F401
    LayerTensor,
    ModelSnapshot,
    PruneMask,
    effective_weights,
    load_model,
    save_model,
    weighted_sparsity,
)
from .search import AnnealingSchedule, SearchConfig, SparsityGenotype, run_search  # noqa: F401
