"""Built-in desk-scale inference and training engine."""

from .builtin import (  # noqa: F401
    BuiltinEvaluator,
    BuiltinTrainer,
    gradient_check,
    random_small_network,
)
from .data import DataBundle, Dataset, load_dataset, make_shapes_dataset, save_dataset  # noqa: F401
from .network import Network  # noqa: F401
from .types import EvaluationResult, TrainerCapabilities  # noqa: F401
