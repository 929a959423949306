"""CVR-Net: a two-encoder, five-head ensemble image classifier on a small numpy autodiff core."""

from .checkpoint import CheckpointError, ImportReport, load_checkpoint, load_into, save_checkpoint
from .config import RunConfig, derive_seed
from .metrics import ConfusionMatrix, MetricsReport, confusion, evaluate_confusion, fold_average
from .model import CVRNet, HeadOutputs, ModelConfig, build
from .ops import NonFiniteError, ShapeError
from .params import ParamStore
from .training import Adam, NumericalError, PlateauScheduler, TrainConfig, TrainReport, fit

__version__ = "0.1.0"
