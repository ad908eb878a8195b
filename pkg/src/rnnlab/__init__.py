"""A desk-scale recurrent language-modelling laboratory: rewired and capped
LSTM cells with hand-derived gradients, mogrifier input gating, variational
dropout with a multi-sample objective, Rectified Adam with divergence
restarts, two-tailed weight averaging, and static plus dynamic evaluation."""

from .cells import (
    CellState,
    LstmParams,
    RlstmParams,
    cell_backward,
    init_cell_params,
    lstm_forward,
    rlstm_forward,
)
from .checkpoint import Checkpoint, CheckpointError, CheckpointVersionError
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .evaluation import (
    DynevalConfig,
    EvalReport,
    convert_metrics,
    evaluate_dynamic,
    evaluate_static,
    tune_dyneval,
    tune_temperature,
)
from .mogrifier import MogrifierParams, init_mogrifier_params, mogrify_backward, mogrify_forward
from .model import (
    MaskSet,
    ModelConfig,
    ModelParams,
    WindowBatch,
    forward_window,
    backward_window,
    init_model_params,
    loss_multisample,
    predict_deterministic,
    sample_masks,
)
from .numerics import DivergenceError, Rng, set_fast_gemm
from .training import (
    RAdamState,
    TrainOptions,
    TrainResult,
    TrainingDiverged,
    TtaState,
    clip_global_norm,
    radam_init,
    radam_step,
    train,
    tta_evaluate_and_swap,
    tta_init,
    tta_update,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
