"""MOS prediction toolkit: data, batching, model, training, evaluation.

The library trains LSTM-based regressors/classifiers over precomputed
speech-feature sequences to predict listening-test mean opinion scores,
and evaluates them with the standard correlation criteria at utterance
and system level. See the demos/ directory for narrative walkthroughs of
each capability, or the ``moskit`` command for the file-level pipeline.
"""

from .batching import BatchPlan, pad_and_mask, padding_cost, plan_random, plan_sorted
from .dataset import (
    Dataset,
    MosLabel,
    Utterance,
    aggregate_ratings,
    class_to_mos,
    class_weights,
    load_features,
    load_manifest,
    mass_in_range,
    mean_std_scatter,
    mos_histogram,
    mos_to_class,
    read_features,
    resolution_for,
    write_features,
    write_manifest,
)
from .errors import (
    FormatError,
    InvalidInputError,
    MoskitError,
    NumericError,
    UndefinedMetricError,
)
from .metrics import EvalReport, evaluate, ktau, lcc, mse, srcc, system_level
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    loss_classification,
    loss_regression,
    predict_sequences,
    save_checkpoint,
    transfer_from_regression,
)
from .postprocess import PostConfig, correct, decode_classification, ensemble, pipeline, quantize
from .training import (
    CyclicalLr,
    GradientAccumulator,
    OptimizerState,
    PhaseSpec,
    SequenceData,
    TrainResult,
    TrainRunConfig,
    classification_phases,
    cyclical_lr,
    finetune,
    sgd_momentum_step,
    train_classification,
    train_regression,
)

__version__ = "0.1.0"
