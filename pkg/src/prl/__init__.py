"""prl: LSTM language modeling with explicitly supervised predictive
representations.

A desk-scale stack built from scratch on numpy: a reverse-mode autodiff
core, a tagged-corpus pipeline with a synthetic HMM generator (analytic
perplexity floors included), label traces, a chain-MDP action-value
oracle, the shared-encoder / auxiliary-decoder / LM-decoder model, an
alternating two-task trainer, and an experiment harness.
"""

from .autodiff import Tensor, backward, grad_check, no_grad
from .corpus import (
    BpttBatch,
    HmmSpec,
    TaggedCorpus,
    TagSet,
    Vocab,
    batchify,
    block_hmm_spec,
    build_vocab,
    generate_hmm_corpus,
    load_conll,
    save_conll,
    split_corpus,
)
from .errors import PrlError
from .evaluation import EvalReport, evaluate_model, perplexity, tag_accuracy
from .experiments import (
    DEFAULT_VARIANTS,
    ExperimentMatrix,
    OracleCurveResult,
    VariantSpec,
    dataset_size_sweep,
    epochs_to_reach,
    oracle_curve,
    run_comparison,
)
from .mdp import SequenceMdp, q_learning_targets, q_star, q_star_closed_form, td_loss
from .model import (
    ModelConfig,
    PredictiveRepresentation,
    PrlModel,
    aux_forward,
    encode,
    init_model,
    lm_forward,
    load_checkpoint,
    num_params,
    oracle_aux_forward,
    save_checkpoint,
)
from .trace import LabelTraceState, trace_from_sequence, trace_init, trace_update
from .training import GAMMA_GRID, TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "Vocab",
    "TagSet",
    "TaggedCorpus",
    "BpttBatch",
    "HmmSpec",
    "build_vocab",
    "load_conll",
    "save_conll",
    "generate_hmm_corpus",
    "block_hmm_spec",
    "batchify",
    "split_corpus",
    "LabelTraceState",
    "trace_init",
    "trace_update",
    "trace_from_sequence",
    "SequenceMdp",
    "q_star",
    "q_star_closed_form",
    "q_learning_targets",
    "td_loss",
    "ModelConfig",
    "PrlModel",
    "PredictiveRepresentation",
    "init_model",
    "encode",
    "aux_forward",
    "oracle_aux_forward",
    "lm_forward",
    "save_checkpoint",
    "load_checkpoint",
    "num_params",
    "GAMMA_GRID",
    "TrainConfig",
    "TrainLog",
    "train",
    "EvalReport",
    "evaluate_model",
    "perplexity",
    "tag_accuracy",
    "VariantSpec",
    "DEFAULT_VARIANTS",
    "ExperimentMatrix",
    "OracleCurveResult",
    "run_comparison",
    "dataset_size_sweep",
    "oracle_curve",
    "epochs_to_reach",
    "PrlError",
]
