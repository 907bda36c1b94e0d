"""Uncertainty-aware self-training for neural sequence labeling, desk scale.

A teacher tagger pseudo-labels unlabeled sentences; per-token MC-dropout
confidence and certainty pick the reliable tokens; a student trains on the
masked noise-robust objective with Gaussian consistency regularization and
becomes the next teacher.
"""

from .data import (
    CorpusSplit,
    LabelScheme,
    Sentence,
    SynthSpec,
    greedy_kshot_split,
    parse_conll,
    serialize_conll,
    synth_corpus,
    synth_scheme,
)
from .evaluate import EntitySpan, MetricsReport, decode_spans, entity_f1, corpus_f1
from .losses import RobustLossConfig, combined_objective, gcr_loss, msl_loss, phce
from .model import ModelConfig, SequenceLabeler, build_vocab, load_checkpoint, save_checkpoint
from .numerics import Tape, Tensor, entropy, finite_diff_grad_check, kl_divergence, log_sum_exp
from .selftrain import TrainingConfig, run_experiment, self_train, train_supervised
from .uncertainty import (
    McPredictions,
    SelectionReport,
    bald_score,
    certainty_score,
    confidence_score,
    mc_predict,
    pseudo_annotate,
    sampling_weights,
    select_tokens,
)

__version__ = "0.1.0"
