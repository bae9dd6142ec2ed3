"""Knowledge tracing over quiz-structured interaction logs."""

from .data import (
    Corpus,
    Interaction,
    PreparedCorpus,
    PreparedStudent,
    QMatrix,
    Quiz,
    StudentSequence,
    SyntheticSpec,
    apply_protocol,
    corpus_stats,
    generate_synthetic,
    load_corpus,
    make_target_split,
    parse_interaction_log,
    parse_qmatrix,
    segment_into_quizzes,
    split_folds,
)
from .estimator import QuizKnowledgeTracer, check_corpus
from .metrics import auc, evaluate, r_squared, rmse, summarize_folds
from .model import ModelConfig, ModelParams, QuizNet, load_checkpoint, save_checkpoint
from .training import TrainConfig, adam_step, cross_entropy, l2_penalty, loss, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Interaction", "PreparedCorpus", "PreparedStudent", "QMatrix", "Quiz",
    "StudentSequence", "SyntheticSpec", "apply_protocol", "corpus_stats",
    "generate_synthetic", "load_corpus", "make_target_split", "parse_interaction_log",
    "parse_qmatrix", "segment_into_quizzes", "split_folds",
    "QuizKnowledgeTracer", "check_corpus",
    "auc", "evaluate", "r_squared", "rmse", "summarize_folds",
    "ModelConfig", "ModelParams", "QuizNet", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "adam_step", "cross_entropy", "l2_penalty", "loss", "lr_schedule", "train",
]
