"""Scikit-learn style front end.

``QuizKnowledgeTracer`` wraps corpus preparation, network construction,
and the training loop behind the familiar ``fit`` / ``predict_proba``
surface, so the tracer composes with sklearn tooling (``get_params``,
``set_params``, ``clone``). X is a :class:`quiztrace.data.Corpus` (or an
already prepared corpus); the supervision signal lives inside X, so ``y``
is accepted only for API compatibility.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Corpus, PreparedCorpus, apply_protocol, make_target_split
from .errors import ConfigError, DataError
from .metrics import auc
from .model import ModelConfig, QuizNet
from .training import TrainConfig, train


def check_corpus(X) -> None:
    """Validate the estimator input: a corpus with a usable concept map
    and binary answers."""
    if not isinstance(X, (Corpus, PreparedCorpus)):
        raise ConfigError(f"X must be a Corpus or PreparedCorpus, got {type(X).__name__}")
    if X.qmatrix is None or X.qmatrix.n_exercises == 0:
        raise DataError("corpus has no Q-matrix")
    if isinstance(X, Corpus):
        for seq in X.sequences:
            for quiz in seq.quizzes:
                for it in quiz.interactions:
                    if it.answer not in (0, 1):
                        raise DataError(f"student {seq.student_id!r}: answer {it.answer} not in {{0, 1}}")
                    if not X.qmatrix.has_kcs(it.exercise_id):
                        raise DataError(f"student {seq.student_id!r}: exercise {it.exercise_id} has no concepts")


class QuizKnowledgeTracer(BaseEstimator):
    """Predicts last-quiz answer correctness from quiz-structured history.

    Parameters mirror the model and training configs; see README for the
    protocol (students with fewer than 2 quizzes are dropped, quizzes keep
    their first l_cap interactions, students their last j_cap quizzes).
    """

    def __init__(self, d=128, l_cap=30, j_cap=30, gamma=1e-5,
                 use_influence=True, use_substitution=True,
                 use_complementarity=True, use_recency=True,
                 lambda_reg=1e-5, epochs=30, batch_size=32,
                 lr=1e-3, lr_decay=0.5, lr_decay_every=3,
                 target_policy="last_quiz", seed=0):
        self.d = d
        self.l_cap = l_cap
        self.j_cap = j_cap
        self.gamma = gamma
        self.use_influence = use_influence
        self.use_substitution = use_substitution
        self.use_complementarity = use_complementarity
        self.use_recency = use_recency
        self.lambda_reg = lambda_reg
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.target_policy = target_policy
        self.seed = seed

    def _prepare(self, X) -> PreparedCorpus:
        check_corpus(X)
        return apply_protocol(X, self.l_cap, self.j_cap)

    def model_config(self, qmatrix) -> ModelConfig:
        return ModelConfig(
            n_exercises=qmatrix.n_exercises, n_kcs=qmatrix.n_kcs, d=self.d,
            l_cap=self.l_cap, j_cap=self.j_cap, gamma=self.gamma,
            use_influence=self.use_influence, use_substitution=self.use_substitution,
            use_complementarity=self.use_complementarity, use_recency=self.use_recency,
            lambda_reg=self.lambda_reg, seed=self.seed,
        ).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, lr0=self.lr, decay_factor=self.lr_decay,
            decay_every_epochs=self.lr_decay_every, epochs=self.epochs,
            lambda_reg=self.lambda_reg, seed=self.seed,
            target_policy=self.target_policy,
        ).validate()

    def fit(self, X, y=None):
        prepared = self._prepare(X)
        if not prepared.students:
            raise DataError("no students survive the protocol filter")
        net = QuizNet.init(self.model_config(prepared.qmatrix), prepared.qmatrix.kc_ids)
        result = train(net, prepared.students, [], self.train_config())
        self.net_ = QuizNet(net.config, result.params, prepared.qmatrix.kc_ids)
        self.history_ = result.log
        self.n_students_ = len(prepared.students)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise ConfigError("estimator is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """P(correct) for every interaction of every student's last quiz,
        pooled in student order."""
        self._check_fitted()
        prepared = self._prepare(X)
        scores = []
        for ps in prepared.students:
            history, targets = make_target_split(ps)
            preds, _ = self.net_.forward(history, [e for e, _ in targets])
            scores.extend(preds.data.ravel())
        return np.array(scores)

    def target_labels(self, X) -> np.ndarray:
        """The true last-quiz answers, aligned with predict_proba output."""
        prepared = self._prepare(X)
        labels = []
        for ps in prepared.students:
            _, targets = make_target_split(ps)
            labels.extend(a for _, a in targets)
        return np.array(labels)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def score(self, X, y=None) -> float:
        """AUC over the pooled last-quiz targets."""
        return auc(self.predict_proba(X), self.target_labels(X))
