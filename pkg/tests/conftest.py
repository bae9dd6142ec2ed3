import numpy as np
import pytest

from quiztrace import autodiff as ad
from quiztrace import data as D


@pytest.fixture(autouse=True)
def fresh_tape():
    """Each test starts with an empty gradient tape."""
    ad.reset_graph()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_corpus():
    """30 students, 5 concepts, short quizzes; deterministic."""
    spec = D.SyntheticSpec(students=30, kcs=5, exercises_per_kc=4,
                           quizzes_per_student=5, quiz_length=4,
                           p_learn=0.4, p_guess=0.15, p_slip=0.1, seed=7)
    corpus, trace = D.generate_synthetic(spec)
    return corpus


@pytest.fixture
def small_prepared(small_corpus):
    return D.apply_protocol(small_corpus, l_cap=4, j_cap=5)
