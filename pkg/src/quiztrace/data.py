"""Interaction logs, quiz segmentation, and corpus preparation.

File formats (all UTF-8 CSV with a header row):

* interaction log: ``student_id, exercise_id, quiz_id, timestamp, correct``
  with integer-second timestamps and ``correct`` in {0, 1}. An empty
  ``quiz_id`` switches that student to time-gap segmentation.
* Q-matrix: ``exercise_id, kc_id``, one row per exercise-to-concept relation.
* mastery trace (synthetic corpora only): ``student_id, quiz_index, kc_id,
  mastered`` recording the latent state that generated each quiz.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, SchemaError

INTERACTION_COLUMNS = ["student_id", "exercise_id", "quiz_id", "timestamp", "correct"]
QMATRIX_COLUMNS = ["exercise_id", "kc_id"]
MASTERY_COLUMNS = ["student_id", "quiz_index", "kc_id", "mastered"]

DEFAULT_GAP_SECONDS = 3600


@dataclass(frozen=True)
class Interaction:
    """One graded attempt: a student answers an exercise within a quiz."""

    student_id: str
    exercise_id: int
    answer: int
    quiz_id: str
    order_key: int


@dataclass
class Quiz:
    quiz_id: str
    interactions: list


@dataclass
class StudentSequence:
    student_id: str
    quizzes: list


class QMatrix:
    """Binary exercise-to-concept relation, stored as per-exercise id lists."""

    def __init__(self, kc_ids_per_exercise):
        self.kc_ids = [sorted(set(int(k) for k in ks)) for ks in kc_ids_per_exercise]
        self.n_exercises = len(self.kc_ids)
        self.n_kcs = 1 + max((k for ks in self.kc_ids for k in ks), default=-1)

    def has_kcs(self, exercise_id: int) -> bool:
        return 0 <= exercise_id < self.n_exercises and len(self.kc_ids[exercise_id]) > 0

    def as_dense(self) -> np.ndarray:
        m = np.zeros((self.n_exercises, self.n_kcs), dtype=np.int8)
        for e, ks in enumerate(self.kc_ids):
            m[e, ks] = 1
        return m


@dataclass
class Corpus:
    sequences: list
    qmatrix: QMatrix


@dataclass
class CorpusStats:
    n_students: int
    n_exercises: int
    n_kcs: int
    n_interactions: int
    avg_interactions_per_student: float
    avg_quizzes_per_student: float
    avg_interactions_per_quiz: float
    quiz_length_hist: dict
    quiz_count_hist: dict
    empty: bool = False


@dataclass
class ParsedLog:
    interactions: list
    dropped_missing_kc: int = 0
    empty_file: bool = False


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _read_header(reader, path, expected):
    try:
        header = next(reader)
    except StopIteration:
        return None
    header = [h.strip() for h in header]
    if header != expected:
        raise SchemaError(f"{path}: header {header} does not match {expected}")
    return header


def parse_qmatrix(path) -> QMatrix:
    """Read the exercise-to-concept relation CSV."""
    relations = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if _read_header(reader, path, QMATRIX_COLUMNS) is None:
            raise SchemaError(f"{path}: empty Q-matrix file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}: expected 2 fields, got {len(row)}", line=lineno)
            try:
                e, k = int(row[0]), int(row[1])
            except ValueError as exc:
                raise DataError(f"{path}: non-integer id {row!r}", line=lineno) from exc
            if e < 0 or k < 0:
                raise DataError(f"{path}: negative id {row!r}", line=lineno)
            relations.setdefault(e, set()).add(k)
    n_exercises = 1 + max(relations, default=-1)
    return QMatrix([sorted(relations.get(e, ())) for e in range(n_exercises)])


def parse_interaction_log(path, qmatrix: QMatrix | None = None) -> ParsedLog:
    """Read an interaction log; rows whose exercise has no known concept are
    dropped and counted, malformed rows raise DataError with the line number.
    """
    interactions = []
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if _read_header(reader, path, INTERACTION_COLUMNS) is None:
            return ParsedLog([], empty_file=True)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}: expected 5 fields, got {len(row)}", line=lineno)
            student, ex_raw, quiz_id, ts_raw, ans_raw = (c.strip() for c in row)
            try:
                exercise_id = int(ex_raw)
                order_key = int(ts_raw)
                answer = int(ans_raw)
            except ValueError as exc:
                raise DataError(f"{path}: non-integer field in {row!r}", line=lineno) from exc
            if answer not in (0, 1):
                raise DataError(f"{path}: correct must be 0 or 1, got {answer}", line=lineno)
            if exercise_id < 0:
                raise DataError(f"{path}: negative exercise_id {exercise_id}", line=lineno)
            if qmatrix is not None and not qmatrix.has_kcs(exercise_id):
                dropped += 1
                continue
            interactions.append(Interaction(student, exercise_id, answer, quiz_id, order_key))
    return ParsedLog(interactions, dropped_missing_kc=dropped)


def load_corpus(interactions_path, qmatrix_path, gap_seconds=DEFAULT_GAP_SECONDS):
    """Parse both files and segment into per-student quiz sequences."""
    qmatrix = parse_qmatrix(qmatrix_path)
    parsed = parse_interaction_log(interactions_path, qmatrix)
    sequences = segment_into_quizzes(parsed.interactions, gap_seconds=gap_seconds)
    return Corpus(sequences, qmatrix), parsed


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def segment_into_quizzes(interactions, gap_seconds=DEFAULT_GAP_SECONDS):
    """Group interactions into per-student quiz sequences.

    Interactions are ordered by (order_key, input position). When quiz ids
    are present, each maximal run of one quiz id becomes a quiz; a student
    returning to an earlier quiz id starts a new quiz occurrence rather
    than merging across the gap. Students whose rows lack quiz ids fall
    back to time-gap segmentation: a gap above `gap_seconds` opens a new
    quiz. Students are ordered by their first order_key.
    """
    per_student = {}
    for pos, it in enumerate(interactions):
        per_student.setdefault(it.student_id, []).append((it.order_key, pos, it))

    sequences = []
    for student_id, rows in per_student.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        ordered = [r[2] for r in rows]
        use_fallback = any(it.quiz_id == "" for it in ordered)
        quizzes = []
        for it in ordered:
            if use_fallback:
                new_quiz = (not quizzes
                            or it.order_key - quizzes[-1].interactions[-1].order_key > gap_seconds)
            else:
                new_quiz = not quizzes or quizzes[-1].quiz_id != it.quiz_id
            if new_quiz:
                quizzes.append(Quiz(it.quiz_id, []))
            quizzes[-1].interactions.append(it)
        sequences.append(StudentSequence(student_id, quizzes))

    sequences.sort(key=lambda s: s.quizzes[0].interactions[0].order_key)
    return sequences


# ---------------------------------------------------------------------------
# protocol: filtering, capping, padding
# ---------------------------------------------------------------------------

@dataclass
class PreparedStudent:
    """Fixed-shape view of one student: [j_cap, l_cap] id/answer arrays
    plus boolean masks flagging the real (non-padded) slots."""

    student_id: str
    exercise_ids: np.ndarray
    answers: np.ndarray
    interaction_mask: np.ndarray
    quiz_mask: np.ndarray

    @property
    def n_quizzes(self) -> int:
        return int(self.quiz_mask.sum())

    @property
    def n_interactions(self) -> int:
        return int(self.interaction_mask.sum())


@dataclass
class PreparedCorpus:
    students: list
    qmatrix: QMatrix
    l_cap: int
    j_cap: int
    n_filtered_students: int = 0


def _prepare_student(student_id, quizzes, l_cap, j_cap):
    """quizzes: list of (exercise_ids, answers) for real quizzes, already
    truncated to the last j_cap; each quiz truncated to its first l_cap."""
    ex = np.zeros((j_cap, l_cap), dtype=np.int64)
    an = np.zeros((j_cap, l_cap), dtype=np.int64)
    imask = np.zeros((j_cap, l_cap), dtype=bool)
    qmask = np.zeros(j_cap, dtype=bool)
    for j, (eids, answers) in enumerate(quizzes):
        n = len(eids)
        ex[j, :n] = eids
        an[j, :n] = answers
        imask[j, :n] = True
        qmask[j] = True
    return PreparedStudent(student_id, ex, an, imask, qmask)


def _real_quizzes(ps: PreparedStudent):
    out = []
    for j in range(ps.quiz_mask.shape[0]):
        if not ps.quiz_mask[j]:
            continue
        m = ps.interaction_mask[j]
        out.append((list(ps.exercise_ids[j, m]), list(ps.answers[j, m])))
    return out


def apply_protocol(corpus, l_cap: int, j_cap: int) -> PreparedCorpus:
    """Filter, cap, and pad a corpus into fixed-shape per-student arrays.

    Students with fewer than 2 quizzes are removed (and counted). Quizzes
    keep their FIRST l_cap interactions (a quiz is answered front to back);
    students keep their LAST j_cap quizzes (recent history matters most).
    Re-applying with the same caps is a no-op.
    """
    if l_cap < 1 or j_cap < 2:
        raise ConfigError(f"caps must satisfy l_cap >= 1 and j_cap >= 2, got {l_cap}/{j_cap}")

    if isinstance(corpus, PreparedCorpus):
        items = [(ps.student_id, _real_quizzes(ps)) for ps in corpus.students]
        qmatrix = corpus.qmatrix
        already_filtered = corpus.n_filtered_students
    else:
        items = []
        for seq in corpus.sequences:
            quizzes = [([it.exercise_id for it in q.interactions],
                        [it.answer for it in q.interactions]) for q in seq.quizzes]
            items.append((seq.student_id, quizzes))
        qmatrix = corpus.qmatrix
        already_filtered = 0

    students = []
    filtered = 0
    for student_id, quizzes in items:
        quizzes = [q for q in quizzes if len(q[0]) > 0]
        if len(quizzes) < 2:
            filtered += 1
            continue
        quizzes = quizzes[-j_cap:]
        quizzes = [(e[:l_cap], a[:l_cap]) for e, a in quizzes]
        students.append(_prepare_student(student_id, quizzes, l_cap, j_cap))
    return PreparedCorpus(students, qmatrix, l_cap, j_cap, already_filtered + filtered)


def make_target_split(ps: PreparedStudent):
    """Split a prepared student into (history, targets): the last real quiz
    becomes the prediction target and is removed from the history arrays."""
    real = _real_quizzes(ps)
    if len(real) < 2:
        raise ConfigError(f"student {ps.student_id!r} has {len(real)} quizzes; protocol requires >= 2")
    target_eids, target_answers = real[-1]
    j_cap = ps.quiz_mask.shape[0]
    l_cap = ps.interaction_mask.shape[1]
    history = _prepare_student(ps.student_id, real[:-1], l_cap, j_cap)
    return history, list(zip(target_eids, target_answers))


def expand_prefixes(students):
    """Every quiz prefix of every student as its own prepared student.

    A student with J quizzes yields J-1 entries: quizzes 1..j for
    j = 2..J. Useful as a training corpus where each quiz is predicted
    from its own history (one last-quiz split per prefix)."""
    out = []
    for ps in students:
        cur = ps
        chain = []
        while cur.n_quizzes >= 2:
            chain.append(cur)
            cur, _ = make_target_split(cur)
        out.extend(reversed(chain))
    return out


def split_folds(n_students: int, k: int = 5, seed: int = 0):
    """Partition student indices into k near-equal disjoint test groups.

    Returns a list of (train_indices, test_indices) pairs; fold i tests on
    group i. Deterministic for a given seed.
    """
    if n_students < k:
        raise ConfigError(f"{n_students} students cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_students)
    groups = np.array_split(order, k)
    folds = []
    for i in range(k):
        test = np.sort(groups[i])
        train = np.sort(np.concatenate([groups[j] for j in range(k) if j != i]))
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Exact counts, averages, and integer histograms of quiz length/number."""
    sequences = corpus.sequences
    n_students = len(sequences)
    if n_students == 0:
        return CorpusStats(0, 0, 0, 0, 0.0, 0.0, 0.0, {}, {}, empty=True)

    exercises = set()
    kcs = set()
    n_interactions = 0
    n_quizzes = 0
    length_hist = {}
    count_hist = {}
    for seq in sequences:
        count_hist[len(seq.quizzes)] = count_hist.get(len(seq.quizzes), 0) + 1
        for quiz in seq.quizzes:
            n_quizzes += 1
            L = len(quiz.interactions)
            length_hist[L] = length_hist.get(L, 0) + 1
            n_interactions += L
            for it in quiz.interactions:
                exercises.add(it.exercise_id)
                if corpus.qmatrix is not None and it.exercise_id < corpus.qmatrix.n_exercises:
                    kcs.update(corpus.qmatrix.kc_ids[it.exercise_id])
    return CorpusStats(
        n_students=n_students,
        n_exercises=len(exercises),
        n_kcs=len(kcs),
        n_interactions=n_interactions,
        avg_interactions_per_student=n_interactions / n_students,
        avg_quizzes_per_student=n_quizzes / n_students,
        avg_interactions_per_quiz=n_interactions / n_quizzes if n_quizzes else 0.0,
        quiz_length_hist=dict(sorted(length_hist.items())),
        quiz_count_hist=dict(sorted(count_hist.items())),
    )


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Mastery-based generator settings. Students start with every concept
    unmastered; each quiz exercises one concept, and finishing a quiz turns
    that concept's mastery on with probability p_learn. Concept choice
    revisits an already-seen concept with probability p_revisit (students
    practice concepts repeatedly), otherwise draws uniformly over all."""

    students: int = 500
    kcs: int = 20
    exercises_per_kc: int = 10
    quizzes_per_student: int = 10
    quiz_length: int = 10
    p_learn: float = 0.3
    p_guess: float = 0.1
    p_slip: float = 0.1
    p_revisit: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ("p_learn", "p_guess", "p_slip", "p_revisit"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("students", "kcs", "exercises_per_kc", "quizzes_per_student", "quiz_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class MasteryRecord:
    student_id: str
    quiz_index: int
    kc_id: int
    mastered: int


def generate_synthetic(spec: SyntheticSpec):
    """Draw a corpus from the mastery model; returns (Corpus, mastery trace).

    Correct-answer probability is 1 - p_slip when the quiz's concept is
    mastered and p_guess otherwise; the trace records mastery as it stood
    when the quiz was answered. Exercises are drawn without replacement
    within a quiz whenever the concept's pool is large enough.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    qmatrix = QMatrix([[e // spec.exercises_per_kc]
                       for e in range(spec.kcs * spec.exercises_per_kc)])
    sequences = []
    trace = []
    t = 0
    for s in range(spec.students):
        student_id = f"s{s:04d}"
        mastered = np.zeros(spec.kcs, dtype=bool)
        seen = []
        quizzes = []
        for j in range(spec.quizzes_per_student):
            if seen and rng.random() < spec.p_revisit:
                kc = seen[int(rng.integers(len(seen)))]
            else:
                kc = int(rng.integers(spec.kcs))
            if kc not in seen:
                seen.append(kc)
            pool = np.arange(kc * spec.exercises_per_kc, (kc + 1) * spec.exercises_per_kc)
            replace = spec.quiz_length > spec.exercises_per_kc
            eids = rng.choice(pool, size=spec.quiz_length, replace=replace)
            trace.append(MasteryRecord(student_id, j, kc, int(mastered[kc])))
            p_correct = 1.0 - spec.p_slip if mastered[kc] else spec.p_guess
            answers = (rng.random(spec.quiz_length) < p_correct).astype(int)
            quiz = Quiz(f"{student_id}_q{j}", [
                Interaction(student_id, int(e), int(a), f"{student_id}_q{j}", t + l)
                for l, (e, a) in enumerate(zip(eids, answers))
            ])
            t += spec.quiz_length + DEFAULT_GAP_SECONDS
            quizzes.append(quiz)
            if not mastered[kc] and rng.random() < spec.p_learn:
                mastered[kc] = True
        sequences.append(StudentSequence(student_id, quizzes))
    return Corpus(sequences, qmatrix), trace


def write_corpus(corpus: Corpus, interactions_path, qmatrix_path, trace=None, mastery_path=None):
    """Write a corpus (and optionally its mastery trace) in the CSV formats."""
    with open(interactions_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(INTERACTION_COLUMNS)
        for seq in corpus.sequences:
            for quiz in seq.quizzes:
                for it in quiz.interactions:
                    w.writerow([it.student_id, it.exercise_id, it.quiz_id, it.order_key, it.answer])
    with open(qmatrix_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(QMATRIX_COLUMNS)
        for e, ks in enumerate(corpus.qmatrix.kc_ids):
            for k in ks:
                w.writerow([e, k])
    if trace is not None and mastery_path is not None:
        with open(mastery_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(MASTERY_COLUMNS)
            for rec in trace:
                w.writerow([rec.student_id, rec.quiz_index, rec.kc_id, rec.mastered])
