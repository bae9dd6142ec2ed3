"""The quiz-level knowledge tracing network.

A student's prepared history runs through three stages:

1. intra-quiz: each (exercise, answer) pair is embedded, passed through a
   right/wrong layer, blended with its predecessor by an adjacent gate,
   and averaged into one vector per quiz;
2. inter-quiz: a gated recurrence folds quiz vectors into a substitution
   state (recent evidence overwrites older evidence on similar concepts)
   while a self-attention pass with a recency bias pools them into a
   complementarity vector (evidence on distinct concepts adds up);
3. head: both are merged into a knowledge state that scores each target
   exercise with a probability of answering correctly.

Every weight matrix is stored input-by-output and applied as ``x @ W``
on row vectors. All arithmetic goes through :mod:`quiztrace.autodiff`,
so ``backward`` on a loss built from ``forward`` fills every parameter
gradient.

Checkpoint format (``save_checkpoint``): the magic line ``QZTCKPT1\\n``,
a little-endian uint32 header length, a JSON header holding the config
and the ordered parameter names/shapes, then the raw ``<f8`` C-order
array bytes concatenated in header order. Writing is byte-deterministic
and round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointMismatchError, ConfigError, DataError
from .data import PreparedStudent

CHECKPOINT_MAGIC = b"QZTCKPT1\n"


@dataclass
class ModelConfig:
    n_exercises: int
    n_kcs: int
    d: int = 128
    l_cap: int = 30
    j_cap: int = 30
    gamma: float = 1e-5
    use_influence: bool = True
    use_substitution: bool = True
    use_complementarity: bool = True
    use_recency: bool = True
    lambda_reg: float = 1e-5
    seed: int = 0
    # faithful-to-print switches, for study only; defaults are the working forms
    gate_bias_outside: bool = False
    textbook_gru: bool = False

    def validate(self):
        if self.d < 1:
            raise ConfigError(f"embedding dimension must be >= 1, got {self.d}")
        if self.gamma < 0:
            raise ConfigError(f"recency scale must be >= 0, got {self.gamma}")
        if self.n_exercises < 1 or self.n_kcs < 1:
            raise ConfigError("vocabulary sizes must be >= 1")
        if self.l_cap < 1 or self.j_cap < 2:
            raise ConfigError(f"caps must satisfy l_cap >= 1, j_cap >= 2, got {self.l_cap}/{self.j_cap}")
        if not (self.use_substitution or self.use_complementarity):
            raise ConfigError("at least one of the substitution and complementarity paths must stay on")
        return self


def _param_specs(cfg: ModelConfig):
    """(name, shape) of every learnable tensor, in a fixed order; branch
    tensors exist only when their path is enabled."""
    d = cfg.d
    specs = [
        ("exercise_emb", (cfg.n_exercises, d)),
        ("kc_emb", (cfg.n_kcs, d)),
        ("combine_w", (d, d)), ("combine_b", (d,)),
        ("right_w", (d, d)), ("right_b", (d,)),
        ("wrong_w", (d, d)), ("wrong_b", (d,)),
    ]
    if cfg.use_influence:
        specs += [("gate_w", (2 * d, d)), ("gate_b", (d,))]
    if cfg.use_substitution:
        specs += [("reset_w", (2 * d, d)), ("reset_b", (d,)),
                  ("update_w", (2 * d, d)), ("update_b", (d,)),
                  ("cand_w", (2 * d, d)), ("cand_b", (d,))]
    if cfg.use_complementarity:
        specs += [("query_w", (d, d)), ("key_w", (d, d)), ("value_w", (d, d))]
    specs += [
        ("merge_w", (d, d)), ("merge_b", (d,)),
        ("head_hidden_w", (3 * d, d)), ("head_hidden_b", (d,)),
        ("head_out_w", (d, 1)), ("head_out_b", (1,)),
    ]
    return specs


class ModelParams:
    """Named learnable tensors, all drawn uniform with fan-scaled bounds:
    weight matrices on +-sqrt(6/(fan_in+fan_out)), embeddings and biases on
    +-1/sqrt(d). Flat +-1/sqrt(d) bounds on the matrices shrink activations
    threefold per layer and measurably slow learning."""

    def __init__(self, tensors: dict):
        self._tensors = dict(tensors)

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(cfg.seed)
        tensors = {}
        for name, shape in _param_specs(cfg):
            if name.endswith("_emb") or len(shape) == 1:
                bound = 1.0 / np.sqrt(cfg.d)
            else:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = ad.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        return cls(tensors)

    def __getitem__(self, name) -> ad.Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def tensors(self):
        return [self._tensors[n] for n in self._tensors]

    def items(self):
        return list(self._tensors.items())

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams({n: ad.tensor(t.data.copy(), requires_grad=True)
                            for n, t in self._tensors.items()})


@dataclass
class ForwardTrace:
    """Numpy snapshots of every stage, kept for inspection and invariants."""

    interaction_vectors: np.ndarray
    gate_values: np.ndarray | None
    combined_vectors: np.ndarray
    quiz_vectors: np.ndarray
    substitution_states: np.ndarray | None
    attention: np.ndarray | None
    contextualized: np.ndarray | None
    complementarity: np.ndarray | None
    knowledge_state: np.ndarray
    predictions: np.ndarray


class QuizNet:
    """Bundles a config, its parameters, and the exercise-to-concept map."""

    def __init__(self, config: ModelConfig, params: ModelParams, kc_ids):
        config.validate()
        if len(kc_ids) < config.n_exercises:
            raise ConfigError(f"concept map covers {len(kc_ids)} exercises, config says {config.n_exercises}")
        self.config = config
        self.params = params
        self.kc_ids = kc_ids

    @classmethod
    def init(cls, config: ModelConfig, kc_ids) -> "QuizNet":
        return cls(config, ModelParams.init(config), kc_ids)

    # -- intra-quiz stages ----------------------------------------------

    def embed_exercises(self, exercise_ids) -> ad.Tensor:
        """relu(W (e + mean of concept embeddings) + b), one row per exercise."""
        p = self.params
        ids = np.asarray(exercise_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.n_exercises):
            raise DataError(f"exercise id out of range [0, {self.config.n_exercises})")
        e = ad.gather_rows(p["exercise_emb"], ids)
        kbar = ad.gather_rows_mean(p["kc_emb"], [self.kc_ids[i] for i in ids])
        return ad.relu(ad.add_rowvec(ad.matmul(ad.add(e, kbar), p["combine_w"]), p["combine_b"]))

    def encode_interactions(self, embedded: ad.Tensor, answers) -> ad.Tensor:
        """Route each row through the right or the wrong layer by its answer."""
        p = self.params
        onoff = np.asarray(answers, dtype=np.float64).reshape(-1, 1)
        mask = ad.constant(np.repeat(onoff, embedded.shape[1], axis=1))
        right = ad.add_rowvec(ad.matmul(embedded, p["right_w"]), p["right_b"])
        wrong = ad.add_rowvec(ad.matmul(embedded, p["wrong_w"]), p["wrong_b"])
        return ad.add(ad.mul(right, mask), ad.mul(wrong, ad.one_minus(mask)))

    def _adjacent_gate(self, prev: ad.Tensor, cur: ad.Tensor):
        p = self.params
        pre = ad.matmul(ad.concat(prev, cur, axis=1), p["gate_w"])
        if self.config.gate_bias_outside:
            gate = ad.add_rowvec(ad.sigmoid(pre), p["gate_b"])
        else:
            gate = ad.sigmoid(ad.add_rowvec(pre, p["gate_b"]))
        x = ad.add(ad.mul(gate, cur), ad.mul(ad.one_minus(gate), prev))
        return x, gate

    def adjacent_gate_combine(self, prev: ad.Tensor, cur: ad.Tensor) -> ad.Tensor:
        """Blend row-aligned predecessor/current interaction vectors."""
        return self._adjacent_gate(prev, cur)[0]

    def quiz_pool(self, x: ad.Tensor, mask) -> ad.Tensor:
        """Average the real interaction vectors of one quiz."""
        return ad.masked_mean(x, mask)

    # -- inter-quiz stages ----------------------------------------------

    def substitution_path(self, quiz_vectors: ad.Tensor, mask):
        """Fold quiz vectors through the gated recurrence; padded slots are
        skipped with the state carried through. Returns (final [1 x d],
        list of per-real-quiz states)."""
        p = self.params
        mask = np.asarray(mask, dtype=bool)
        d = quiz_vectors.shape[1]
        state = ad.constant(np.zeros((1, d)))
        states = []
        for j in np.flatnonzero(mask):
            qj = ad.gather_rows(quiz_vectors, [int(j)])
            joint = ad.concat(state, qj, axis=1)
            reset = ad.sigmoid(ad.add_rowvec(ad.matmul(joint, p["reset_w"]), p["reset_b"]))
            update = ad.sigmoid(ad.add_rowvec(ad.matmul(joint, p["update_w"]), p["update_b"]))
            if self.config.textbook_gru:
                gated = ad.concat(ad.mul(reset, state), qj, axis=1)
                cand = ad.tanh(ad.add_rowvec(ad.matmul(gated, p["cand_w"]), p["cand_b"]))
            else:
                # as printed: the reset gate scales the joint projection
                cand = ad.tanh(ad.add_rowvec(ad.mul(reset, ad.matmul(joint, p["cand_w"])), p["cand_b"]))
            state = ad.add(ad.mul(ad.one_minus(update), state), ad.mul(update, cand))
            states.append(state)
        return state, states

    def recency_attention(self, quiz_vectors: ad.Tensor, mask):
        """Self-attention over real quizzes with a constant recency shift.

        Row sums stay exactly 1: the shift adds one softmax over positions
        and subtracts another, moving weight toward recent quizzes without
        changing the total. Returns (weights [J x J], contextualized
        [J x d]) with padded rows/columns zeroed.
        """
        p = self.params
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        n_total = quiz_vectors.shape[0]
        dense = idx.size == n_total
        qr = quiz_vectors if dense else ad.gather_rows(quiz_vectors, idx)
        queries = ad.matmul(qr, p["query_w"])
        keys = ad.matmul(qr, p["key_w"])
        values = ad.matmul(qr, p["value_w"])
        weights = ad.softmax_rows(ad.matmul(queries, ad.transpose(keys)))
        if self.config.use_recency and self.config.gamma != 0.0:
            weights = ad.add_rowvec(weights, ad.constant(recency_shift(idx.size, self.config.gamma)))
        z = ad.matmul(weights, values)
        if not dense:
            weights = ad.transpose(ad.pad_rows(ad.transpose(ad.pad_rows(weights, idx, n_total)), idx, n_total))
            z = ad.pad_rows(z, idx, n_total)
        return weights, z

    def complementarity_pool(self, contextualized: ad.Tensor, mask) -> ad.Tensor:
        """Average the contextualized vectors of the real quizzes."""
        return ad.masked_mean(contextualized, mask)

    def integrate_state(self, substitution, complementarity) -> ad.Tensor:
        """W (sub + com) + b; an ablated branch contributes a zero vector."""
        p = self.params
        d = self.config.d
        zero = ad.constant(np.zeros((1, d)))
        sub = substitution if substitution is not None else zero
        com = complementarity if complementarity is not None else zero
        if substitution is None and complementarity is None:
            raise ConfigError("both inter-quiz paths are ablated")
        return ad.add_rowvec(ad.matmul(ad.add(sub, com), p["merge_w"]), p["merge_b"])

    def predict(self, embedded_targets: ad.Tensor, state: ad.Tensor) -> ad.Tensor:
        """sigmoid head over (e*h | e | h) rows, one probability per target."""
        p = self.params
        n = embedded_targets.shape[0]
        h_rep = ad.matmul(ad.constant(np.ones((n, 1))), state)
        feat = ad.concat(ad.concat(ad.mul(embedded_targets, h_rep), embedded_targets, axis=1), h_rep, axis=1)
        hidden = ad.add_rowvec(ad.matmul(feat, p["head_hidden_w"]), p["head_hidden_b"])
        return ad.sigmoid(ad.add_rowvec(ad.matmul(hidden, p["head_out_w"]), p["head_out_b"]))

    # -- full pass --------------------------------------------------------

    def _encode_quiz_history(self, student: PreparedStudent, quiz_idx):
        """Shared intra-quiz pipeline: embed, encode, gate, and pool the real
        interactions of the given quizzes into a [n_quizzes x d] matrix.
        Returns (quiz_mat, encoded, combined, gate_data)."""
        cfg = self.config
        flat_ids, flat_answers, spans = [], [], []
        for j in quiz_idx:
            rows = np.flatnonzero(student.interaction_mask[j])
            if rows.size == 0:
                raise DataError(f"student {student.student_id!r}: quiz {j} has no real interactions")
            start = len(flat_ids)
            flat_ids.extend(int(e) for e in student.exercise_ids[j, rows])
            flat_answers.extend(int(a) for a in student.answers[j, rows])
            spans.append((start, len(flat_ids)))
        n = len(flat_ids)

        embedded = self.embed_exercises(flat_ids)
        encoded = self.encode_interactions(embedded, flat_answers)

        gate_data = None
        if cfg.use_influence:
            prev_idx = [i for s, e in spans for i in range(s, e - 1)]
            cur_idx = [i for s, e in spans for i in range(s + 1, e)]
            firsts = [s for s, _ in spans]
            if cur_idx:
                blended, gate = self._adjacent_gate(ad.gather_rows(encoded, prev_idx),
                                                    ad.gather_rows(encoded, cur_idx))
                combined = ad.add(ad.pad_rows(ad.gather_rows(encoded, firsts), firsts, n),
                                  ad.pad_rows(blended, cur_idx, n))
                gate_data = gate.data.copy()
            else:
                combined = encoded
        else:
            combined = encoded

        quiz_rows = []
        for s, e in spans:
            pooled = self.quiz_pool(ad.gather_rows(combined, range(s, e)), np.ones(e - s, dtype=bool))
            quiz_rows.append(ad.reshape(pooled, (1, cfg.d)))
        quiz_mat = quiz_rows[0] if len(quiz_rows) == 1 else ad.stack_rows(quiz_rows)
        return quiz_mat, encoded, combined, gate_data

    def forward(self, history: PreparedStudent, target_exercise_ids):
        """Score target exercises against the knowledge state built from a
        padded history. Padded slots never enter the graph, so perturbing
        them cannot change any output. Returns (predictions [T x 1], trace).
        """
        cfg = self.config
        quiz_idx = np.flatnonzero(history.quiz_mask)
        if quiz_idx.size == 0:
            raise DataError(f"student {history.student_id!r}: empty history")
        targets = np.asarray(target_exercise_ids, dtype=np.intp)
        if targets.size == 0:
            raise DataError(f"student {history.student_id!r}: no target exercises")

        quiz_mat, encoded, combined, gate_data = self._encode_quiz_history(history, quiz_idx)
        all_real = np.ones(quiz_mat.shape[0], dtype=bool)

        substitution = None
        sub_states = None
        if cfg.use_substitution:
            substitution, states = self.substitution_path(quiz_mat, all_real)
            sub_states = np.concatenate([s.data for s in states], axis=0)

        attention = None
        contextualized = None
        complementarity = None
        com_row = None
        if cfg.use_complementarity:
            attention_t, z = self.recency_attention(quiz_mat, all_real)
            pooled = self.complementarity_pool(z, all_real)
            com_row = ad.reshape(pooled, (1, cfg.d))
            attention = attention_t.data.copy()
            contextualized = z.data.copy()
            complementarity = pooled.data.copy()

        state = self.integrate_state(substitution, com_row)
        embedded_targets = self.embed_exercises(targets)
        predictions = self.predict(embedded_targets, state)

        trace = ForwardTrace(
            interaction_vectors=encoded.data.copy(),
            gate_values=gate_data,
            combined_vectors=combined.data.copy(),
            quiz_vectors=quiz_mat.data.copy(),
            substitution_states=sub_states,
            attention=attention,
            contextualized=contextualized,
            complementarity=complementarity,
            knowledge_state=state.data.copy(),
            predictions=predictions.data.ravel().copy(),
        )
        return predictions, trace

    def forward_prefixes(self, student: PreparedStudent):
        """Score every quiz j >= 2 from its preceding quizzes 1..j-1, sharing
        the per-quiz encodings and recurrence states across all prefixes (one
        graph instead of one forward per prefix). Returns a list of
        (predictions [T_j x 1], target_exercise_ids, target_answers) tuples,
        one per predicted quiz, in order.
        """
        cfg = self.config
        quiz_idx = np.flatnonzero(student.quiz_mask)
        if quiz_idx.size < 2:
            raise DataError(f"student {student.student_id!r}: prefix scoring needs >= 2 quizzes")

        # intra-quiz encodings for history quizzes 1..J-1 only; the last quiz
        # is never anyone's history
        quiz_mat, _, _, _ = self._encode_quiz_history(student, quiz_idx[:-1])
        n_hist = quiz_mat.shape[0]

        sub_states = [None] * n_hist
        if cfg.use_substitution:
            _, states = self.substitution_path(quiz_mat, np.ones(n_hist, dtype=bool))
            sub_states = states

        target_ids, target_answers, target_spans = [], [], []
        for j in quiz_idx[1:]:
            rows = np.flatnonzero(student.interaction_mask[j])
            start = len(target_ids)
            target_ids.extend(int(e) for e in student.exercise_ids[j, rows])
            target_answers.extend(int(a) for a in student.answers[j, rows])
            target_spans.append((start, len(target_ids)))
        embedded_targets = self.embed_exercises(target_ids)

        results = []
        for p in range(n_hist):
            com_row = None
            if cfg.use_complementarity:
                prefix = quiz_mat if p == n_hist - 1 else ad.gather_rows(quiz_mat, range(p + 1))
                _, z = self.recency_attention(prefix, np.ones(p + 1, dtype=bool))
                com_row = ad.reshape(self.complementarity_pool(z, np.ones(p + 1, dtype=bool)),
                                     (1, cfg.d))
            state = self.integrate_state(sub_states[p], com_row)
            start, end = target_spans[p]
            preds = self.predict(ad.gather_rows(embedded_targets, range(start, end)), state)
            results.append((preds, target_ids[start:end], target_answers[start:end]))
        return results


def recency_shift(n_real: int, gamma: float) -> np.ndarray:
    """The constant per-position shift added to every attention row:
    softmax(gamma * position) - softmax(gamma * (n - position)) for
    positions 1..n over the real quizzes. Sums to zero by construction."""
    j = np.arange(1, n_real + 1, dtype=np.float64)
    return _softmax1d(gamma * j) - _softmax1d(gamma * (n_real - j))


def _softmax1d(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig):
    """Write the deterministic flat container described in the module docs."""
    entries = [{"name": n, "shape": list(t.data.shape)} for n, t in params.items()]
    header = json.dumps({"config": dataclasses.asdict(config), "params": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into (ModelConfig, ModelParams), bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMismatchError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        tensors = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointMismatchError(f"{path}: truncated data for {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            tensors[entry["name"]] = ad.tensor(arr, requires_grad=True)
    expected = [name for name, _ in _param_specs(config)]
    if list(tensors) != expected:
        raise CheckpointMismatchError(f"{path}: parameter set does not match its config")
    return config, ModelParams(tensors)
