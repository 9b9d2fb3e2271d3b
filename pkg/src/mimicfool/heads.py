"""Downstream task heads that consume feature vectors.

Three stand-ins for real downstream models: a linear classifier, a greedy
recurrent sequence decoder and a bilinear question answerer. All expose the
scikit-learn estimator surface (``fit``/``predict``/``get_params``) and are
deterministic once fitted. The attack never touches these; it only needs the
extractor. They exist to decide whether two images produce the same output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .tensor import AdamState, Tape, Tensor, adam_step, backward, dense
from .validation import check_feature, check_features

BOS = "<bos>"
EOS = "<eos>"

__all__ = [
    "BOS",
    "EOS",
    "TaskOutput",
    "ClassifierHead",
    "SeqDecoderHead",
    "QaHead",
    "classify",
    "decode",
    "answer",
    "outputs_match",
    "softmax",
]


@dataclass(frozen=True)
class TaskOutput:
    """Output of one head on one feature vector.

    ``kind`` is ``"label"``, ``"tokens"`` or ``"answer"``. Equality only looks
    at ``kind`` and ``value``; ``logits`` rides along for margin analysis.
    """

    kind: str
    value: object
    logits: np.ndarray | None = field(default=None, compare=False, repr=False)

    def to_json(self):
        return list(self.value) if self.kind == "tokens" else int(self.value)


def outputs_match(a: TaskOutput, b: TaskOutput) -> bool:
    """Exact-output equality: same label, same answer or identical token sequence."""
    if a.kind != b.kind:
        raise ValueError(f"cannot compare outputs of different kinds: {a.kind} vs {b.kind}")
    if a.kind == "tokens":
        return tuple(a.value) == tuple(b.value)
    return int(a.value) == int(b.value)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class _FeatureScaler:
    """Per-coordinate standardization learned from training features."""

    def _fit_scaler(self, F: np.ndarray) -> None:
        self.feature_mean_ = F.mean(axis=0)
        std = F.std(axis=0)
        self.feature_scale_ = np.where(std > 1e-12, std, 1.0)

    def _scale(self, F: np.ndarray) -> np.ndarray:
        return (F - self.feature_mean_) / self.feature_scale_


# ---------------------------------------------------------------- classifier


class ClassifierHead(ClassifierMixin, BaseEstimator):
    """Linear softmax classifier ``argmax(feature @ W + b)``.

    Ties in the argmax go to the lowest class index.
    """

    def __init__(self, n_classes: int = 9, epochs: int = 30, lr: float = 0.01,
                 batch_size: int = 32, seed: int = 0):
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def initialize(self, feature_dim: int) -> "ClassifierHead":
        rng = np.random.default_rng(self.seed)
        self.W_ = Tensor(_uniform(rng, (feature_dim, self.n_classes), feature_dim))
        self.b_ = Tensor(np.zeros(self.n_classes))
        self.feature_dim_ = feature_dim
        self.classes_ = np.arange(self.n_classes)
        return self

    def parameters(self) -> list[Tensor]:
        return [self.W_, self.b_]

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> "ClassifierHead":
        W, b = arrays
        self.W_, self.b_ = Tensor(W), Tensor(b)
        self.feature_dim_ = W.shape[0]
        self.classes_ = np.arange(self.n_classes)
        return self

    def logits_tensor(self, features: Tensor, batched: bool = True) -> Tensor:
        return dense(features, self.W_, self.b_, batched=batched)

    def fit(self, F, y):
        F = np.asarray(F, dtype=np.float64)
        F = F.reshape(F.shape[0], -1)
        y = np.asarray(y, dtype=int)
        if len(F) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        self.initialize(F.shape[1])
        rng = np.random.default_rng(self.seed + 1)
        states = [AdamState(p.size, self.lr) for p in self.parameters()]
        onehot = np.eye(self.n_classes)[y]
        for _ in range(self.epochs):
            for idx in _batches(len(F), self.batch_size, rng):
                self.W_.requires_grad = self.b_.requires_grad = True
                with Tape() as tape:
                    logits = self.logits_tensor(Tensor(F[idx]))
                backward(tape, logits, (softmax(logits.data) - onehot[idx]) / len(idx))
                for p, st in zip(self.parameters(), states):
                    adam_step(st, p.data, p.grad)
        self.W_.requires_grad = self.b_.requires_grad = False
        return self

    def decision_function(self, F) -> np.ndarray:
        check_is_fitted(self, "W_")
        F = check_features(F, self.feature_dim_)
        return F @ self.W_.data + self.b_.data

    def predict(self, F) -> np.ndarray:
        return self.decision_function(F).argmax(axis=1)

    def operator_norm_bound(self) -> float:
        """Bound on how fast any logit gap can change: ``2 * ||W||_2``.

        For features ``phi, phi'`` and classes ``i, j``,
        ``|(z_i - z_j)(phi') - (z_i - z_j)(phi)| <= bound * ||phi' - phi||``.
        """
        check_is_fitted(self, "W_")
        return 2.0 * float(np.linalg.norm(self.W_.data, 2))


def classify(head: ClassifierHead, feature) -> TaskOutput:
    f = check_feature(feature, head.feature_dim_)
    logits = f @ head.W_.data + head.b_.data
    return TaskOutput("label", int(np.argmax(logits)), logits)


def logit_margin(logits: np.ndarray) -> float:
    """Gap between the winning logit and the runner-up."""
    top2 = np.sort(logits)[-2:]
    return float(top2[1] - top2[0])


# ---------------------------------------------------------------- decoder


class SeqDecoderHead(_FeatureScaler, BaseEstimator):
    """Greedy gated-recurrent decoder conditioned on a feature vector.

    The standardized feature sets the initial hidden state
    ``h0 = tanh(phi W_init + b_init)``. Each step embeds the previous token
    and applies a gated update ``h <- (1 - z) h + z c`` with
    ``z = sigmoid([h, e] W_z + b_z)`` and ``c = tanh([h, e] W_c + b_c)``.
    Decoding starts from ``<bos>`` and stops at ``<eos>`` or ``max_len`` tokens.
    """

    def __init__(self, vocab: Sequence[str] = (BOS, EOS), hidden: int = 32, embed: int = 8,
                 max_len: int = 6, epochs: int = 60, lr: float = 0.01, batch_size: int = 32,
                 seed: int = 0):
        self.vocab = vocab
        self.hidden = hidden
        self.embed = embed
        self.max_len = max_len
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    _PARAM_NAMES = ("W_init", "b_init", "E", "W_z", "b_z", "W_c", "b_c", "W_out", "b_out")

    def _vocab_index(self) -> dict[str, int]:
        vocab = list(self.vocab)
        if BOS not in vocab or EOS not in vocab:
            raise ValueError(f"vocabulary must contain {BOS} and {EOS}")
        return {t: i for i, t in enumerate(vocab)}

    def initialize(self, feature_dim: int) -> "SeqDecoderHead":
        rng = np.random.default_rng(self.seed)
        V, H, K = len(self.vocab), self.hidden, self.embed
        self.params_ = {
            "W_init": _uniform(rng, (feature_dim, H), feature_dim),
            "b_init": np.zeros(H),
            "E": rng.normal(0.0, 1.0, (V, K)),
            "W_z": _uniform(rng, (H + K, H), H + K),
            "b_z": np.zeros(H),
            "W_c": _uniform(rng, (H + K, H), H + K),
            "b_c": np.zeros(H),
            "W_out": _uniform(rng, (H, V), H),
            "b_out": np.zeros(V),
        }
        self.feature_dim_ = feature_dim
        self.feature_mean_ = np.zeros(feature_dim)
        self.feature_scale_ = np.ones(feature_dim)
        return self

    def parameters(self) -> list[np.ndarray]:
        return [self.params_[k] for k in self._PARAM_NAMES] + [self.feature_mean_, self.feature_scale_]

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> "SeqDecoderHead":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        self.params_ = dict(zip(self._PARAM_NAMES, arrays[:len(self._PARAM_NAMES)]))
        self.feature_mean_, self.feature_scale_ = arrays[len(self._PARAM_NAMES):]
        self.feature_dim_ = self.params_["W_init"].shape[0]
        return self

    def _encode(self, sequences) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        index = self._vocab_index()
        T = max(len(s) for s in sequences) + 1
        inp = np.full((len(sequences), T), index[EOS])
        tgt = np.full((len(sequences), T), index[EOS])
        mask = np.zeros((len(sequences), T))
        for r, seq in enumerate(sequences):
            ids = [index[t] for t in seq]
            inp[r, 0] = index[BOS]
            inp[r, 1:len(ids) + 1] = ids
            tgt[r, :len(ids)] = ids
            tgt[r, len(ids)] = index[EOS]
            mask[r, :len(ids) + 1] = 1.0
        return inp, tgt, mask

    def loss_and_grads(self, Fs: np.ndarray, inp: np.ndarray, tgt: np.ndarray,
                       mask: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Teacher-forced cross-entropy (summed over tokens, averaged over rows) and its gradient.

        ``Fs`` must already be standardized.
        """
        P = self.params_
        B, T = inp.shape
        H = self.hidden
        h0 = np.tanh(Fs @ P["W_init"] + P["b_init"])
        h = h0
        cache = []
        loss = 0.0
        for s in range(T):
            e = P["E"][inp[:, s]]
            u = np.concatenate([h, e], axis=1)
            z = 1.0 / (1.0 + np.exp(-(u @ P["W_z"] + P["b_z"])))
            c = np.tanh(u @ P["W_c"] + P["b_c"])
            h_new = (1.0 - z) * h + z * c
            p = softmax(h_new @ P["W_out"] + P["b_out"])
            loss -= np.sum(mask[:, s] * np.log(p[np.arange(B), tgt[:, s]] + 1e-300))
            cache.append((h, u, z, c, h_new, p))
            h = h_new
        loss /= B
        G = {k: np.zeros_like(v) for k, v in P.items()}
        dh_next = np.zeros((B, H))
        for s in reversed(range(T)):
            h, u, z, c, h_new, p = cache[s]
            dlog = p.copy()
            dlog[np.arange(B), tgt[:, s]] -= 1.0
            dlog *= mask[:, s:s + 1] / B
            G["W_out"] += h_new.T @ dlog
            G["b_out"] += dlog.sum(axis=0)
            dh_new = dlog @ P["W_out"].T + dh_next
            dz = dh_new * (c - h)
            dc = dh_new * z
            da_z = dz * z * (1.0 - z)
            da_c = dc * (1.0 - c * c)
            G["W_z"] += u.T @ da_z
            G["b_z"] += da_z.sum(axis=0)
            G["W_c"] += u.T @ da_c
            G["b_c"] += da_c.sum(axis=0)
            du = da_z @ P["W_z"].T + da_c @ P["W_c"].T
            dh_next = dh_new * (1.0 - z) + du[:, :H]
            np.add.at(G["E"], inp[:, s], du[:, H:])
        da0 = dh_next * (1.0 - h0 * h0)
        G["W_init"] += Fs.T @ da0
        G["b_init"] += da0.sum(axis=0)
        return float(loss), G

    def fit(self, F, sequences):
        F = np.asarray(F, dtype=np.float64)
        F = F.reshape(F.shape[0], -1)
        if len(F) == 0 or len(F) != len(sequences):
            raise ValueError("need one token sequence per non-empty feature row")
        self.initialize(F.shape[1])
        self._fit_scaler(F)
        Fs = self._scale(F)
        inp, tgt, mask = self._encode([list(s) for s in sequences])
        rng = np.random.default_rng(self.seed + 1)
        states = {k: AdamState(v.size, self.lr) for k, v in self.params_.items()}
        self.loss_curve_ = []
        for _ in range(self.epochs):
            total = 0.0
            for idx in _batches(len(F), self.batch_size, rng):
                loss, G = self.loss_and_grads(Fs[idx], inp[idx], tgt[idx], mask[idx])
                total += loss * len(idx)
                for k, st in states.items():
                    adam_step(st, self.params_[k], G[k])
            self.loss_curve_.append(total / len(F))
        return self

    def decode_one(self, feature: np.ndarray) -> tuple[str, ...]:
        P = self.params_
        index = self._vocab_index()
        vocab = list(self.vocab)
        h = np.tanh(self._scale(feature[None]) @ P["W_init"] + P["b_init"])
        tok = index[BOS]
        out: list[str] = []
        while len(out) < self.max_len:
            u = np.concatenate([h, P["E"][tok][None]], axis=1)
            z = 1.0 / (1.0 + np.exp(-(u @ P["W_z"] + P["b_z"])))
            c = np.tanh(u @ P["W_c"] + P["b_c"])
            h = (1.0 - z) * h + z * c
            logits = h @ P["W_out"] + P["b_out"]
            logits[0, index[BOS]] = -np.inf  # <bos> only ever starts a sequence
            tok = int(np.argmax(logits))
            if tok == index[EOS]:
                break
            out.append(vocab[tok])
        return tuple(out)

    def predict(self, F) -> list[tuple[str, ...]]:
        check_is_fitted(self, "params_")
        F = check_features(F, self.feature_dim_)
        return [self.decode_one(f) for f in F]


def decode(head: SeqDecoderHead, feature) -> TaskOutput:
    check_is_fitted(head, "params_")
    f = check_feature(feature, head.feature_dim_)
    return TaskOutput("tokens", head.decode_one(f))


# ---------------------------------------------------------------- QA


class QaHead(_FeatureScaler, BaseEstimator):
    """Bilinear question answerer.

    ``logits[a] = phi^T W[a] q + b[a]`` where ``q`` is the learned embedding of
    the question id and ``phi`` the standardized feature.
    """

    def __init__(self, n_questions: int = 5, n_answers: int = 12, q_dim: int = 8,
                 epochs: int = 40, lr: float = 0.01, batch_size: int = 64, seed: int = 0):
        self.n_questions = n_questions
        self.n_answers = n_answers
        self.q_dim = q_dim
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def initialize(self, feature_dim: int) -> "QaHead":
        rng = np.random.default_rng(self.seed)
        self.W_ = _uniform(rng, (self.n_answers, feature_dim, self.q_dim), feature_dim)
        self.b_ = np.zeros(self.n_answers)
        self.Q_ = rng.normal(0.0, 1.0, (self.n_questions, self.q_dim))
        self.feature_dim_ = feature_dim
        self.feature_mean_ = np.zeros(feature_dim)
        self.feature_scale_ = np.ones(feature_dim)
        return self

    def parameters(self) -> list[np.ndarray]:
        return [self.W_, self.b_, self.Q_, self.feature_mean_, self.feature_scale_]

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> "QaHead":
        self.W_, self.b_, self.Q_, self.feature_mean_, self.feature_scale_ = (
            np.asarray(a, dtype=np.float64) for a in arrays
        )
        self.feature_dim_ = self.W_.shape[1]
        return self

    def _check_qids(self, qids) -> np.ndarray:
        qids = np.asarray(qids, dtype=int).reshape(-1)
        bad = (qids < 0) | (qids >= self.n_questions)
        if bad.any():
            raise ValueError(f"unknown question id {int(qids[bad][0])}; have {self.n_questions}")
        return qids

    def _logits_scaled(self, Fs: np.ndarray, qids: np.ndarray) -> np.ndarray:
        return np.einsum("nd,adk,nk->na", Fs, self.W_, self.Q_[qids], optimize=True) + self.b_

    def decision_function(self, F, qids) -> np.ndarray:
        check_is_fitted(self, "W_")
        F = check_features(F, self.feature_dim_)
        qids = self._check_qids(qids)
        if len(qids) != len(F):
            raise ValueError("need one question id per feature row")
        return self._logits_scaled(self._scale(F), qids)

    def predict(self, F, qids) -> np.ndarray:
        return self.decision_function(F, qids).argmax(axis=1)

    def fit(self, F, qids, answers):
        F = np.asarray(F, dtype=np.float64)
        F = F.reshape(F.shape[0], -1)
        qids = self._check_qids(qids)
        answers = np.asarray(answers, dtype=int)
        if len(F) == 0 or not (len(F) == len(qids) == len(answers)):
            raise ValueError("need matching non-empty features, question ids and answers")
        if answers.min() < 0 or answers.max() >= self.n_answers:
            raise ValueError(f"answers must lie in [0, {self.n_answers})")
        self.initialize(F.shape[1])
        self._fit_scaler(F)
        Fs = self._scale(F)
        onehot = np.eye(self.n_answers)[answers]
        rng = np.random.default_rng(self.seed + 1)
        states = [AdamState(p.size, self.lr) for p in (self.W_, self.b_, self.Q_)]
        for _ in range(self.epochs):
            for idx in _batches(len(F), self.batch_size, rng):
                f, q = Fs[idx], self.Q_[qids[idx]]
                g = (softmax(self._logits_scaled(f, qids[idx])) - onehot[idx]) / len(idx)
                dW = np.einsum("na,nd,nk->adk", g, f, q, optimize=True)
                db = g.sum(axis=0)
                dq = np.einsum("na,adk,nd->nk", g, self.W_, f, optimize=True)
                dQ = np.zeros_like(self.Q_)
                np.add.at(dQ, qids[idx], dq)
                for p, gr, st in zip((self.W_, self.b_, self.Q_), (dW, db, dQ), states):
                    adam_step(st, p, gr)
        return self


def answer(head: QaHead, feature, question_id: int) -> TaskOutput:
    check_is_fitted(head, "W_")
    f = check_feature(feature, head.feature_dim_)
    logits = head.decision_function(f[None], [question_id])[0]
    return TaskOutput("answer", int(np.argmax(logits)), logits)
