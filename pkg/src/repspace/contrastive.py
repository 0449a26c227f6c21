"""InfoNCE training with a momentum key encoder and a FIFO negative queue.

Also provides the two temperature-limit losses (``simple_loss`` for large
temperature, ``triplet_loss`` for small temperature) and SEED-style
similarity-distribution distillation, which is used only to produce
initialization checkpoints.

Similarities are cosines between unit-normalized outputs of the projector
(or of the encoder when the model has no projector).
"""

from __future__ import annotations

import contextlib
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from repspace import synthetic
from repspace.numerics import (
    GradTape, MlpParams, OptimState, backward, cosine_lr, init_mlp, l2_normalize, mlp_forward,
    read_mlp, sgd_step, write_mlp, CheckpointError,
)

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6

# seed streams: SeedSequence([seed, stream])
STREAM_INIT, STREAM_TRAIN, STREAM_QUEUE = 10, 11, 12


class TrainDivergedError(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


# --- model ---------------------------------------------------------------------

@dataclass
class Model:
    """Encoder (backbone) followed by an optional projector head."""

    encoder: MlpParams
    projector: MlpParams | None = None

    def __post_init__(self):
        if self.projector is not None and self.projector.in_width != self.encoder.out_width:
            raise ValueError(
                f"projector input width {self.projector.in_width} != encoder output width {self.encoder.out_width}"
            )

    @property
    def in_width(self) -> int:
        return self.encoder.in_width

    @property
    def out_width(self) -> int:
        return (self.projector or self.encoder).out_width

    def mlps(self) -> list[MlpParams]:
        return [self.encoder] + ([self.projector] if self.projector is not None else [])

    def arrays(self) -> list[np.ndarray]:
        return [a for mlp in self.mlps() for a in mlp.arrays()]

    def copy(self) -> Model:
        return Model(self.encoder.copy(), self.projector.copy() if self.projector is not None else None)

    def equals(self, other: Model) -> bool:
        mine, theirs = self.mlps(), other.mlps()
        return len(mine) == len(theirs) and all(a.equals(b) for a, b in zip(mine, theirs))

    def embed(self, x: np.ndarray, use_projector: bool = False) -> np.ndarray:
        """Eval-mode output: backbone by default, projector head on request (not normalized)."""
        h, _ = mlp_forward(self.encoder, x)
        if use_projector and self.projector is not None:
            h, _ = mlp_forward(self.projector, h)
        return h

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        for mlp in self.mlps():
            write_mlp(mlp, buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Model:
        buf = io.BytesIO(data)
        mlps = []
        while (mlp := read_mlp(buf)) is not None:
            mlps.append(mlp)
        if len(mlps) not in (1, 2):
            raise CheckpointError(f"model checkpoint must hold 1 or 2 MLP records, found {len(mlps)}")
        try:
            return cls(*mlps)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Model:
        return cls.from_bytes(Path(path).read_bytes())


def init_model(in_width: int, encoder_widths, projector_widths, rng: np.random.Generator,
               projector_dropout: float = 0.0) -> Model:
    """``encoder_widths`` / ``projector_widths`` list hidden widths then output width."""
    encoder = init_mlp([in_width, *encoder_widths], rng)
    projector = None
    if projector_widths:
        projector = init_mlp([encoder.out_width, *projector_widths], rng, dropout_p=projector_dropout)
    return Model(encoder, projector)


@dataclass
class ModelTape:
    encoder: GradTape
    projector: GradTape | None
    z: np.ndarray
    norms: np.ndarray
    out: np.ndarray


def model_forward(model: Model, x: np.ndarray, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, ModelTape]:
    """Encoder, projector, then row normalization."""
    h, t_enc = mlp_forward(model.encoder, x, train_mode, rng)
    t_proj = None
    if model.projector is not None:
        h, t_proj = mlp_forward(model.projector, h, train_mode, rng)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FloatingPointError("zero-norm model output; cannot normalize")
    out = h / norms
    return out, ModelTape(t_enc, t_proj, h, norms, out)


def model_backward(tape: ModelTape, out_grad: np.ndarray):
    """Gradients ``[encoder_grads, projector_grads?]`` and the input gradient."""
    q = tape.out
    dz = (out_grad - q * np.sum(q * out_grad, axis=1, keepdims=True)) / tape.norms
    grads = []
    if tape.projector is not None:
        proj_grads, dz = backward(tape.projector, dz)
        grads.append(proj_grads)
    enc_grads, dx = backward(tape.encoder, dz)
    grads.insert(0, enc_grads)
    return grads, dx


# --- negative queue ----------------------------------------------------------

def _check_unit(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")
    return x


class NegativeQueue:
    """Fixed-capacity FIFO ring buffer of unit-norm keys."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim))
        self._size = 0
        self._cursor = 0  # next write position

    def __len__(self) -> int:
        return self._size

    @property
    def full(self) -> bool:
        return self._size == self.capacity

    def enqueue(self, keys: np.ndarray) -> NegativeQueue:
        keys = _check_unit(np.atleast_2d(keys), "queued keys")
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        if len(keys) > self.capacity:
            raise ValueError(f"batch of {len(keys)} exceeds queue capacity {self.capacity}")
        pos = (self._cursor + np.arange(len(keys))) % self.capacity
        self._buf[pos] = keys
        self._cursor = int((self._cursor + len(keys)) % self.capacity)
        self._size = min(self.capacity, self._size + len(keys))
        return self

    def entries(self) -> np.ndarray:
        """Stored keys, oldest first (a copy)."""
        if self._size < self.capacity:
            return self._buf[: self._size].copy()
        return np.roll(self._buf, -self._cursor, axis=0)

    def view(self) -> np.ndarray:
        """Stored keys in storage order, without copying. Read-only use only."""
        return self._buf[: self._size] if self._size < self.capacity else self._buf


def _negatives(negatives) -> np.ndarray:
    if isinstance(negatives, NegativeQueue):
        return negatives.view()
    return np.atleast_2d(np.asarray(negatives, dtype=np.float64))


def _check_loss_inputs(q, k_pos, negatives, tau=None):
    if tau is not None and not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    q = _check_unit(q, "query")
    k_pos = _check_unit(k_pos, "positive key")
    negs = _negatives(negatives)
    if negs.size == 0:
        raise ValueError("negative set is empty")
    _check_unit(negs, "negatives")
    return q, k_pos, negs


# --- losses --------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def similarities(q, k_pos, negs) -> np.ndarray:
    """``[s_pos, s_neg_1, ..., s_neg_K]`` for one query."""
    return np.concatenate([[q @ k_pos], negs @ q])


def info_nce_from_similarities(s: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """InfoNCE with the positive at index 0; gradient w.r.t. ``s``."""
    logp = _log_softmax(s / tau)
    grad = np.exp(logp) / tau
    grad[0] -= 1.0 / tau
    return float(-logp[0]), grad


def info_nce(q, k_pos, negatives, tau: float) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``[s_pos, s_neg...]``; never mutates the queue."""
    q, k_pos, negs = _check_loss_inputs(q, k_pos, negatives, tau)
    return info_nce_from_similarities(similarities(q, k_pos, negs), tau)


def simple_loss_from_similarities(s: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """``-s_pos + lam * sum(s_neg)``; the large-temperature limit of InfoNCE."""
    grad = np.full_like(s, lam)
    grad[0] = -1.0
    return float(-s[0] + lam * s[1:].sum()), grad


def simple_loss(q, k_pos, negatives, lam: float) -> tuple[float, np.ndarray]:
    q, k_pos, negs = _check_loss_inputs(q, k_pos, negatives)
    return simple_loss_from_similarities(similarities(q, k_pos, negs), lam)


def triplet_from_similarities(s: np.ndarray) -> tuple[float, np.ndarray]:
    """``max(s_max - s_pos, 0)``; the small-temperature limit. Ties pick the first hardest negative."""
    hardest = 1 + int(np.argmax(s[1:]))
    loss = max(s[hardest] - s[0], 0.0)
    grad = np.zeros_like(s)
    if loss > 0:
        grad[0], grad[hardest] = -1.0, 1.0
    return float(loss), grad


def triplet_loss(q, k_pos, negatives) -> tuple[float, np.ndarray]:
    q, k_pos, negs = _check_loss_inputs(q, k_pos, negatives)
    return triplet_from_similarities(similarities(q, k_pos, negs))


def seed_distill_from_similarities(s_student: np.ndarray, s_teacher: np.ndarray, tau_s: float,
                                   tau_t: float) -> tuple[float, np.ndarray]:
    """Cross-entropy of the student softmax against the teacher softmax; grad w.r.t. student sims."""
    p_t = _softmax(s_teacher / tau_t)
    logp_s = _log_softmax(s_student / tau_s)
    loss = -np.sum(p_t * logp_s, axis=-1)
    return loss, (np.exp(logp_s) - p_t) / tau_s


def seed_distill_loss(student_q, teacher_q, queue, tau_s: float, tau_t: float | None = None):
    """Targets are the teacher anchor followed by the queued teacher keys."""
    tau_t = tau_s if tau_t is None else tau_t
    if not (tau_s > 0 and tau_t > 0):
        raise ValueError("temperatures must be > 0")
    student_q, teacher_q, negs = _check_loss_inputs(student_q, teacher_q, queue)
    s_student = similarities(student_q, teacher_q, negs)
    s_teacher = similarities(teacher_q, teacher_q, negs)
    loss, grad = seed_distill_from_similarities(s_student, s_teacher, tau_s, tau_t)
    return float(loss), grad


def entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def info_nce_batch(q: np.ndarray, k: np.ndarray, negs: np.ndarray, tau: float):
    """Mean InfoNCE over rows; returns (loss, d loss / d q, batch top-1 accuracy)."""
    s = np.hstack([np.sum(q * k, axis=1, keepdims=True), q @ negs.T])
    logp = _log_softmax(s / tau)
    g = np.exp(logp)
    g[:, 0] -= 1.0
    g /= tau * len(q)
    dq = g[:, :1] * k + g[:, 1:] @ negs
    acc = float(np.mean(np.argmax(s, axis=1) == 0))
    return float(-logp[:, 0].mean()), dq, acc


def seed_distill_batch(s_q: np.ndarray, t_q: np.ndarray, negs: np.ndarray, tau_s: float, tau_t: float):
    """Mean SEED loss over rows; returns (loss, d loss / d student outputs)."""
    s_student = np.hstack([np.sum(s_q * t_q, axis=1, keepdims=True), s_q @ negs.T])
    s_teacher = np.hstack([np.ones((len(t_q), 1)), t_q @ negs.T])
    loss, g = seed_distill_from_similarities(s_student, s_teacher, tau_s, tau_t)
    g /= len(s_q)
    return float(loss.mean()), g[:, :1] * t_q + g[:, 1:] @ negs


# --- momentum encoder ----------------------------------------------------------

def momentum_update(key: Model, query: Model, m: float) -> Model:
    """theta_k <- m * theta_k + (1 - m) * theta_q, in place on ``key``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must be in [0, 1]")
    ka, qa = key.arrays(), query.arrays()
    if len(ka) != len(qa) or any(a.shape != b.shape for a, b in zip(ka, qa)):
        raise ValueError("key and query models differ in shape")
    for k_arr, q_arr in zip(ka, qa):
        k_arr *= m
        k_arr += (1.0 - m) * q_arr
    return key


# --- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.1
    queue_size: int = 256
    batch_size: int = 64
    lr: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    key_momentum: float = 0.99
    epochs: int = 40
    encoder_widths: tuple[int, ...] = (64, 32)
    projector_widths: tuple[int, ...] = (64, 32)
    projector_dropout: float = 0.0
    aug: synthetic.AugSpec = field(default_factory=lambda: synthetic.aug_preset("baseline"))
    init: str = "random"  # or a checkpoint path
    distill_temperature: float = 0.1
    snapshot_every: int = 0  # save a checkpoint every N epochs during training; 0 disables

    def errors(self, dataset_size: int | None = None) -> list[str]:
        errs = []
        if not self.temperature > 0:
            errs.append("temperature must be > 0")
        if not self.distill_temperature > 0:
            errs.append("distill_temperature must be > 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.queue_size < 1:
            errs.append("queue_size must be >= 1")
        elif self.batch_size >= 1 and self.queue_size % self.batch_size:
            errs.append("queue_size must be a multiple of batch_size")
        if dataset_size is not None and self.batch_size > dataset_size:
            errs.append("batch_size exceeds dataset size")
        if self.lr < 0:
            errs.append("lr must be >= 0")
        if not 0 <= self.sgd_momentum <= 1:
            errs.append("sgd_momentum must be in [0, 1]")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if not 0 <= self.key_momentum <= 1:
            errs.append("key_momentum must be in [0, 1]")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.snapshot_every < 0:
            errs.append("snapshot_every must be >= 0")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            errs.append("encoder_widths must be non-empty positive widths")
        if any(w < 1 for w in self.projector_widths):
            errs.append("projector_widths must be positive widths")
        if not 0 <= self.projector_dropout < 1:
            errs.append("projector_dropout must be in [0, 1)")
        errs.extend(f"aug: {e}" for e in self.aug.errors())
        return errs

    def validate(self, dataset_size: int | None = None) -> None:
        errs = self.errors(dataset_size)
        if errs:
            raise ValueError("invalid TrainConfig: " + "; ".join(errs))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    batch_inst_disc: float
    lr: float


STATS_COLUMNS = ("epoch", "loss", "batch_inst_disc", "lr")


@dataclass
class TrainResult:
    model: Model
    stats: list[EpochStats]
    queue: NegativeQueue
    key_model: Model


def fresh_model(in_width: int, config: TrainConfig, seed: int) -> Model:
    rng = synthetic.stream_rng(seed, STREAM_INIT)
    return init_model(in_width, config.encoder_widths, config.projector_widths, rng, config.projector_dropout)


def _random_queue(capacity: int, dim: int, seed: int) -> NegativeQueue:
    rng = synthetic.stream_rng(seed, STREAM_QUEUE)
    return NegativeQueue(capacity, dim).enqueue(l2_normalize(rng.normal(size=(capacity, dim))))


@contextlib.contextmanager
def _maybe_single_thread(deterministic: bool):
    if deterministic:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def _sgd_all(model: Model, grads, states: list[OptimState]) -> None:
    for mlp, g, st in zip(model.mlps(), grads, states):
        sgd_step(mlp, g, st)


def train(dataset: synthetic.Dataset, config: TrainConfig, seed: int, init: Model | None = None,
          deterministic: bool = True, on_epoch: Callable[[int, Model], None] | None = None) -> TrainResult:
    """MoCo-style training: query encoder by SGD, key encoder by momentum, keys into the queue.

    Per epoch: shuffle, cut ``len(dataset) // batch_size`` batches, draw two
    views per sample, step on InfoNCE, momentum-update the key model, enqueue
    keys.  The queue starts filled with random unit vectors.  ``on_epoch`` is
    called with the 1-based count of finished epochs and the query model.
    """
    config.validate(len(dataset))
    with _maybe_single_thread(deterministic):
        model = init.copy() if init is not None else fresh_model(dataset.dim, config, seed)
        if model.in_width != dataset.dim:
            raise ValueError(f"model input width {model.in_width} != dataset dim {dataset.dim}")
        key_model = model.copy()
        queue = _random_queue(config.queue_size, model.out_width, seed)
        rng = synthetic.stream_rng(seed, STREAM_TRAIN)
        states = [OptimState(config.lr, config.sgd_momentum, config.weight_decay) for _ in model.mlps()]
        n_steps = len(dataset) // config.batch_size
        stats = []
        for epoch in range(config.epochs):
            lr = cosine_lr(epoch, config.epochs, config.lr)
            for st in states:
                st.learning_rate = lr
            perm = rng.permutation(len(dataset))
            losses, accs = [], []
            for step in range(n_steps):
                x = dataset.features[perm[step * config.batch_size:(step + 1) * config.batch_size]]
                v1, v2 = synthetic.positive_pairs(x, config.aug, rng, dataset.layout)
                q, tape = model_forward(model, v1, train_mode=True, rng=rng)
                k, _ = model_forward(key_model, v2)
                loss, dq, acc = info_nce_batch(q, k, queue.view(), config.temperature)
                if not np.isfinite(loss):
                    raise TrainDivergedError(epoch, step, loss)
                grads, _ = model_backward(tape, dq)
                _sgd_all(model, grads, states)
                momentum_update(key_model, model, config.key_momentum)
                queue.enqueue(k)
                losses.append(loss)
                accs.append(acc)
            stats.append(EpochStats(epoch, float(np.mean(losses)), float(np.mean(accs)), float(lr)))
            log.debug("epoch %d loss %.4f batch-acc %.3f lr %.4f", epoch, stats[-1].loss, stats[-1].batch_inst_disc, lr)
            if on_epoch is not None:
                on_epoch(epoch + 1, model)
    return TrainResult(model, stats, queue, key_model)


def distill_init(dataset: synthetic.Dataset, teacher: Model, epochs: int, config: TrainConfig,
                 seed: int, deterministic: bool = True) -> Model:
    """Train a fresh student to match the teacher's similarity distribution over a queue.

    The student starts from the same random init ``train`` would use for
    ``seed``, so ``epochs=0`` returns exactly that init.  Targets are the
    normalized projector outputs of the teacher.
    """
    config.validate(len(dataset))
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    with _maybe_single_thread(deterministic):
        student = fresh_model(dataset.dim, config, seed)
        if teacher.in_width != student.in_width:
            raise ValueError(f"teacher input width {teacher.in_width} != student input width {student.in_width}")
        if teacher.out_width != student.out_width:
            raise ValueError(f"teacher output dim {teacher.out_width} != student output dim {student.out_width}")
        queue = _random_queue(config.queue_size, student.out_width, seed)
        rng = synthetic.stream_rng(seed, STREAM_TRAIN)
        states = [OptimState(config.lr, config.sgd_momentum, config.weight_decay) for _ in student.mlps()]
        n_steps = len(dataset) // config.batch_size
        for epoch in range(epochs):
            lr = cosine_lr(epoch, epochs, config.lr)
            for st in states:
                st.learning_rate = lr
            perm = rng.permutation(len(dataset))
            for step in range(n_steps):
                x = dataset.features[perm[step * config.batch_size:(step + 1) * config.batch_size]]
                v = synthetic.augment_batch(x, config.aug, rng, dataset.layout)
                t, _ = model_forward(teacher, v)
                s, tape = model_forward(student, v, train_mode=True, rng=rng)
                loss, ds = seed_distill_batch(s, t, queue.view(), config.distill_temperature,
                                              config.distill_temperature)
                if not np.isfinite(loss):
                    raise TrainDivergedError(epoch, step, loss)
                grads, _ = model_backward(tape, ds)
                _sgd_all(student, grads, states)
                queue.enqueue(t)
    return student


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
