"""Minimal recurrent knowledge tracer.

Each response is one-hot encoded over 2I slots (first I = correct, last I
= incorrect), compressed through a fixed random projection, and fed to a
single logistic recurrent layer. The output layer emits a per-item
correctness probability for the *next* response; training maximizes the
summed Bernoulli log-likelihood of those next responses by full
backpropagation through time with minibatches of students.

The output nonlinearity is the logistic function so that outputs are
valid probabilities. Dropout is the inverted variant, applied to hidden
activations during training only; evaluation-mode forward passes are
deterministic and apply no mask or rescaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .irt import DivergenceError

_CHECKPOINT_MAGIC = b"proftrace-dkt v1\n"

# (item_indices, corrects) per student, both int arrays of equal length
Sequence = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class DktHyperparams:
    compressed_dim: int
    hidden_dim: int
    dropout_p: float = 0.0
    step_size: float = 0.5
    minibatch_students: int = 32
    epochs: int = 10
    seed: int = 0
    max_unroll: int = 500

    def __post_init__(self):
        if self.compressed_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.minibatch_students <= 0 or self.epochs <= 0:
            raise ValueError("minibatch_students and epochs must be positive")
        if self.max_unroll <= 0:
            raise ValueError("max_unroll must be positive")


@dataclass(eq=False)
class DktParameters:
    """Network weights; the projection is fixed at initialization."""

    projection: np.ndarray  # (C, 2I)
    w_xh: np.ndarray        # (C, H)
    w_hh: np.ndarray        # (H, H)
    w_hy: np.ndarray        # (H, I)
    b_h: np.ndarray         # (H,)
    b_y: np.ndarray         # (I,)
    dropout_p: float = 0.0
    loss_trace: Optional[list] = field(default=None, repr=False)

    @property
    def n_items(self) -> int:
        return self.w_hy.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hh.shape[0]

    @property
    def compressed_dim(self) -> int:
        return self.w_xh.shape[0]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def encode_response(item: int, correct: int, n_items: int) -> np.ndarray:
    """One-hot over 2I slots: position i if correct, I + i if incorrect."""
    if not 0 <= item < n_items:
        raise ValueError(f"item index {item} out of range [0, {n_items})")
    x = np.zeros(2 * n_items)
    x[item if correct else n_items + item] = 1.0
    return x


def response_slot(items, corrects, n_items: int):
    """Index of the nonzero entry of each response's one-hot encoding."""
    items = np.asarray(items, dtype=np.int64)
    corrects = np.asarray(corrects, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= n_items):
        raise ValueError("item index out of range")
    return np.where(corrects == 1, items, n_items + items)


def make_projection(n_items: int, compressed_dim: int, seed) -> np.ndarray:
    """Fixed random compression of one-hot responses, entries N(0, 1/C).

    Shaped (C, 2I), so each one-hot input maps to one column, whose norm
    concentrates near 1.
    """
    if compressed_dim > 2 * n_items:
        raise ValueError(f"compressed_dim {compressed_dim} exceeds input "
                         f"dimension {2 * n_items}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(compressed_dim),
                      size=(compressed_dim, 2 * n_items))


def identity_projection(n_items: int) -> np.ndarray:
    """Projection bypass (C = 2I) used to test against the raw one-hot path."""
    return np.eye(2 * n_items)


def init_parameters(n_items: int, hp: DktHyperparams,
                    projection: Optional[np.ndarray] = None) -> DktParameters:
    """Seed-deterministic initialization: N(0, 0.01) weights, zero biases."""
    ss = np.random.SeedSequence(hp.seed)
    proj_seed, init_seed = ss.spawn(2)
    if projection is None:
        projection = make_projection(n_items, hp.compressed_dim, proj_seed)
    c, h = projection.shape[0], hp.hidden_dim
    rng = np.random.default_rng(init_seed)
    return DktParameters(
        projection=projection,
        w_xh=rng.normal(0.0, 0.1, size=(c, h)),
        w_hh=rng.normal(0.0, 0.1, size=(h, h)),
        w_hy=rng.normal(0.0, 0.1, size=(h, n_items)),
        b_h=np.zeros(h),
        b_y=np.zeros(n_items),
        dropout_p=hp.dropout_p,
    )


def _input_columns(params: DktParameters, inputs):
    """Compressed input per step; accepts slot indices or explicit vectors."""
    inputs = np.asarray(inputs)
    if inputs.ndim == 1 and np.issubdtype(inputs.dtype, np.integer):
        return params.projection[:, inputs].T  # (T, C)
    if inputs.ndim == 2:
        return inputs @ params.projection.T
    raise ValueError("inputs must be slot indices or (T, 2I) vectors")


def _forward(params: DktParameters, cs, masks):
    """Shared recurrence; ``masks`` is None for evaluation mode.

    Returns (h raw, h after dropout, y). The post-dropout state feeds both
    the recurrence and the output layer.
    """
    t_len = cs.shape[0]
    h_dim = params.hidden_dim
    hs = np.empty((t_len, h_dim))
    hts = np.empty((t_len, h_dim))
    ys = np.empty((t_len, params.n_items))
    keep = 1.0 - params.dropout_p
    ht_prev = np.zeros(h_dim)
    for t in range(t_len):
        h = _sigmoid(ht_prev @ params.w_hh + cs[t] @ params.w_xh + params.b_h)
        ht = h * masks[t] / keep if masks is not None else h
        ys[t] = _sigmoid(ht @ params.w_hy + params.b_y)
        hs[t], hts[t] = h, ht
        ht_prev = ht
    return hs, hts, ys


def rnn_forward(params: DktParameters, inputs, masks=None):
    """Unrolled forward pass.

    ``inputs`` are response encodings (slot indices or one-hot rows); the
    output row at position t is the prediction for the response following
    input t. Training mode is selected by passing binary dropout ``masks``
    of shape (T, H).

    Returns (hidden_states, outputs).
    """
    cs = _input_columns(params, inputs)
    hs, _, ys = _forward(params, cs, masks)
    if not np.isfinite(hs).all() or not np.isfinite(ys).all():
        raise DivergenceError("non-finite activation in forward pass")
    return hs, ys


def dkt_loss(params: DktParameters, sequences: List[Sequence]) -> float:
    """Summed next-response log-likelihood (negative cross-entropy).

    Each student's responses from the second onward are scored against the
    output coordinate of their item; higher is better, 0 is perfect.
    """
    total = 0.0
    n_items = params.n_items
    for items, corrects in sequences:
        items = np.asarray(items, dtype=np.int64)
        corrects = np.asarray(corrects, dtype=np.int64)
        if len(items) < 2:
            continue
        slots = response_slot(items[:-1], corrects[:-1], n_items)
        _, _, ys = _forward(params, _input_columns(params, slots), None)
        p = ys[np.arange(len(items) - 1), items[1:]]
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        r = corrects[1:]
        total += float(np.sum(r * np.log(p) + (1 - r) * np.log(1.0 - p)))
    return total


def _zero_grads(params: DktParameters):
    return {name: np.zeros_like(getattr(params, name))
            for name in ("w_xh", "w_hh", "w_hy", "b_h", "b_y")}


def _bptt_student(params: DktParameters, items, corrects, grads,
                  rng: Optional[np.random.Generator], max_unroll: int) -> int:
    """Accumulate ascent gradients for one student; returns target count.

    Sequences longer than ``max_unroll`` are split into chunks that carry
    the hidden state forward but stop gradient flow at the boundary.
    """
    n_items = params.n_items
    t_total = len(items) - 1  # number of inputs
    if t_total < 1:
        return 0
    slots = response_slot(items[:-1], corrects[:-1], n_items)
    keep = 1.0 - params.dropout_p
    carried = np.zeros(params.hidden_dim)
    n_targets = 0
    for start in range(0, t_total, max_unroll):
        stop = min(start + max_unroll, t_total)
        cs = params.projection[:, slots[start:stop]].T
        k_len = stop - start
        if rng is not None and params.dropout_p > 0.0:
            masks = (rng.random((k_len, params.hidden_dim)) >= params.dropout_p
                     ).astype(float)
        else:
            masks = None
        ht_prev = carried
        hs = np.empty((k_len, params.hidden_dim))
        hts = np.empty((k_len, params.hidden_dim))
        ys = np.empty((k_len, n_items))
        for t in range(k_len):
            h = _sigmoid(ht_prev @ params.w_hh + cs[t] @ params.w_xh
                         + params.b_h)
            ht = h * masks[t] / keep if masks is not None else h
            ys[t] = _sigmoid(ht @ params.w_hy + params.b_y)
            hs[t], hts[t] = h, ht
            ht_prev = ht

        dht_next = np.zeros(params.hidden_dim)
        for t in range(k_len - 1, -1, -1):
            dht = dht_next
            target = items[start + t + 1]
            r = corrects[start + t + 1]
            dj = r - ys[t, target]
            grads["w_hy"][:, target] += hts[t] * dj
            grads["b_y"][target] += dj
            dht = dht + params.w_hy[:, target] * dj
            n_targets += 1
            dh = dht * masks[t] / keep if masks is not None else dht
            dpre = dh * hs[t] * (1.0 - hs[t])
            prev = hts[t - 1] if t > 0 else carried
            grads["w_hh"] += np.outer(prev, dpre)
            grads["w_xh"] += np.outer(cs[t], dpre)
            grads["b_h"] += dpre
            dht_next = params.w_hh @ dpre
        carried = hts[-1]
    return n_targets


def bptt_gradients(params: DktParameters, sequences: List[Sequence],
                   max_unroll: int = 500):
    """Full-batch ascent gradient of dkt_loss (no dropout). For checking."""
    grads = _zero_grads(params)
    for items, corrects in sequences:
        _bptt_student(params, np.asarray(items, dtype=np.int64),
                      np.asarray(corrects, dtype=np.int64), grads, None,
                      max_unroll)
    return grads


def train_dkt(dataset, hp: DktHyperparams, label_space: str = "item",
              projection: Optional[np.ndarray] = None) -> DktParameters:
    """Train on every student with at least two responses.

    ``label_space`` selects what the network treats as an item: the
    dataset's items, groups, or skills (the coarse-label configurations).
    Gradient ascent on the summed next-response log-likelihood, minibatched
    by student; the recorded ``loss_trace`` holds the evaluation-mode
    cross-entropy (positive, decreasing) before training and after each
    epoch. Deterministic given hp.seed.
    """
    sequences, n_items = dataset_sequences(dataset, label_space)
    trainable = [seq for seq in sequences if len(seq[0]) >= 2]
    if not trainable:
        raise ValueError("no student has two or more responses")
    params = init_parameters(n_items, hp, projection=projection)
    sgd_seed = np.random.SeedSequence(hp.seed).spawn(3)[2]
    rng = np.random.default_rng(sgd_seed)

    trace = [-dkt_loss(params, trainable)]
    for epoch in range(hp.epochs):
        order = rng.permutation(len(trainable))
        for b_start in range(0, len(order), hp.minibatch_students):
            batch = order[b_start:b_start + hp.minibatch_students]
            grads = _zero_grads(params)
            n_targets = 0
            for idx in batch:
                items, corrects = trainable[idx]
                n_targets += _bptt_student(params, items, corrects, grads,
                                           rng, hp.max_unroll)
            if n_targets == 0:
                continue
            for name, g in grads.items():
                arr = getattr(params, name)
                arr += (hp.step_size / n_targets) * g
                if not np.isfinite(arr).all():
                    raise DivergenceError(
                        f"non-finite weights at epoch {epoch + 1}, "
                        f"minibatch {b_start // hp.minibatch_students + 1}")
        loss = -dkt_loss(params, trainable)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss after epoch {epoch + 1}")
        trace.append(loss)
    params.loss_trace = trace
    return params


def dataset_sequences(dataset, label_space: str = "item"):
    """Per-student (label_idx, correct) arrays plus the label-space size."""
    if label_space == "item":
        size = dataset.n_items
        mapping = None
    elif label_space == "group":
        mapping = dataset.item_group
        if np.any(mapping < 0):
            raise ValueError("group label space requires every item grouped")
        size = dataset.n_groups
    elif label_space == "skill":
        mapping = dataset.item_skill
        size = len(dataset.skill_index)
    else:
        raise ValueError(f"unknown label space {label_space!r}")
    out = []
    for items, corrects, _ in dataset.sequences:
        labels = items if mapping is None else mapping[items]
        out.append((labels, corrects))
    return out, size


def predict_dkt(params: DktParameters, history_items, history_corrects,
                next_item: int) -> float:
    """P(correct) on ``next_item`` after the given history (evaluation mode).

    An empty history falls back to the output bias: sigmoid(b_y[i]).
    """
    items = np.asarray(history_items, dtype=np.int64)
    corrects = np.asarray(history_corrects, dtype=np.int64)
    if not 0 <= next_item < params.n_items:
        raise ValueError(f"item index {next_item} out of range")
    if items.size == 0:
        return float(_sigmoid(params.b_y[[next_item]])[0])
    slots = response_slot(items, corrects, params.n_items)
    _, ys = rnn_forward(params, slots)
    return float(ys[-1, next_item])


def predict_sequence(params: DktParameters, items, corrects) -> np.ndarray:
    """Online predictions for responses 2..T in one evaluation-mode pass.

    Equal to calling predict_dkt on each prefix (the recurrence is causal)
    but linear instead of quadratic in sequence length.
    """
    items = np.asarray(items, dtype=np.int64)
    corrects = np.asarray(corrects, dtype=np.int64)
    if len(items) < 2:
        return np.empty(0)
    slots = response_slot(items[:-1], corrects[:-1], params.n_items)
    _, ys = rnn_forward(params, slots)
    return ys[np.arange(len(items) - 1), items[1:]]


def save_checkpoint(path: Union[str, Path], params: DktParameters,
                    seed: int = 0, label_space: str = "item"):
    """Versioned binary checkpoint: JSON header + row-major float64 blocks."""
    header = {
        "n_items": params.n_items,
        "compressed_dim": params.compressed_dim,
        "hidden_dim": params.hidden_dim,
        "seed": seed,
        "dropout_p": params.dropout_p,
        "label_space": label_space,
    }
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for name in ("projection", "w_xh", "w_hh", "w_hy", "b_h", "b_y"):
            arr = np.ascontiguousarray(getattr(params, name), dtype=np.float64)
            fh.write(arr.tobytes())


def load_checkpoint(path: Union[str, Path]):
    """Read a checkpoint; returns (DktParameters, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode())
        n_i = header["n_items"]
        c = header["compressed_dim"]
        h = header["hidden_dim"]
        shapes = {"projection": (c, 2 * n_i), "w_xh": (c, h),
                  "w_hh": (h, h), "w_hy": (h, n_i), "b_h": (h,), "b_y": (n_i,)}
        arrays = {}
        for name, shape in shapes.items():
            n_bytes = int(np.prod(shape)) * 8
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise ValueError(f"{path}: truncated block {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    params = DktParameters(dropout_p=header["dropout_p"], **arrays)
    return params, header
